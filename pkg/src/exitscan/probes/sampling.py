"""Connection-sampling estimation and destination-targeting checks.

An exit that tampers with only a fraction p of connections is measured by
repeating the HTTPS probe and counting alerts.  Because a browser re-fetches
a certificate over a second connection, the attack works end to end with
probability p squared; that is reported as ``effective_rate``.
"""

import asyncio
import random
from dataclasses import dataclass

from scipy import stats

from exitscan.probes.base import Verdict


class NoValidTrials(RuntimeError):
    """Every trial ended in ERROR, so there is nothing to estimate."""


def clopper_pearson(hits, n, confidence=0.95):
    """Exact binomial interval; never covers less than ``confidence``."""
    if n <= 0:
        raise ValueError("need at least one trial")
    alpha = 1.0 - confidence
    low = 0.0 if hits == 0 else float(stats.beta.ppf(alpha / 2, hits, n - hits + 1))
    high = 1.0 if hits == n else float(stats.beta.ppf(1 - alpha / 2, hits + 1, n - hits))
    return low, high


def wilson(hits, n, confidence=0.95):
    if n <= 0:
        raise ValueError("need at least one trial")
    z = float(stats.norm.ppf(1 - (1.0 - confidence) / 2))
    p = hits / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * ((p * (1 - p) / n + z * z / (4 * n * n)) ** 0.5) / denom
    # At the boundaries the bound is exact; skip the round-off.
    low = 0.0 if hits == 0 else max(0.0, centre - half)
    high = 1.0 if hits == n else min(1.0, centre + half)
    return low, high


INTERVALS = {"clopper-pearson": clopper_pearson, "wilson": wilson}


@dataclass
class SamplingEstimate:
    exit_fp: str
    trials: int
    hits: int
    rate: float
    ci_low: float
    ci_high: float
    effective_rate: float
    errors: int = 0
    method: str = "clopper-pearson"
    confidence: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.ci_low <= self.rate <= self.ci_high <= 1.0:
            raise ValueError("interval [%g, %g] does not bracket rate %g"
                             % (self.ci_low, self.ci_high, self.rate))
        if abs(self.effective_rate - self.rate * self.rate) > 1e-12:
            raise ValueError("effective_rate must equal rate squared")

    @classmethod
    def from_counts(cls, exit_fp, hits, trials, errors=0, method="clopper-pearson", confidence=0.95):
        low, high = INTERVALS[method](hits, trials, confidence)
        rate = hits / trials
        # Guard against float round-off at the boundaries.
        low, high = min(low, rate), max(high, rate)
        return cls(exit_fp, trials, hits, rate, low, high, rate * rate, errors, method, confidence)

    def covers(self, p):
        return self.ci_low <= p <= self.ci_high

    def to_dict(self):
        return {"exit_fp": self.exit_fp, "trials": self.trials, "hits": self.hits,
                "errors": self.errors, "rate": self.rate, "ci_low": self.ci_low,
                "ci_high": self.ci_high, "effective_rate": self.effective_rate,
                "method": self.method, "confidence": self.confidence}


async def estimate_sampling(scan_fn, exit_fp, trials, sleep_jitter=(1.0, 5.0), rng=None,
                            method="clopper-pearson", confidence=0.95, sleep=asyncio.sleep):
    """Run ``trials`` HTTPS probes against one exit, one after another.

    ``scan_fn(exit_fp)`` returns a ProbeResult.  A random pause drawn
    uniformly from ``sleep_jitter`` separates consecutive trials.  ERROR
    trials are left out of the denominator and counted in ``errors``.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = rng or random.Random()
    lo, hi = sleep_jitter
    hits = valid = errors = 0
    for i in range(trials):
        if i and hi > 0:
            await sleep(rng.uniform(lo, hi))
        result = await scan_fn(exit_fp)
        if result.verdict is Verdict.ERROR:
            errors += 1
            continue
        valid += 1
        hits += result.verdict is Verdict.ALERT
    if not valid:
        raise NoValidTrials("all %d trials against %s failed" % (trials, exit_fp))
    return SamplingEstimate.from_counts(exit_fp, hits, valid, errors, method, confidence)


async def detect_destination_targeting(scan_fn, exit_fp, targets):
    """Probe each target once over the same exit; ``scan_fn(exit_fp, target)``."""
    targets = list(targets)
    if len(targets) < 2:
        raise ValueError("destination targeting needs at least two targets")
    out = {}
    for target in targets:
        out[target] = await scan_fn(exit_fp, target)
    return out


async def estimate_targeting(scan_fn, exit_fp, targets, trials, **kwargs):
    """Per-target sampling estimates, to tell a selective attacker apart."""
    out = {}
    for target in targets:
        out[target] = await estimate_sampling(lambda fp, t=target: scan_fn(fp, t),
                                              exit_fp, trials, **kwargs)
    return out
