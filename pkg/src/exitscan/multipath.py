"""Re-fetch a suspicious certificate over a different exit and compare.

A user who meets an unexpected certificate cannot tell a forged one from a
legitimate key roll-over.  Fetching the same certificate again over an
independent exit settles most cases: a single malicious exit cannot tamper
with both fetches.  Reports of mismatches carry only the exits and the
certificates, nothing about the user.
"""

import asyncio
import base64
import collections
import enum
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources

import jsonschema

from exitscan import ctlproto, socksio, tlsio
from exitscan.ctlproto import EventKind, StreamStatus
from exitscan.probes.base import CertObservation, rfc3339
from exitscan.probes.https import fetch_chain, observe

log = logging.getLogger(__name__)

DEFAULT_SINK = "mitm-reports.jsonl"
REPORT_KEYS = frozenset({"exits_used", "observations", "created_at"})


class FetchFailed(Exception):
    pass


class NotMismatch(ValueError):
    pass


class ConsentRequired(PermissionError):
    pass


class SinkUnavailable(OSError):
    pass


class OutcomeStatus(str, enum.Enum):
    MATCH = "MATCH"
    MISMATCH = "MISMATCH"
    INCONCLUSIVE = "INCONCLUSIVE"


@dataclass
class VerificationOutcome:
    status: OutcomeStatus
    observations: list
    exits_used: list
    distinct_exit: bool
    possible_regional: bool = False
    diagnostics: list = field(default_factory=list)

    def __post_init__(self):
        self.status = OutcomeStatus(self.status)
        if self.status is not OutcomeStatus.INCONCLUSIVE:
            if not self.distinct_exit or len(set(self.exits_used)) < 2:
                raise ValueError("a conclusive outcome needs two distinct exits")
            if len(self.observations) < 2:
                raise ValueError("a conclusive outcome needs two observations")
            differ = len({o.sha1_fp for o in self.observations}) > 1
            if differ != (self.status is OutcomeStatus.MISMATCH):
                raise ValueError("status %s contradicts the observed fingerprints" % self.status.value)

    def to_dict(self):
        return {"status": self.status.value, "exits_used": list(self.exits_used),
                "distinct_exit": self.distinct_exit, "possible_regional": self.possible_regional,
                "observations": [o.to_dict() for o in self.observations],
                "diagnostics": list(self.diagnostics)}


class StreamTracker:
    """Learns which exit carried a stream the daemon attached on its own.

    The stream is recognised by its local port (``SOURCE_ADDR``); the
    circuit comes from the stream's SENTCONNECT or SUCCEEDED event and the
    exit from that circuit's path.  ``GETINFO circuit-status`` fills in
    paths of circuits built before the tracker started listening.
    """

    def __init__(self, session, remember=4096):
        self.session = session
        self._paths = collections.OrderedDict()
        self._remember = remember
        self._by_port = {}
        self._by_stream = {}
        self._queue = None
        self._task = None

    async def start(self):
        if self._task is None:
            self._queue = self.session.subscribe()
            await self.session.set_events(("CIRC", "STREAM"))
            self._task = asyncio.get_running_loop().create_task(self._dispatch())
        return self

    async def stop(self):
        if self._task is not None:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
            self.session.unsubscribe(self._queue)
            self._task = None

    async def __aenter__(self):
        return await self.start()

    async def __aexit__(self, *exc):
        await self.stop()

    async def _dispatch(self):
        while True:
            event = await self._queue.get()
            if event is None:
                for fut in list(self._by_port.values()) + list(self._by_stream.values()):
                    if not fut.done():
                        fut.set_exception(ctlproto.SessionLost("control session ended"))
                return
            if event.kind is EventKind.CIRC and "path" in event.detail:
                self._paths[event.entity_id] = parse_path(event.detail["path"])
                self._paths.move_to_end(event.entity_id)
                while len(self._paths) > self._remember:
                    self._paths.popitem(last=False)
            elif event.kind is EventKind.STREAM:
                if event.status in (StreamStatus.NEW.value, StreamStatus.NEWRESOLVE.value):
                    fut = self._by_port.pop(event.source_port, None)
                    if fut is not None:
                        self._by_stream[event.entity_id] = fut
                elif event.status in (StreamStatus.SENTCONNECT.value, StreamStatus.SENTRESOLVE.value,
                                      StreamStatus.SUCCEEDED.value):
                    fut = self._by_stream.pop(event.entity_id, None)
                    if fut is not None and not fut.done() and event.detail.get("circuit_id"):
                        fut.set_result(event.detail["circuit_id"])
                elif event.status in (StreamStatus.FAILED.value, StreamStatus.CLOSED.value):
                    self._by_stream.pop(event.entity_id, None)

    def claim(self):
        """Returns ``(on_bound, circuit future)`` for one SOCKS connection."""
        fut = asyncio.get_running_loop().create_future()

        async def on_bound(writer):
            sockname = writer.get_extra_info("sockname")
            if sockname:
                self._by_port[sockname[1]] = fut

        return on_bound, fut

    async def exit_of(self, circuit_id):
        path = self._paths.get(circuit_id)
        if path is None:
            status = await self.session.get_info("circuit-status")
            for line in status.splitlines():
                parts = line.split()
                if len(parts) >= 3 and parts[0] == str(circuit_id):
                    path = parse_path(parts[2])
        return path[-1] if path else None


def parse_path(text):
    """``$FP~nick,$FP=nick,...`` to a list of bare fingerprints."""
    hops = []
    for hop in text.split(","):
        hop = hop.lstrip("$")
        for sep in ("~", "="):
            hop = hop.partition(sep)[0]
        hops.append(hop.upper())
    return hops


async def fetch_certificate(tracker, socks_endpoint, target, timeout=30.0, profile="torbrowser"):
    """Fetch ``target``'s chain over whatever circuit the daemon picks."""
    target = target if isinstance(target, socksio.SocksTarget) else socksio.SocksTarget.parse(str(target))
    on_bound, circuit = tracker.claim()
    try:
        stream = await socksio.connect_via(socks_endpoint, target, timeout, on_bound=on_bound)
    except socksio.SocksError as err:
        raise FetchFailed("%s: %s" % (type(err).__name__, err)) from None
    try:
        chain = await asyncio.wait_for(fetch_chain(stream, target.host, profile), timeout)
    except (tlsio.HandshakeError, ConnectionError, asyncio.IncompleteReadError, asyncio.TimeoutError) as err:
        raise FetchFailed("TLS handshake with %s failed: %s" % (target, err)) from None
    finally:
        stream.close()
    try:
        circuit_id = await asyncio.wait_for(circuit, timeout)
        exit_fp = await tracker.exit_of(circuit_id)
    except asyncio.TimeoutError:
        exit_fp = None
    return observe(chain, exit_fp, str(target))


def _regional(a, b):
    # Same issuing CA, different leaf, no known forgery root: plausibly a
    # CDN serving region-specific certificates rather than an attack.
    return a.issuer_dn == b.issuer_dn and not a.known_root and not b.known_root


async def verify_certificate(session, socks_endpoint, target, first_obs, max_retries=3,
                             timeout=30.0, tracker=None):
    """Re-fetch ``target`` over a fresh circuit with a different exit.

    Issues NEWNYM before every attempt; gives up after ``max_retries``
    attempts that fail or land on the first observation's exit.
    """
    if max_retries < 1:
        raise ValueError("max_retries must be at least 1")
    own = tracker is None
    if own:
        tracker = await StreamTracker(session).start()
    observations = [first_obs]
    exits = [first_obs.exit_fp]
    diagnostics = []
    try:
        for attempt in range(max_retries):
            await session.signal("NEWNYM")
            try:
                obs = await fetch_certificate(tracker, socks_endpoint, target, timeout)
            except FetchFailed as err:
                diagnostics.append("attempt %d: %s" % (attempt + 1, err))
                continue
            if obs.exit_fp is None:
                diagnostics.append("attempt %d: could not tell which exit was used" % (attempt + 1))
                continue
            if obs.exit_fp == first_obs.exit_fp:
                diagnostics.append("attempt %d: landed on the same exit %s" % (attempt + 1, obs.exit_fp))
                continue
            pair = [first_obs, obs]
            if obs.sha1_fp == first_obs.sha1_fp:
                return VerificationOutcome(OutcomeStatus.MATCH, pair, [first_obs.exit_fp, obs.exit_fp],
                                           True, diagnostics=diagnostics)
            log.warning("certificate for %s differs between exits %s and %s", target,
                        first_obs.exit_fp, obs.exit_fp)
            return VerificationOutcome(OutcomeStatus.MISMATCH, pair, [first_obs.exit_fp, obs.exit_fp],
                                       True, _regional(first_obs, obs), diagnostics)
        return VerificationOutcome(OutcomeStatus.INCONCLUSIVE, observations, exits, False,
                                   diagnostics=diagnostics)
    finally:
        if own:
            await tracker.stop()


@dataclass(frozen=True)
class MitmReport:
    exits_used: tuple
    observations: tuple    # leaf certificates, DER
    created_at: str

    def to_dict(self):
        return {"exits_used": list(self.exits_used),
                "observations": [base64.b64encode(der).decode("ascii") for der in self.observations],
                "created_at": self.created_at}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data):
        jsonschema.validate(data, report_schema())
        return cls(tuple(data["exits_used"]),
                   tuple(base64.b64decode(s) for s in data["observations"]), data["created_at"])

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def report_schema():
    return json.loads(resources.files("exitscan").joinpath("schema", "mitm_report.schema.json").read_text())


def build_report(outcome, created_at=None):
    if outcome.status is not OutcomeStatus.MISMATCH:
        raise NotMismatch("only a MISMATCH outcome can be reported, not %s" % outcome.status.value)
    return MitmReport(tuple(outcome.exits_used), tuple(o.leaf_der for o in outcome.observations),
                      created_at or rfc3339())


class FileSink:
    """Appends one JSON document per line."""

    def __init__(self, path=DEFAULT_SINK):
        self.path = os.fspath(path)

    def append(self, line):
        try:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
        except OSError as err:
            raise SinkUnavailable("cannot write report to %s: %s" % (self.path, err)) from err


def submit_report(report, sink=None, consent=False):
    """Append ``report`` to ``sink``; returns the SHA-256 of the stored line."""
    if not consent:
        raise ConsentRequired("submitting a report needs the user's explicit consent")
    line = report.to_json()
    (sink or FileSink()).append(line)
    return hashlib.sha256(line.encode("utf-8")).hexdigest()


__all__ = [
    "ConsentRequired", "FetchFailed", "FileSink", "MitmReport", "NotMismatch", "OutcomeStatus",
    "REPORT_KEYS", "SinkUnavailable", "StreamTracker", "VerificationOutcome", "build_report",
    "fetch_certificate", "parse_path", "report_schema", "submit_report", "verify_certificate",
]
