"""DNS probe: have the exit resolve whitelisted names and check the answers."""

import asyncio

from exitscan.probes.base import ProbeResult, Verdict
from exitscan.socksio import SocksError


async def probe_dns(ctx, spec, exit_fp=None, timeout=10.0):
    """Resolve every domain of ``spec`` through ``ctx.resolve``.

    An answer is fine when it is a member of the expected address set;
    load-balanced names legitimately return a subset.
    """
    loop = asyncio.get_running_loop()
    started = loop.time()
    expected = spec.expectation.value
    answers, failed, unexpected = {}, {}, {}
    for domain in sorted(expected):
        try:
            got = await ctx.resolve(domain, timeout)
        except (SocksError, ConnectionError, asyncio.TimeoutError) as err:
            failed[domain] = str(err) or type(err).__name__
            continue
        answers[domain] = sorted(got)
        outside = sorted(set(got) - expected[domain])
        if outside:
            unexpected[domain] = outside
    evidence = {"answers": answers, "unexpected": unexpected, "failed": failed}
    duration = loop.time() - started
    if not answers:
        return ProbeResult(exit_fp, "dns", Verdict.ERROR, evidence=evidence, duration=duration,
                           error="every resolution failed")
    verdict = Verdict.ALERT if unexpected else Verdict.OK
    return ProbeResult(exit_fp, "dns", verdict, evidence=evidence, duration=duration)
