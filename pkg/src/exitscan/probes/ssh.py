"""SSH probe: fetch the decoy host key through an exit and compare it."""

import asyncio
import logging

from exitscan import sshproto
from exitscan.probes.base import ProbeResult, Verdict

log = logging.getLogger(__name__)


async def probe_ssh(stream, spec, exit_fp=None):
    loop = asyncio.get_running_loop()
    started = loop.time()
    try:
        obs = await sshproto.fetch_host_key(stream.reader, stream.writer)
    except (sshproto.SshError, ConnectionError, asyncio.IncompleteReadError) as err:
        return ProbeResult(exit_fp, "ssh", Verdict.ERROR, duration=loop.time() - started,
                           error="key exchange failed: %s" % err)
    evidence = {"key_type": obs.key_type, "sha256": obs.sha256, "md5": obs.md5,
                "signature_valid": obs.signature_valid, "banner": obs.server_banner}
    matches = sshproto.fingerprint_matches(obs.blob, spec.expectation.value)
    if matches and obs.signature_valid is not False:
        return ProbeResult(exit_fp, "ssh", Verdict.OK, evidence=evidence, duration=loop.time() - started)
    # A genuine key with a bad exchange signature means someone replayed the
    # key without holding it, which is no better than a foreign key.
    log.warning("Possible MitM attack by %s: host key %s", exit_fp, obs.sha256)
    return ProbeResult(exit_fp, "ssh", Verdict.ALERT, evidence=evidence, duration=loop.time() - started)
