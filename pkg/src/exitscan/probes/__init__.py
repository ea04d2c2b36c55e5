"""Probe modules and the glue that runs one against a circuit."""

import asyncio
import json
import logging
from importlib import resources

import jsonschema

from exitscan.probes.base import (CertObservation, ExpectedEvidence, PROBE_PORTS, ProbeError,
                                  ProbeName, ProbeResult, ProbeSpec, Verdict, rfc3339)
from exitscan.probes.dns import probe_dns
from exitscan.probes.https import cluster_alerts, probe_https
from exitscan.probes.sampling import (NoValidTrials, SamplingEstimate, detect_destination_targeting,
                                      estimate_sampling, estimate_targeting)
from exitscan.probes.ssh import probe_ssh
from exitscan.probes.sslstrip import probe_sslstrip
from exitscan.socksio import SocksError

log = logging.getLogger(__name__)

STREAM_PROBES = {
    ProbeName.HTTPS: probe_https,
    ProbeName.SSLSTRIP: probe_sslstrip,
    ProbeName.SSH: probe_ssh,
}


async def run_probe(ctx, spec, stream_timeout=30.0):
    """Run ``spec`` over the circuit behind ``ctx``.

    ``ctx`` offers ``exit_fp``, ``open_stream(target, timeout)`` and
    ``resolve(name, timeout)``.  Failures to get a stream become ERROR.
    """
    loop = asyncio.get_running_loop()
    started = loop.time()
    if spec.name is ProbeName.DNS:
        return await probe_dns(ctx, spec, ctx.exit_fp, timeout=stream_timeout)
    try:
        stream = await ctx.open_stream(spec.target, stream_timeout)
    except (SocksError, ConnectionError, asyncio.TimeoutError, ProbeError) as err:
        return ProbeResult(ctx.exit_fp, spec.name.value, Verdict.ERROR,
                           duration=loop.time() - started,
                           error="%s: %s" % (type(err).__name__, err))
    try:
        result = await STREAM_PROBES[spec.name](stream, spec, ctx.exit_fp)
    finally:
        stream.close()
    result.duration = loop.time() - started
    return result


class DecoyConfigError(ValueError):
    pass


def _schema(name):
    return json.loads(resources.files("exitscan").joinpath("schema", name).read_text())


def load_decoys(source=None):
    """Read decoy expectations (a path, a dict, or None for the bundled file)."""
    if source is None:
        data = json.loads(resources.files("exitscan").joinpath("data", "decoys.json").read_text())
    elif isinstance(source, dict):
        data = source
    else:
        with open(source) as fh:
            data = json.load(fh)
    try:
        jsonschema.validate(data, _schema("decoys.schema.json"))
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise DecoyConfigError("decoy config at %s: %s" % (where, err.message)) from None
    return data


def specs_from_decoys(decoys):
    """One ProbeSpec per probe name defined in the decoy config."""
    specs = {}
    if "https" in decoys:
        d = decoys["https"]
        specs["https"] = ProbeSpec("https", d["target"], ExpectedEvidence("cert_sha1", d["cert_sha1"]),
                                   profile=d.get("profile", "torbrowser"))
    if "sslstrip" in decoys:
        d = decoys["sslstrip"]
        specs["sslstrip"] = ProbeSpec("sslstrip", d["target"],
                                      ExpectedEvidence("https_links", d["https_links"]),
                                      path=d.get("path", "/"))
    if "ssh" in decoys:
        d = decoys["ssh"]
        specs["ssh"] = ProbeSpec("ssh", d["target"], ExpectedEvidence("ssh_key_fp", d["ssh_key_fp"]))
    if "dns" in decoys:
        specs["dns"] = ProbeSpec("dns", None, ExpectedEvidence("dns_map", decoys["dns"]["dns_map"]))
    return specs


def https_spec_for(decoys, target):
    """HTTPS spec for one of the config's ``https_targets``."""
    fp = decoys.get("https_targets", {}).get(str(target))
    if fp is None:
        raise DecoyConfigError("no expected certificate for %s" % target)
    return ProbeSpec("https", str(target), ExpectedEvidence("cert_sha1", fp))


__all__ = [
    "CertObservation", "ExpectedEvidence", "NoValidTrials", "PROBE_PORTS", "ProbeError",
    "ProbeName", "ProbeResult", "ProbeSpec", "SamplingEstimate", "Verdict", "cluster_alerts",
    "detect_destination_targeting", "estimate_sampling", "estimate_targeting", "load_decoys",
    "probe_dns", "probe_https", "probe_ssh", "probe_sslstrip", "rfc3339", "run_probe",
    "specs_from_decoys", "https_spec_for",
]
