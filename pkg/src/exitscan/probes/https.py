"""HTTPS probe: compare the leaf certificate fetched through an exit."""

import asyncio
import collections
import logging

from cryptography import x509

from exitscan import tlsio
from exitscan.probes.base import CertObservation, ProbeResult, Verdict

log = logging.getLogger(__name__)

# Root shared by the Russian MitM relays, recognised by subject and serial.
MAIN_AUTHORITY_DN = ("1.2.840.113549.1.9.1=cert@authority.com,CN=main.authority.com,"
                     "OU=Certificate Management,O=Main Authority,L=Newbury,ST=Nevada,C=US")
MAIN_AUTHORITY_SERIAL = 0xE53A5BE2BD702077

KNOWN_ROOTS = {(MAIN_AUTHORITY_DN, MAIN_AUTHORITY_SERIAL): "main-authority"}


def recognise_root(der_chain):
    """Name of a known malicious root found in (or issuing) the chain."""
    certs = []
    for der in der_chain:
        try:
            certs.append(x509.load_der_x509_certificate(der))
        except ValueError:
            continue
    for cert in certs:
        name = KNOWN_ROOTS.get((cert.subject.rfc4514_string(), cert.serial_number))
        if name:
            return name
    if certs:
        # Root missing from the chain: fall back to the top issuer's DN.
        top = certs[-1].issuer.rfc4514_string()
        for (dn, _serial), name in KNOWN_ROOTS.items():
            if dn == top:
                return name
    return None


def observe(chain, exit_fp=None, target=None):
    return CertObservation(der_chain=chain, exit_fp=exit_fp, target=target,
                           known_root=recognise_root(chain))


async def fetch_chain(stream, server_name, profile="torbrowser"):
    result = await tlsio.client_handshake(stream.reader, stream.writer, server_name,
                                          tlsio.PROFILES[profile])
    return result.chain


async def probe_https(stream, spec, exit_fp=None):
    """Fetch the decoy certificate over ``stream`` and compare its SHA-1."""
    loop = asyncio.get_running_loop()
    started = loop.time()
    target = str(spec.target)
    try:
        chain = await fetch_chain(stream, spec.target.host, spec.profile)
    except (tlsio.HandshakeError, ConnectionError, asyncio.IncompleteReadError) as err:
        return ProbeResult(exit_fp, "https", Verdict.ERROR, duration=loop.time() - started,
                           error="handshake failed: %s" % err)
    obs = observe(chain, exit_fp, target)
    verdict = Verdict.OK if obs.sha1_fp == spec.expectation.value else Verdict.ALERT
    if verdict is Verdict.ALERT:
        log.warning("exit %s: certificate for %s is %s, issued by %s", exit_fp, target,
                    obs.sha1_hex, obs.issuer_dn)
    return ProbeResult(exit_fp, "https", verdict, evidence=obs, duration=loop.time() - started)


def cluster_alerts(results):
    """Group HTTPS alerts by the root that anchored the forged chain.

    Relays whose forged chains end in the same root are likely run by one
    operator.  Returns ``{root label: [exit fingerprints]}``.
    """
    clusters = collections.defaultdict(list)
    for r in results:
        if r.probe != "https" or r.verdict is not Verdict.ALERT:
            continue
        obs = r.evidence
        label = obs.known_root or obs.root_issuer_dn
        if r.exit_fp not in clusters[label]:
            clusters[label].append(r.exit_fp)
    return dict(clusters)
