"""Types shared by every probe module."""

import base64
import binascii
import datetime
import enum
import hashlib
import ipaddress
import re
from dataclasses import dataclass, field

from cryptography import x509

from exitscan.socksio import SocksTarget, is_domain


class ProbeName(str, enum.Enum):
    HTTPS = "https"
    SSLSTRIP = "sslstrip"
    SSH = "ssh"
    DNS = "dns"


class Verdict(str, enum.Enum):
    OK = "OK"
    ALERT = "ALERT"
    ERROR = "ERROR"


def utc_now():
    return datetime.datetime.now(datetime.timezone.utc)


def rfc3339(when=None):
    when = when or utc_now()
    return when.astimezone(datetime.timezone.utc).isoformat(timespec="milliseconds").replace("+00:00", "Z")


_SHA256_FP = re.compile(r"^SHA256:[A-Za-z0-9+/]{43}=?$")
_MD5_FP = re.compile(r"^(MD5:)?([0-9a-fA-F]{2}:){15}[0-9a-fA-F]{2}$")

EVIDENCE_KINDS = ("cert_sha1", "ssh_key_fp", "https_links", "dns_map")


def parse_sha1(value):
    """Accept 20 raw bytes or 40 hex digits (colons allowed)."""
    if isinstance(value, (bytes, bytearray)):
        raw = bytes(value)
    else:
        try:
            raw = binascii.unhexlify(str(value).replace(":", "").strip())
        except binascii.Error:
            raise ValueError("%r is not a hex digest" % value) from None
    if len(raw) != 20:
        raise ValueError("SHA-1 digest must be 20 bytes, got %d" % len(raw))
    return raw


@dataclass(frozen=True)
class ExpectedEvidence:
    """What a probe should observe on an honest path."""

    kind: str
    value: object

    def __post_init__(self):
        if self.kind not in EVIDENCE_KINDS:
            raise ValueError("unknown evidence kind %r" % self.kind)
        value = self.value
        if self.kind == "cert_sha1":
            value = parse_sha1(value)
        elif self.kind == "ssh_key_fp":
            value = str(value).strip()
            if not (_SHA256_FP.match(value) or _MD5_FP.match(value)):
                raise ValueError("%r is neither a SHA256: nor an MD5 host key fingerprint" % value)
        elif self.kind == "https_links":
            value = frozenset(value)
            if not value:
                raise ValueError("https_links expectation is empty")
            for link in value:
                if not link.startswith("https://"):
                    raise ValueError("expected link %r is not an https:// URL" % link)
        else:
            mapping = {}
            for domain, addresses in dict(value).items():
                if not is_domain(domain):
                    raise ValueError("%r is not a domain name" % domain)
                addrs = frozenset(str(ipaddress.IPv4Address(a)) for a in addresses)
                if not addrs:
                    raise ValueError("no expected addresses for %s" % domain)
                mapping[domain.lower()] = addrs
            if not mapping:
                raise ValueError("dns_map expectation is empty")
            value = mapping
        object.__setattr__(self, "value", value)

    def to_json(self):
        if self.kind == "cert_sha1":
            return self.value.hex()
        if self.kind == "https_links":
            return sorted(self.value)
        if self.kind == "dns_map":
            return {d: sorted(a) for d, a in sorted(self.value.items())}
        return self.value


_EXPECTATION_FOR = {
    ProbeName.HTTPS: "cert_sha1",
    ProbeName.SSH: "ssh_key_fp",
    ProbeName.SSLSTRIP: "https_links",
    ProbeName.DNS: "dns_map",
}

# Destination port each stream probe needs; the DNS probe only resolves.
PROBE_PORTS = {ProbeName.HTTPS: 443, ProbeName.SSLSTRIP: 80, ProbeName.SSH: 22}


@dataclass(frozen=True)
class ProbeSpec:
    name: ProbeName
    target: object
    expectation: ExpectedEvidence
    path: str = "/"
    profile: str = "torbrowser"

    def __post_init__(self):
        object.__setattr__(self, "name", ProbeName(self.name))
        if self.expectation.kind != _EXPECTATION_FOR[self.name]:
            raise ValueError("%s probe needs a %s expectation, not %s"
                             % (self.name.value, _EXPECTATION_FOR[self.name], self.expectation.kind))
        if self.name is ProbeName.DNS:
            object.__setattr__(self, "target", tuple(sorted(self.expectation.value)))
        elif not isinstance(self.target, SocksTarget):
            object.__setattr__(self, "target", SocksTarget.parse(str(self.target)))

    @property
    def port(self):
        """Destination port, or None for probes that open no stream."""
        return None if self.name is ProbeName.DNS else self.target.port


@dataclass
class CertObservation:
    """A certificate chain as fetched through one exit."""

    der_chain: tuple
    sha1_fp: bytes = None
    issuer_dn: str = None
    subject_dn: str = None
    chain_len: int = None
    exit_fp: str = None
    target: str = None
    known_root: str = None

    def __post_init__(self):
        self.der_chain = tuple(bytes(c) for c in self.der_chain)
        if not self.der_chain:
            raise ValueError("a certificate observation needs at least one certificate")
        digest = hashlib.sha1(self.der_chain[0]).digest()
        if self.sha1_fp is None:
            self.sha1_fp = digest
        elif parse_sha1(self.sha1_fp) != digest:
            raise ValueError("sha1_fp does not match the leaf certificate")
        else:
            self.sha1_fp = parse_sha1(self.sha1_fp)
        if self.issuer_dn is None or self.subject_dn is None:
            leaf = x509.load_der_x509_certificate(self.der_chain[0])
            self.issuer_dn = leaf.issuer.rfc4514_string()
            self.subject_dn = leaf.subject.rfc4514_string()
        self.chain_len = len(self.der_chain)

    @property
    def leaf_der(self):
        return self.der_chain[0]

    @property
    def der_bytes(self):
        return b"".join(self.der_chain)

    @property
    def sha1_hex(self):
        return self.sha1_fp.hex()

    @property
    def root_issuer_dn(self):
        last = x509.load_der_x509_certificate(self.der_chain[-1])
        return last.issuer.rfc4514_string()

    def to_dict(self):
        return {
            "der_chain": [base64.b64encode(c).decode("ascii") for c in self.der_chain],
            "sha1_fp": self.sha1_hex,
            "issuer_dn": self.issuer_dn,
            "subject_dn": self.subject_dn,
            "chain_len": self.chain_len,
            "exit_fp": self.exit_fp,
            "target": self.target,
            "known_root": self.known_root,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(der_chain=[base64.b64decode(c) for c in data["der_chain"]],
                   sha1_fp=data.get("sha1_fp"), issuer_dn=data.get("issuer_dn"),
                   subject_dn=data.get("subject_dn"), exit_fp=data.get("exit_fp"),
                   target=data.get("target"), known_root=data.get("known_root"))


def _evidence_to_json(evidence):
    if isinstance(evidence, CertObservation):
        return {"type": "certificate", **evidence.to_dict()}
    return evidence


def _evidence_from_json(data):
    if isinstance(data, dict) and data.get("type") == "certificate":
        return CertObservation.from_dict(data)
    return data


@dataclass
class ProbeResult:
    exit_fp: str
    probe: str
    verdict: Verdict
    evidence: object = None
    duration: float = 0.0
    timestamp: str = field(default_factory=rfc3339)
    error: str = None

    def __post_init__(self):
        self.verdict = Verdict(self.verdict)
        self.probe = ProbeName(self.probe).value if self.probe in ProbeName._value2member_map_ else self.probe
        if self.verdict is Verdict.ALERT and self.evidence is None:
            raise ValueError("an ALERT must carry evidence")
        if self.duration < 0:
            raise ValueError("negative duration")

    def to_dict(self):
        return {
            "exit_fp": self.exit_fp,
            "probe": self.probe,
            "verdict": self.verdict.value,
            "evidence": _evidence_to_json(self.evidence),
            "duration": self.duration,
            "timestamp": self.timestamp,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(exit_fp=data["exit_fp"], probe=data["probe"], verdict=data["verdict"],
                   evidence=_evidence_from_json(data.get("evidence")),
                   duration=data.get("duration", 0.0), timestamp=data.get("timestamp"),
                   error=data.get("error"))


class ProbeError(Exception):
    """A probe could not reach a verdict (network trouble, protocol error)."""
