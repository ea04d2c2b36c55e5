"""Network consensus parsing and exit selection.

Only the router-status subset of the v3 consensus grammar is understood::

  r <nickname> <identity> <digest> <date> <time> <address> <or-port> <dir-port>
  s <flag> <flag> ...
  w Bandwidth=<kilobytes/s> ...
  p accept|reject <port-list>

Microdescriptor-flavoured ``r`` lines (no digest field) are accepted too.
Every other line is skipped.
"""

import base64
import binascii
import csv
import enum
import ipaddress
import random
import re
from dataclasses import dataclass, field
from importlib import resources

FINGERPRINT_RE = re.compile(r"^[0-9A-F]{40}$")


class MalformedConsensus(ValueError):
    pass


class NoMatch(LookupError):
    pass


@dataclass(frozen=True)
class ExitPolicySummary:
    """The ``p`` line: a port list that is either accepted or rejected."""

    action: str = "reject"
    ports: tuple = ((1, 65535),)

    @classmethod
    def parse(cls, text):
        action, _, spec = text.strip().partition(" ")
        if action not in ("accept", "reject") or not spec:
            raise MalformedConsensus("bad policy summary %r" % text)
        ports = []
        for item in spec.split(","):
            lo, _, hi = item.partition("-")
            try:
                lo, hi = int(lo), int(hi or lo)
            except ValueError:
                raise MalformedConsensus("bad port range %r" % item) from None
            ports.append((lo, hi))
        return cls(action, tuple(ports))

    def allows(self, port):
        listed = any(lo <= port <= hi for lo, hi in self.ports)
        return listed if self.action == "accept" else not listed

    def __str__(self):
        return "%s %s" % (self.action, ",".join(
            str(lo) if lo == hi else "%d-%d" % (lo, hi) for lo, hi in self.ports))


ACCEPT_ALL = ExitPolicySummary("accept", ((1, 65535),))
REJECT_ALL = ExitPolicySummary("reject", ((1, 65535),))


@dataclass(frozen=True)
class RelayDescriptor:
    nickname: str
    fingerprint: str
    address: str
    or_port: int
    flags: frozenset = frozenset()
    bandwidth: int = 0
    exit_policy: ExitPolicySummary = REJECT_ALL
    country: str = None

    def __post_init__(self):
        if not FINGERPRINT_RE.match(self.fingerprint):
            raise ValueError("fingerprint must be 40 upper-case hex digits: %r" % self.fingerprint)
        if self.bandwidth < 0:
            raise ValueError("negative bandwidth")
        object.__setattr__(self, "flags", frozenset(self.flags))

    @property
    def is_exit(self):
        return "Exit" in self.flags

    @property
    def is_bad_exit(self):
        return "BadExit" in self.flags

    def allows_port(self, port):
        return self.exit_policy.allows(port)


def fingerprint_from_identity(identity):
    """Decode the base64 identity digest of an ``r`` line."""
    try:
        raw = base64.b64decode(identity + "=" * (-len(identity) % 4), validate=True)
    except binascii.Error:
        raise MalformedConsensus("identity %r is not base64" % identity) from None
    if len(raw) != 20:
        raise MalformedConsensus("identity %r is not 20 bytes" % identity)
    return raw.hex().upper()


def identity_from_fingerprint(fingerprint):
    return base64.b64encode(bytes.fromhex(fingerprint)).decode("ascii").rstrip("=")


def parse_consensus(document, country_lookup=None):
    """Return one RelayDescriptor per ``r`` line, in document order.

    ``country_lookup`` maps an IPv4 address string to a country code (or
    None); without it every descriptor has ``country=None``.
    """
    relays = []
    current = None

    def finish():
        if current is not None:
            country = country_lookup(current["address"]) if country_lookup else None
            relays.append(RelayDescriptor(country=country, **current))

    for lineno, line in enumerate(document.splitlines(), 1):
        keyword, _, rest = line.strip().partition(" ")
        if keyword == "r":
            finish()
            parts = rest.split()
            if len(parts) == 8:
                nickname, identity, _digest, _date, _time, address, or_port, _ = parts
            elif len(parts) == 7:
                nickname, identity, _date, _time, address, or_port, _ = parts
            else:
                raise MalformedConsensus("line %d: 'r' line has %d fields" % (lineno, len(parts) + 1))
            try:
                ipaddress.IPv4Address(address)
                or_port = int(or_port)
            except ValueError:
                raise MalformedConsensus("line %d: bad address or port" % lineno) from None
            current = {
                "nickname": nickname,
                "fingerprint": fingerprint_from_identity(identity),
                "address": address,
                "or_port": or_port,
            }
        elif current is None:
            continue
        elif keyword == "s":
            current["flags"] = frozenset(rest.split())
        elif keyword == "w":
            for item in rest.split():
                key, _, value = item.partition("=")
                if key == "Bandwidth" and value.isdigit():
                    current["bandwidth"] = int(value) * 1000
        elif keyword == "p":
            try:
                current["exit_policy"] = ExitPolicySummary.parse(rest)
            except MalformedConsensus as err:
                raise MalformedConsensus("line %d: %s" % (lineno, err)) from None
    finish()
    return relays


def format_consensus(relays, published="2013-10-16 12:00:00"):
    """Write relays back out in the grammar :func:`parse_consensus` reads."""
    out = []
    digest = "A" * 27
    for r in relays:
        out.append("r %s %s %s %s %s %d 0" % (r.nickname, identity_from_fingerprint(r.fingerprint),
                                               digest, published, r.address, r.or_port))
        out.append("s " + " ".join(sorted(r.flags)))
        out.append("w Bandwidth=%d" % (r.bandwidth // 1000))
        out.append("p %s" % r.exit_policy)
    return "\n".join(out) + ("\n" if out else "")


class SelectionMode(str, enum.Enum):
    SINGLE = "single"
    COUNTRY = "country"
    ALL = "all"


@dataclass(frozen=True)
class ExitSelection:
    mode: SelectionMode = SelectionMode.ALL
    key: str = None

    def __post_init__(self):
        object.__setattr__(self, "mode", SelectionMode(self.mode))
        if self.mode is SelectionMode.SINGLE:
            key = (self.key or "").lstrip("$").upper()
            if not FINGERPRINT_RE.match(key):
                raise ValueError("single-relay selection needs a 40-digit fingerprint")
            object.__setattr__(self, "key", key)
        elif self.mode is SelectionMode.COUNTRY:
            key = (self.key or "").upper()
            if not re.match(r"^[A-Z]{2}$", key):
                raise ValueError("country selection needs a two-letter code")
            object.__setattr__(self, "key", key)
        elif self.key is not None:
            raise ValueError("'all' selection takes no key")

    def matches(self, relay):
        if self.mode is SelectionMode.SINGLE:
            return relay.fingerprint == self.key
        if self.mode is SelectionMode.COUNTRY:
            return (relay.country or "").upper() == self.key
        return True


def select_exits(relays, sel, seed, include_bad_exits=False):
    """Filter to eligible exits matching ``sel`` and shuffle deterministically."""
    chosen = [r for r in relays
              if r.is_exit and (include_bad_exits or not r.is_bad_exit) and sel.matches(r)]
    if sel.mode is SelectionMode.SINGLE and not chosen:
        raise NoMatch("no eligible exit relay with fingerprint %s" % sel.key)
    random.Random(seed).shuffle(chosen)
    return chosen


@dataclass
class CountryTable:
    """Offline prefix-to-country table; longest prefix wins."""

    networks: list = field(default_factory=list)

    @classmethod
    def load(cls, path=None):
        if path is None:
            text = resources.files("exitscan").joinpath("data", "geoip.csv").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        networks = []
        for row in csv.reader(line for line in text.splitlines()
                              if line.strip() and not line.startswith("#")):
            networks.append((ipaddress.IPv4Network(row[0].strip()), row[1].strip().upper()))
        networks.sort(key=lambda item: item[0].prefixlen, reverse=True)
        return cls(networks)

    def __call__(self, address):
        try:
            ip = ipaddress.IPv4Address(address)
        except ValueError:
            return None
        for network, country in self.networks:
            if ip in network:
                return country
        return None
