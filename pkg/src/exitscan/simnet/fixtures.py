"""Ready-made relay populations for the simulator.

``table1_config`` rebuilds a published catalogue of 25 misbehaving exits
and hides them among a benign population of roughly the size of the exit
set at the time.  Only the first 32 bits of each fingerprint were
published; the rest is filled in deterministically.
"""

import hashlib
import random
from dataclasses import dataclass

from exitscan.consensus import ExitPolicySummary, RelayDescriptor
from exitscan.simnet.daemon import SimConfig
from exitscan.simnet.world import OPENDNS_BLOCK_IP, ExitBehavior

# Ports a scanning exit needs; every bad relay accepts these.
SCAN_POLICY = ExitPolicySummary.parse("accept 22,53,80,443")
WEB_ONLY_POLICY = ExitPolicySummary.parse("accept 80,443")
EXIT_FLAGS = frozenset({"Exit", "Fast", "Running", "Valid"})
GUARD_FLAGS = frozenset({"Guard", "Fast", "Running", "Stable", "Valid"})


@dataclass(frozen=True)
class BadRelay:
    prefix: str
    address: str        # representative host inside the published address or netblock
    network: str        # what was published, as a CIDR block
    country: str
    bandwidth_kb: int   # rounded to whole kB/s, the consensus granularity
    attack: str         # label as published
    sampling: float     # None when unknown or not sampled
    first_active: str
    discovered: str
    same_operator: bool

    @property
    def fingerprint(self):
        return expand_prefix(self.prefix)

    @property
    def kinds(self):
        return ATTACK_KINDS[self.attack]


ATTACK_KINDS = {
    "HTTPS MitM": ("cert_mitm",),
    "SSH & HTTPS MitM": ("ssh_mitm", "cert_mitm"),
    "SSH MitM": ("ssh_mitm",),
    "sslstrip": ("sslstrip",),
    "HTML Injection": ("html_inject",),
    "DNS censorship": ("dns_poison",),
    "OpenDNS": ("dns_category_block",),
}

_ROWS = [
    ("F8FD29D0", "176.99.12.246", "176.99.12.246/32", "RU", 7160, "HTTPS MitM", None, "2013-06-24", "2013-07-13", True),
    ("8F9121BF", "64.22.111.169", "64.22.111.168/29", "US", 7160, "HTTPS MitM", None, "2013-06-11", "2013-07-13", True),
    ("93213A1F", "176.99.9.114", "176.99.9.114/32", "RU", 290, "HTTPS MitM", 0.50, "2013-07-23", "2013-09-19", True),
    ("05AD06E2", "92.63.102.68", "92.63.102.68/32", "RU", 5550, "HTTPS MitM", 0.33, "2013-08-01", "2013-09-19", True),
    ("45C55E46", "46.254.19.140", "46.254.19.140/32", "RU", 1540, "SSH & HTTPS MitM", 0.12, "2013-08-09", "2013-09-23", True),
    ("CA1BA219", "176.99.9.111", "176.99.9.111/32", "RU", 334, "HTTPS MitM", 0.375, "2013-09-26", "2013-10-01", True),
    ("1D70CDED", "46.38.50.54", "46.38.50.54/32", "RU", 929, "HTTPS MitM", 0.50, "2013-09-27", "2013-10-14", True),
    ("EE215500", "31.41.45.235", "31.41.45.235/32", "RU", 2960, "HTTPS MitM", 0.50, "2013-09-26", "2013-10-15", True),
    ("12459837", "195.2.252.117", "195.2.252.117/32", "RU", 3450, "HTTPS MitM", 0.269, "2013-09-26", "2013-10-16", True),
    ("B5906553", "83.172.8.4", "83.172.8.4/32", "RU", 851, "HTTPS MitM", 0.68, "2013-08-12", "2013-10-16", True),
    ("EFF1D805", "188.120.228.103", "188.120.228.103/32", "RU", 288, "HTTPS MitM", 0.612, "2013-10-23", "2013-10-23", True),
    ("229C3722", "121.54.175.51", "121.54.175.51/32", "HK", 106, "sslstrip", None, "2013-06-05", "2013-10-31", False),
    ("4E8401D7", "176.99.11.182", "176.99.11.182/32", "RU", 1540, "HTTPS MitM", 0.796, "2013-11-08", "2013-11-09", True),
    ("27FB6BB0", "195.2.253.159", "195.2.253.159/32", "RU", 721, "HTTPS MitM", 0.438, "2013-11-08", "2013-11-09", True),
    ("0ABB31BD", "195.88.208.137", "195.88.208.137/32", "RU", 2300, "SSH & HTTPS MitM", 0.857, "2013-10-31", "2013-11-21", True),
    ("CADA00B9", "5.63.154.230", "5.63.154.230/32", "RU", 188, "HTTPS MitM", None, "2013-11-26", "2013-11-26", True),
    ("C1C0EDAD", "93.170.130.194", "93.170.130.194/32", "RU", 839, "HTTPS MitM", None, "2013-11-26", "2013-11-27", True),
    ("5A2A51D4", "111.248.100.23", "111.240.0.0/12", "TW", 193, "HTML Injection", None, "2013-11-23", "2013-11-27", False),
    ("EBF7172E", "37.143.11.220", "37.143.11.220/32", "RU", 4340, "SSH MitM", None, "2013-11-15", "2013-11-27", True),
    ("68E682DF", "46.17.46.108", "46.17.46.108/32", "RU", 60, "SSH & HTTPS MitM", None, "2013-12-02", "2013-12-02", True),
    ("533FDE2F", "62.109.22.20", "62.109.22.20/32", "RU", 896, "SSH & HTTPS MitM", 0.421, "2013-12-06", "2013-12-08", True),
    ("E455A115", "89.128.56.73", "89.128.56.73/32", "ES", 54, "sslstrip", None, "2013-12-17", "2013-12-18", False),
    ("02013F48", "117.18.118.136", "117.18.118.136/32", "HK", 538, "DNS censorship", None, "2013-12-22", "2014-01-01", False),
    ("2F5B07B2", "178.211.39.10", "178.211.39.0/24", "TR", 205, "DNS censorship", None, "2013-12-28", "2014-01-06", False),
    ("4E2692FE", "24.84.118.132", "24.84.118.132/32", "CA", 52, "OpenDNS", None, "2013-12-21", "2014-01-06", False),
]

TABLE1 = tuple(BadRelay(*row) for row in _ROWS)

# Countries of the benign population, roughly following the exit-relay
# distribution of the time.  Each gets a /16 inside 100.64.0.0/10.
BENIGN_COUNTRIES = ("DE", "US", "FR", "NL", "RU", "SE", "GB", "CA", "RO", "CH",
                    "UA", "CZ", "AT", "PL", "JP", "LU")
BENIGN_WEIGHTS = (22, 20, 10, 9, 6, 5, 5, 3, 3, 3, 2, 2, 2, 2, 1, 1)


def expand_prefix(prefix):
    """Deterministic 40-hex fingerprint starting with ``prefix``."""
    prefix = prefix.upper()
    return (prefix + hashlib.sha1(prefix.encode()).hexdigest().upper())[:40]


def benign_network(country):
    i = BENIGN_COUNTRIES.index(country)
    return "100.%d.0.0/16" % (64 + i)


def behaviors_for(row, force_sampling=None):
    """ExitBehavior list for one catalogued relay."""
    fp = row.fingerprint
    rate = force_sampling if force_sampling is not None else (row.sampling or 1.0)
    out = []
    for kind in row.kinds:
        payload = None
        if row.prefix == "2F5B07B2":
            # Turkish relay: hijacked resolution rather than a foreign sinkhole.
            kind, payload = "dns_category_block", {"categories": ["pornography", "activism"],
                                                   "block_ip": "192.0.2.80"}
        elif kind == "dns_category_block":
            payload = {"categories": ["pornography", "social"], "block_ip": OPENDNS_BLOCK_IP}
        # Only HTTPS interception was observed to be sampled.
        kind_rate = rate if kind == "cert_mitm" else (force_sampling if force_sampling is not None else 1.0)
        out.append(ExitBehavior(fp, kind, kind_rate, payload=payload))
    return out


def _benign_relays(count, rng, start=0):
    relays = []
    per_country = {}
    for i in range(count):
        cc = rng.choices(BENIGN_COUNTRIES, BENIGN_WEIGHTS)[0]
        n = per_country.get(cc, 0)
        per_country[cc] = n + 1
        address = "100.%d.%d.%d" % (64 + BENIGN_COUNTRIES.index(cc), n // 250, n % 250 + 1)
        fp = hashlib.sha1(b"benign-%d" % (start + i)).hexdigest().upper()
        policy = WEB_ONLY_POLICY if rng.random() < 0.1 else SCAN_POLICY
        bandwidth = int(rng.lognormvariate(6.0, 1.2)) * 1000 + 1000
        relays.append(RelayDescriptor("benign%d" % (start + i), fp, address, 9001, EXIT_FLAGS,
                                      bandwidth, policy, cc))
    return relays


def guard_relays(count=3):
    return [RelayDescriptor("guard%d" % i, hashlib.sha1(b"guard-%d" % i).hexdigest().upper(),
                            "100.127.0.%d" % (i + 1), 443, GUARD_FLAGS, 5_000_000, country=None)
            for i in range(count)]


def table1_relays(benign=925, seed=2013, bad_exit_flagged=5):
    """Guards, the 25 catalogued relays, and a benign exit population.

    ``bad_exit_flagged`` benign relays carry the BadExit flag, as the
    directory authorities would have done after an earlier report.
    """
    rng = random.Random(seed)
    relays = guard_relays()
    for row in TABLE1:
        relays.append(RelayDescriptor("bad" + row.prefix.lower(), row.fingerprint, row.address, 9001,
                                      EXIT_FLAGS, row.bandwidth_kb * 1000, SCAN_POLICY, row.country))
    benign = _benign_relays(benign, rng)
    for i in range(min(bad_exit_flagged, len(benign))):
        r = benign[i]
        benign[i] = RelayDescriptor(r.nickname, r.fingerprint, r.address, r.or_port,
                                    r.flags | {"BadExit"}, r.bandwidth, r.exit_policy, r.country)
    return relays + benign


def table1_config(seed=0, force_sampling=None, benign=925, population_seed=2013, **kwargs):
    """SimConfig with the catalogued relays hidden among ``benign`` others."""
    behaviors = {row.fingerprint: behaviors_for(row, force_sampling) for row in TABLE1}
    cfg = SimConfig(table1_relays(benign, population_seed), behaviors, rng_seed=seed, **kwargs)
    return cfg.validate()


def bad_fingerprints(config):
    """Fingerprints carrying at least one non-benign behavior."""
    return {fp for fp, items in config.behaviors.items()
            if any(b.kind.value != "benign" for b in items)}


def first_hops(config):
    return [r.fingerprint for r in config.relays if "Guard" in r.flags]


def small_config(n_exits=10, bad=None, seed=0, **kwargs):
    """A guard plus ``n_exits`` exits.

    ``bad`` maps an exit index to a behavior kind, a list of kinds, or a
    list of ``ExitBehavior``-style dicts without ``exit_fp``.
    """
    relays = guard_relays(1)
    for i in range(n_exits):
        fp = hashlib.sha1(b"exit-%d" % i).hexdigest().upper()
        relays.append(RelayDescriptor("exit%d" % i, fp, "100.64.9.%d" % (i % 250 + 1), 9001, EXIT_FLAGS,
                                      1_000_000, SCAN_POLICY, "DE"))
    behaviors = {}
    for index, spec in (bad or {}).items():
        fp = relays[1 + index].fingerprint
        items = spec if isinstance(spec, (list, tuple)) else [spec]
        out = []
        for item in items:
            if isinstance(item, ExitBehavior):
                out.append(item)
            elif isinstance(item, dict):
                out.append(ExitBehavior(fp, **item))
            else:
                out.append(ExitBehavior(fp, item))
        behaviors[fp] = out
    return SimConfig(relays, behaviors, rng_seed=seed, **kwargs).validate()


def exits_of(config):
    return [r for r in config.relays if r.is_exit]


def geoip_rows():
    """Rows for the bundled offline country table."""
    rows = [(row.network, row.country) for row in TABLE1]
    rows += [(benign_network(cc), cc) for cc in BENIGN_COUNTRIES]
    return rows
