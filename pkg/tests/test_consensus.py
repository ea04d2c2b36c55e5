import base64
import collections
import hashlib
import math

import pytest
from hypothesis import given, settings, strategies as st

from exitscan.consensus import (CountryTable, ExitPolicySummary, ExitSelection, MalformedConsensus, NoMatch,
                                RelayDescriptor, format_consensus, parse_consensus, select_exits)
from exitscan.simnet.fixtures import EXIT_FLAGS, TABLE1, table1_relays

THREE = """\
network-status-version 3
vote-status consensus
r alpha AAECAwQFBgcICQoLDA0ODxAREhM dGVzdGRpZ2VzdHRlc3RkaWdlc3Q 2013-10-16 12:00:00 10.0.0.1 9001 0
s Exit Fast Running Valid
w Bandwidth=100
p accept 80,443
r beta FBUWFxgZGhscHR4fICEiIyQlJic dGVzdGRpZ2VzdHRlc3RkaWdlc3Q 2013-10-16 12:00:00 10.0.0.2 443 9030
s BadExit Exit Running Valid
w Bandwidth=50 Unmeasured=1
p reject 25,119,135-139
r gamma KCkqKywtLi8wMTIzNDU2Nzg5Ojs dGVzdGRpZ2VzdHRlc3RkaWdlc3Q 2013-10-16 12:00:00 10.0.0.3 9001 0
s Fast Guard Running Stable Valid
w Bandwidth=5000
p reject 1-65535
directory-footer
"""


def test_three_relays_one_bad_exit():
    relays = parse_consensus(THREE)
    assert [r.nickname for r in relays] == ["alpha", "beta", "gamma"]
    assert [r.is_bad_exit for r in relays] == [False, True, False]
    # Identity is base64 of the raw 20 bytes; check against the stdlib decoder.
    assert relays[0].fingerprint == bytes(range(20)).hex().upper()
    assert relays[1].fingerprint == bytes(range(20, 40)).hex().upper()
    assert relays[1].bandwidth == 50_000
    assert relays[1].allows_port(443) and not relays[1].allows_port(137)
    assert relays[0].allows_port(443) and not relays[0].allows_port(22)
    assert not relays[2].is_exit


def test_empty_document():
    assert parse_consensus("") == []
    assert parse_consensus("network-status-version 3\n") == []


def test_table1_row_f8fd29d0():
    doc = format_consensus(table1_relays(benign=0))
    (row,) = [r for r in parse_consensus(doc) if r.fingerprint.startswith("F8FD29D0")]
    assert row.address == "176.99.12.246"
    # 7.16 MB/s, as kilobytes in the w line.
    assert row.bandwidth == 7_160_000
    assert row.is_exit and not row.is_bad_exit


def test_r_line_with_wrong_field_count():
    with pytest.raises(MalformedConsensus, match="line 2"):
        parse_consensus("s Exit\nr short AAECAwQFBgcICQoLDA0ODxAREhM 10.0.0.1\n")


def test_bad_identity_and_address():
    with pytest.raises(MalformedConsensus):
        parse_consensus("r x !!!notbase64!!! d 2013-10-16 12:00:00 10.0.0.1 9001 0\n")
    with pytest.raises(MalformedConsensus):
        parse_consensus("r x AAECAwQFBgcICQoLDA0ODxAREhM d 2013-10-16 12:00:00 10.0.0.999 9001 0\n")


def test_microdescriptor_r_line():
    (relay,) = parse_consensus("r m AAECAwQFBgcICQoLDA0ODxAREhM 2013-10-16 12:00:00 10.0.0.9 9001 0\ns Exit\n")
    assert relay.address == "10.0.0.9" and relay.is_exit


def test_unknown_lines_are_skipped_and_nothing_dropped():
    noisy = THREE.replace("s Exit Fast", "v Tor 0.2.4.20\nm 8,9 sha256=abc\ns Exit Fast")
    assert parse_consensus(noisy) == parse_consensus(THREE)


def test_descriptor_invariants():
    with pytest.raises(ValueError):
        RelayDescriptor("x", "abc", "10.0.0.1", 1)
    with pytest.raises(ValueError):
        RelayDescriptor("x", "A" * 40, "10.0.0.1", 1, bandwidth=-1)


def test_selection_invariants():
    with pytest.raises(ValueError):
        ExitSelection("single", "F8FD29D0")
    with pytest.raises(ValueError):
        ExitSelection("country", "RUS")
    with pytest.raises(ValueError):
        ExitSelection("all", "RU")
    assert ExitSelection("single", "$" + "a" * 40).key == "A" * 40
    assert ExitSelection("country", "ru").key == "RU"


def _exits(n, **kw):
    return [RelayDescriptor("e%d" % i, hashlib.sha1(b"%d" % i).hexdigest().upper(), "10.1.0.%d" % (i + 1),
                            9001, EXIT_FLAGS, 1000, **kw) for i in range(n)]


def test_all_mode_seeds_give_same_set_different_order():
    relays = _exits(10)
    a = select_exits(relays, ExitSelection(), seed=1)
    b = select_exits(relays, ExitSelection(), seed=2)
    assert set(a) == set(b) == set(relays)
    assert a != b
    assert a == select_exits(relays, ExitSelection(), seed=1)


def test_country_mode_and_bad_exit_exclusion():
    relays = table1_relays(benign=200)
    lookup = CountryTable.load()
    parsed = parse_consensus(format_consensus(relays), lookup)
    ru = select_exits(parsed, ExitSelection("country", "RU"), seed=0)
    assert ru and all(r.country == "RU" for r in ru)
    assert all(not r.is_bad_exit and r.is_exit for r in ru)
    flagged = [r for r in parsed if r.is_bad_exit]
    assert flagged
    with_bad = select_exits(parsed, ExitSelection(), seed=0, include_bad_exits=True)
    assert set(flagged) <= set(with_bad)


def test_single_mode():
    relays = _exits(3)
    assert select_exits(relays, ExitSelection("single", relays[1].fingerprint), 0) == [relays[1]]
    with pytest.raises(NoMatch):
        select_exits(relays, ExitSelection("single", "F" * 40), 0)
    bad = RelayDescriptor("b", "B" * 40, "10.0.0.1", 1, EXIT_FLAGS | {"BadExit"})
    with pytest.raises(NoMatch):
        select_exits([bad], ExitSelection("single", "B" * 40), 0)


@given(st.integers(0, 40), st.integers(), st.sets(st.integers(0, 39)))
def test_selection_is_permutation_of_filter(n, seed, bad_idx):
    relays = [RelayDescriptor(r.nickname, r.fingerprint, r.address, r.or_port,
                              r.flags | ({"BadExit"} if i in bad_idx else set()), r.bandwidth)
              for i, r in enumerate(_exits(n))]
    relays.append(RelayDescriptor("guard", "C" * 40, "10.9.9.9", 443, {"Guard"}))
    chosen = select_exits(relays, ExitSelection(), seed)
    expected = [r for r in relays if r.is_exit and not r.is_bad_exit]
    assert len(chosen) == len(expected) and set(chosen) == set(expected)


def test_permutation_uniformity():
    n, trials = 8, 4000
    relays = _exits(n)
    first = collections.Counter(select_exits(relays, ExitSelection(), seed)[0].fingerprint
                                for seed in range(trials))
    assert len(first) == n
    for count in first.values():
        assert abs(count / trials - 1 / n) <= 5 / math.sqrt(trials)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.binary(min_size=20, max_size=20),
                          st.sets(st.sampled_from(["Exit", "BadExit", "Guard", "Valid", "Fast"])),
                          st.integers(0, 10**6), st.sets(st.integers(1, 65535), min_size=1, max_size=5),
                          st.booleans()),
                max_size=8))
def test_format_parse_roundtrip(rows):
    relays = [RelayDescriptor("n%d" % i, ident.hex().upper(), "10.2.0.%d" % (i + 1), 9001, flags,
                              bw * 1000, ExitPolicySummary("accept" if acc else "reject",
                                                           tuple((p, p) for p in sorted(ports))))
              for i, (ident, flags, bw, ports, acc) in enumerate(rows)]
    assert parse_consensus(format_consensus(relays)) == relays


def test_identity_encoding_matches_stdlib():
    relays = table1_relays(benign=5)
    for line in format_consensus(relays).splitlines():
        if line.startswith("r "):
            ident = line.split()[2]
            fp = base64.b64decode(ident + "=").hex().upper()
            assert any(r.fingerprint == fp for r in relays)


def test_country_table_longest_prefix(tmp_path):
    path = tmp_path / "geo.csv"
    path.write_text("# test\n10.0.0.0/8,US\n10.1.0.0/16,de\n")
    table = CountryTable.load(path)
    assert table("10.1.2.3") == "DE"
    assert table("10.2.0.1") == "US"
    assert table("192.0.2.1") is None
    assert table("not-an-ip") is None


def test_bundled_country_table_covers_table1():
    table = CountryTable.load()
    for row in TABLE1:
        assert table(row.address) == row.country, row.prefix
