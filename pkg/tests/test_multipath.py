import base64
import hashlib
import json

import jsonschema
import pytest
from cryptography.hazmat.primitives import serialization
from hypothesis import given, settings, strategies as st

from exitscan import ctlproto
from exitscan.multipath import (REPORT_KEYS, _regional, ConsentRequired, FileSink, MitmReport, NotMismatch, OutcomeStatus,
                                SinkUnavailable, StreamTracker, VerificationOutcome, build_report,
                                fetch_certificate, parse_path, report_schema, submit_report, verify_certificate)
from exitscan.probes.base import CertObservation
from exitscan.simnet import ClientPolicy, start_sim
from exitscan.simnet.certs import attacker_leaf, decoy_leaf, main_authority_root
from exitscan.simnet.fixtures import exits_of, small_config

from conftest import virtual


def client_config(choice, order, bad=None, n=4):
    cfg = small_config(n, bad=bad)
    fps = [r.fingerprint for r in exits_of(cfg)]
    cfg.client = ClientPolicy(choice, tuple(fps[i] for i in order))
    return cfg, fps


async def first_and_verify(cfg, target, max_retries=3):
    control, socks, insp = start_sim(cfg)
    session = await ctlproto.open_session(control)
    async with StreamTracker(session) as tracker:
        first = await fetch_certificate(tracker, socks, target)
        outcome = await verify_certificate(session, socks, target, first, max_retries, tracker=tracker)
    await session.close()
    return first, outcome, insp


@virtual
async def test_selfsigned_is_match():
    cfg, fps = client_config("sequence", [0, 1])
    first, outcome, insp = await first_and_verify(cfg, "selfsigned.decoy:443")
    assert first.exit_fp == fps[0]
    assert outcome.status is OutcomeStatus.MATCH
    assert outcome.exits_used == [fps[0], fps[1]] and outcome.distinct_exit
    assert outcome.observations[0].sha1_fp == outcome.observations[1].sha1_fp
    with pytest.raises(NotMismatch):
        build_report(outcome)


@virtual
async def test_attacked_then_clean_is_mismatch():
    cfg, fps = client_config("sequence", [0, 1], bad={0: "cert_mitm"})
    first, outcome, _ = await first_and_verify(cfg, "secure.decoy:443")
    assert "Main Authority" in first.issuer_dn
    assert outcome.status is OutcomeStatus.MISMATCH
    assert outcome.exits_used == [fps[0], fps[1]]
    a, b = outcome.observations
    assert a.known_root == "main-authority" and b.known_root is None
    assert not outcome.possible_regional
    report = build_report(outcome)
    assert report.exits_used == (fps[0], fps[1])
    assert report.observations == (a.leaf_der, b.leaf_der)


@virtual
async def test_pinned_exit_is_inconclusive():
    cfg, fps = client_config("pinned", [2])
    first, outcome, insp = await first_and_verify(cfg, "secure.decoy:443", max_retries=3)
    assert outcome.status is OutcomeStatus.INCONCLUSIVE
    assert not outcome.distinct_exit
    assert len(outcome.diagnostics) == 3
    assert all("same exit" in d for d in outcome.diagnostics)
    newnyms = [c for c in insp.commands if c.endswith("SIGNAL NEWNYM")]
    assert len(newnyms) == 3


@virtual
async def test_same_exit_then_distinct():
    cfg, fps = client_config("sequence", [0, 0, 0, 1])
    _, outcome, insp = await first_and_verify(cfg, "secure.decoy:443", max_retries=5)
    assert outcome.status is OutcomeStatus.MATCH
    assert outcome.exits_used == [fps[0], fps[1]]
    assert len(outcome.diagnostics) == 2


@virtual
async def test_failed_fetches_fold_into_inconclusive():
    cfg, fps = client_config("sequence", [0, 1, 2])
    control, socks, _ = start_sim(cfg)
    session = await ctlproto.open_session(control)
    async with StreamTracker(session) as tracker:
        first = await fetch_certificate(tracker, socks, "secure.decoy:443")
        outcome = await verify_certificate(session, socks, "nosuch.decoy:443", first, 2, timeout=5,
                                           tracker=tracker)
    await session.close()
    assert outcome.status is OutcomeStatus.INCONCLUSIVE
    assert len(outcome.diagnostics) == 2 and all("attempt" in d for d in outcome.diagnostics)


@virtual
async def test_max_retries_precondition():
    cfg, _ = client_config("pinned", [0])
    control, socks, _ = start_sim(cfg)
    session = await ctlproto.open_session(control)
    obs = CertObservation([decoy_leaf("secure.decoy").public_bytes(serialization.Encoding.DER)])
    with pytest.raises(ValueError):
        await verify_certificate(session, socks, "secure.decoy:443", obs, 0)
    await session.close()


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=6), st.integers(1, 4),
       st.sets(st.integers(0, 3), max_size=2))
def test_conclusive_outcomes_use_distinct_exits(order, retries, bad):
    cfg, fps = client_config("sequence", order, bad={i: "cert_mitm" for i in bad})

    @virtual
    async def run():
        return await first_and_verify(cfg, "secure.decoy:443", retries)
    first, outcome, _ = run()
    if outcome.status is not OutcomeStatus.INCONCLUSIVE:
        assert outcome.distinct_exit and len(set(outcome.exits_used)) == 2
        differ = outcome.observations[0].sha1_fp != outcome.observations[1].sha1_fp
        assert differ == (outcome.status is OutcomeStatus.MISMATCH)
        # A mismatch needs exactly one of the two exits to be an attacker.
        attacked = [fps.index(fp) in bad for fp in outcome.exits_used]
        assert differ == (attacked[0] != attacked[1])


def _obs(cert, exit_fp):
    return CertObservation([cert.public_bytes(serialization.Encoding.DER)], exit_fp=exit_fp)


def test_outcome_invariants():
    a = _obs(decoy_leaf("secure.decoy"), "A" * 40)
    b = _obs(attacker_leaf("secure.decoy"), "B" * 40)
    with pytest.raises(ValueError):
        VerificationOutcome("MATCH", [a, a], ["A" * 40, "A" * 40], False)
    with pytest.raises(ValueError):
        VerificationOutcome("MISMATCH", [a, a], ["A" * 40, "B" * 40], True)
    with pytest.raises(ValueError):
        VerificationOutcome("MATCH", [a, b], ["A" * 40, "B" * 40], True)
    with pytest.raises(ValueError):
        VerificationOutcome("MISMATCH", [a], ["A" * 40, "B" * 40], True)
    VerificationOutcome("INCONCLUSIVE", [a], ["A" * 40], False)


def _mismatch():
    a = _obs(attacker_leaf("secure.decoy"), "A" * 40)
    b = _obs(decoy_leaf("secure.decoy"), "B" * 40)
    return VerificationOutcome("MISMATCH", [a, b], ["A" * 40, "B" * 40], True)


def test_report_has_exactly_three_keys():
    report = build_report(_mismatch())
    data = json.loads(report.to_json())
    assert set(data) == REPORT_KEYS == {"exits_used", "observations", "created_at"}
    schema = report_schema()
    assert set(schema["properties"]) == REPORT_KEYS and schema["additionalProperties"] is False
    jsonschema.validate(data, schema)
    assert base64.b64decode(data["observations"][0]) == attacker_leaf("secure.decoy").public_bytes(
        serialization.Encoding.DER)


def test_schema_refuses_identifying_fields():
    data = build_report(_mismatch()).to_dict()
    for extra in ("client_ip", "user", "guard"):
        with pytest.raises(jsonschema.ValidationError):
            MitmReport.from_dict({**data, extra: "x"})
    with pytest.raises(jsonschema.ValidationError):
        MitmReport.from_dict({k: v for k, v in data.items() if k != "created_at"})


def test_report_roundtrip():
    report = build_report(_mismatch(), created_at="2014-01-14T17:12:08Z")
    assert MitmReport.from_json(report.to_json()) == report


def test_submit_needs_consent(tmp_path):
    sink = FileSink(tmp_path / "r.jsonl")
    with pytest.raises(ConsentRequired):
        submit_report(build_report(_mismatch()), sink)
    assert not (tmp_path / "r.jsonl").exists()


def test_duplicate_submission_appends_twice(tmp_path):
    path = tmp_path / "r.jsonl"
    report = build_report(_mismatch())
    first = submit_report(report, FileSink(path), consent=True)
    second = submit_report(report, FileSink(path), consent=True)
    lines = path.read_text().splitlines()
    assert first == second == hashlib.sha256(lines[0].encode()).hexdigest()
    assert lines == [report.to_json(), report.to_json()]


def test_default_sink_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    submit_report(build_report(_mismatch()), consent=True)
    assert len((tmp_path / "mitm-reports.jsonl").read_text().splitlines()) == 1


def test_unwritable_sink(tmp_path):
    with pytest.raises(SinkUnavailable):
        submit_report(build_report(_mismatch()), FileSink(tmp_path), consent=True)


def test_regional_heuristic():
    # Same issuer, different leaves, no forged root: plausibly a CDN.
    a = _obs(decoy_leaf("secure.decoy"), "A" * 40)
    b = _obs(decoy_leaf("video.decoy"), "B" * 40)
    assert _regional(a, b)
    forged = CertObservation([attacker_leaf("secure.decoy").public_bytes(serialization.Encoding.DER),
                              main_authority_root().public_bytes(serialization.Encoding.DER)],
                             exit_fp="C" * 40, known_root="main-authority")
    assert not _regional(forged, b)


def test_parse_path():
    assert parse_path("$%s~guard,$%s=exit" % ("a" * 40, "B" * 40)) == ["A" * 40, "B" * 40]
