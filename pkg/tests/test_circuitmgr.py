import asyncio
import dataclasses

import pytest

from exitscan import ctlproto
from exitscan.circuitmgr import (AttachRejected, BuildDestroyed, BuildTimeout, Circuit, CircuitGone,
                                 CircuitManager, CircuitState, FailureReason, ScanAccounting)
from exitscan.consensus import ACCEPT_ALL
from exitscan.ctlproto import AsyncEvent, EventKind
from exitscan.probes import Verdict, load_decoys, specs_from_decoys
from exitscan.simnet import FaultTable, LatencyModel
from exitscan.simnet.fixtures import exits_of, first_hops, guard_relays, small_config

from conftest import scan, scanning_session, virtual

HTTPS = specs_from_decoys(load_decoys())["https"]


def open_policy(cfg):
    cfg.relays = [dataclasses.replace(r, exit_policy=ACCEPT_ALL) if r.is_exit else r for r in cfg.relays]
    return cfg


async def manager(cfg, **kw):
    session, socks, insp = await scanning_session(cfg)
    mgr = await CircuitManager(session, socks, first_hops(cfg), **kw).start()
    return mgr, session, insp


@virtual
async def test_build_benign_circuit():
    cfg = small_config(2)
    mgr, session, _ = await manager(cfg)
    exit_fp = exits_of(cfg)[0].fingerprint
    circ = await mgr.build_circuit(first_hops(cfg)[0], exit_fp)
    assert circ.state is CircuitState.BUILT
    assert circ.path == (first_hops(cfg)[0], exit_fp)
    # Two hops, each a round trip of at most base + jitter.
    assert 0 <= circ.built_at - circ.created_at <= 2 * 2 * (0.020 + 0.030) + 1e-9
    assert mgr.accounting.circuits_built == 1
    await mgr.close_circuit(circ)
    await mgr.stop()
    await session.close()


@virtual
async def test_three_hop_configuration():
    cfg = small_config(3)
    mgr, session, _ = await manager(cfg, middle_hops=[exits_of(cfg)[2].fingerprint])
    circ = await mgr.build_circuit(first_hops(cfg)[0], exits_of(cfg)[0].fingerprint)
    assert len(circ.path) == 3
    await mgr.stop()
    await session.close()


@virtual
async def test_first_hop_must_differ():
    cfg = small_config(1)
    mgr, session, _ = await manager(cfg)
    with pytest.raises(ValueError):
        await mgr.build_circuit(exits_of(cfg)[0].fingerprint, exits_of(cfg)[0].fingerprint)
    await session.close()


@virtual
async def test_destroyed_circuit():
    cfg = small_config(1, bad={0: "destroy_circuits"})
    mgr, session, insp = await manager(cfg)
    with pytest.raises(BuildDestroyed):
        await mgr.build_circuit(first_hops(cfg)[0], exits_of(cfg)[0].fingerprint)
    assert mgr.accounting.circuits_failed_destroyed == 1
    assert insp.destroy_count == 1
    await session.close()


@virtual
async def test_manager_timeout_shorter_than_build():
    cfg = small_config(1, latency=LatencyModel(base=1.0, jitter=0.0))
    mgr, session, insp = await manager(cfg, circuit_timeout=2.0)
    loop = asyncio.get_running_loop()
    started = loop.time()
    with pytest.raises(BuildTimeout):
        await mgr.build_circuit(first_hops(cfg)[0], exits_of(cfg)[0].fingerprint)
    assert loop.time() - started == pytest.approx(2.0, abs=1e-6)
    assert mgr.accounting.circuits_failed_timeout == 1
    await asyncio.sleep(10)
    # The abandoned circuit was closed and its late events did not leak.
    assert not mgr._early and not mgr._circuits
    await session.close()


@virtual
async def test_daemon_side_timeout():
    cfg = small_config(1, faults=FaultTable(fail_prob=1.0, destroy_fraction=0.0))
    mgr, session, _ = await manager(cfg)
    with pytest.raises(BuildTimeout):
        await mgr.build_circuit(first_hops(cfg)[0], exits_of(cfg)[0].fingerprint)
    assert mgr.accounting.circuits_failed_timeout == 1
    await session.close()


@virtual
async def test_attach_to_failed_circuit_is_circuit_gone():
    cfg = small_config(1, bad={0: "destroy_circuits"})
    mgr, session, _ = await manager(cfg)
    with pytest.raises(BuildDestroyed):
        await mgr.build_circuit(first_hops(cfg)[0], exits_of(cfg)[0].fingerprint)
    (circ,) = mgr._circuits.values()
    assert circ.state is CircuitState.FAILED and circ.failure_reason is FailureReason.DESTROYED
    with pytest.raises(CircuitGone):
        await mgr.attach_stream(1, circ)
    with pytest.raises(CircuitGone):
        await mgr.open_stream(circ, "secure.decoy:443")
    await session.close()


@virtual
async def test_attach_errors_from_daemon():
    cfg = small_config(1)
    mgr, session, _ = await manager(cfg)
    circ = await mgr.build_circuit(first_hops(cfg)[0], exits_of(cfg)[0].fingerprint)
    with pytest.raises(AttachRejected) as info:
        await mgr.attach_stream(12345, circ)
    assert info.value.reply.status == 552
    await session.close_circuit(circ.circuit_id)
    await asyncio.sleep(0.01)
    assert circ.state is CircuitState.CLOSED
    with pytest.raises(CircuitGone):
        await mgr.open_stream(circ, "secure.decoy:443")
    await session.close()


@virtual
async def test_streams_never_cross_circuits():
    cfg = open_policy(small_config(8))
    mgr, session, insp = await manager(cfg)
    circuits = await asyncio.gather(*(mgr.build_circuit(first_hops(cfg)[0], r.fingerprint)
                                      for r in exits_of(cfg)))

    async def echo(circ, n):
        stream = await mgr.open_stream(circ, "echo.decoy:7", 30)
        line = await stream.readline()
        stream.close()
        return circ.exit_fp, line.decode().split()[1]

    pairs = await asyncio.gather(*(echo(c, n) for n in range(3) for c in circuits))
    assert len(pairs) == 24
    assert all(want == got for want, got in pairs)
    await session.close()


@virtual
async def test_fifo_fallback_without_source_address():
    cfg = small_config(1)
    mgr, session, _ = await manager(cfg)
    circ = Circuit(1, ("A" * 40, "B" * 40), CircuitState.BUILT)
    first, _ = mgr._claim(circ, "secure.decoy:443")
    second, _ = mgr._claim(circ, "secure.decoy:443")
    other, _ = mgr._claim(circ, "login.decoy:80")
    for sid, target in [(7, "secure.decoy:443"), (8, "login.decoy:80"), (9, "secure.decoy:443")]:
        mgr._on_stream(AsyncEvent(EventKind.STREAM, sid, "NEW", {"circuit_id": 0, "target": target}))
    assert (first.stream_id.result(), second.stream_id.result(), other.stream_id.result()) == (7, 9, 8)
    await session.close()


@virtual
async def test_source_port_wins_over_target_order():
    cfg = small_config(1)
    mgr, session, _ = await manager(cfg)
    circ = Circuit(1, ("A" * 40, "B" * 40), CircuitState.BUILT)
    first, _ = mgr._claim(circ, "secure.decoy:443")
    second, _ = mgr._claim(circ, "secure.decoy:443")
    first.port, second.port = 5001, 5002
    mgr._claims_by_port.update({5001: first, 5002: second})
    mgr._on_stream(AsyncEvent(EventKind.STREAM, 3, "NEW", {"circuit_id": 0, "target": "secure.decoy:443",
                                                          "SOURCE_ADDR": "127.0.0.1:5002"}))
    assert second.stream_id.result() == 3 and not first.stream_id.done()
    # An unknown source port is somebody else's stream.
    mgr._on_stream(AsyncEvent(EventKind.STREAM, 4, "NEW", {"circuit_id": 0, "target": "secure.decoy:443",
                                                          "SOURCE_ADDR": "127.0.0.1:6000"}))
    assert not first.stream_id.done()
    await session.close()


# -- run_scan contract ------------------------------------------------------------------

@virtual
async def test_three_benign_exits_ok():
    cfg = small_config(3)
    results, acc, _ = await scan(cfg, exits_of(cfg), HTTPS)
    assert [r.verdict for r in results] == [Verdict.OK] * 3


@virtual
async def test_mixed_twenty_one_alert():
    cfg = small_config(20, bad={13: "cert_mitm"})
    results, acc, _ = await scan(cfg, exits_of(cfg), HTTPS, parallelism=5)
    alerts = [r for r in results if r.verdict is Verdict.ALERT]
    assert len(alerts) == 1 and alerts[0].exit_fp == exits_of(cfg)[13].fingerprint


@pytest.mark.parametrize("n,parallelism", [(1, 1), (7, 3), (25, 4), (40, 40)])
def test_one_attempt_order_and_parallelism(n, parallelism):
    cfg = small_config(n, seed=n)

    @virtual
    async def run():
        return await scan(cfg, exits_of(cfg), HTTPS, parallelism=parallelism)
    results, acc, insp = run()
    fps = [r.fingerprint for r in exits_of(cfg)]
    assert [r.exit_fp for r in results] == fps
    assert len(set(r.exit_fp for r in results)) == n
    assert acc.circuits_attempted == n
    assert acc.peak_pending <= parallelism and acc.peak_active <= parallelism
    assert acc.circuits_attempted == acc.circuits_built + acc.circuits_failed + acc.circuits_pending
    assert acc.circuits_pending == 0
    assert not any(r.verdict is Verdict.ERROR for r in results)


@virtual
async def test_parallelism_must_be_positive():
    cfg = small_config(1)
    mgr, session, _ = await manager(cfg)
    with pytest.raises(ValueError):
        await mgr.run_scan(exits_of(cfg), HTTPS, 0)
    await session.close()


def test_timeout_monotonicity():
    cfg = small_config(30, seed=5, latency=LatencyModel(base=0.05, jitter=0.2))
    built = []
    for timeout in (2.0, 1.0, 0.6, 0.4, 0.3, 0.2, 0.1):
        @virtual
        async def run():
            return await scan(cfg, exits_of(cfg), HTTPS, circuit_timeout=timeout)
        built.append(run()[1].circuits_built)
    assert built == sorted(built, reverse=True)
    assert built[0] == 30 and built[-1] < 30


@virtual
async def test_fault_table_fifteen_percent_in_blocks():
    cfg = small_config(200, faults=FaultTable(fail_prob=0.15, destroy_fraction=0.5, block=100))
    results, acc, insp = await scan(cfg, exits_of(cfg), HTTPS, parallelism=20)
    assert acc.circuits_attempted == 200
    assert acc.built_fraction == pytest.approx(0.85)
    assert acc.circuits_failed_destroyed + acc.circuits_failed_timeout == 30
    assert insp.circuits_failed == 30
    assert sum(r.verdict is Verdict.ERROR for r in results) == 30


@virtual
async def test_retries_mask_failures():
    cfg = small_config(50, faults=FaultTable(fail_prob=0.15, destroy_fraction=1.0, block=100))
    results, acc, _ = await scan(cfg, exits_of(cfg), HTTPS, retries=3)
    assert acc.circuits_attempted > 50
    assert all(r.verdict is Verdict.OK for r in results)


@virtual
async def test_first_hop_rotation():
    cfg = small_config(6)
    cfg.relays = cfg.relays + guard_relays(3)[1:]
    hops = first_hops(cfg)
    session, socks, insp = await scanning_session(cfg)
    async with CircuitManager(session, socks, hops, rotate_every=2) as mgr:
        await mgr.run_scan(exits_of(cfg), HTTPS, parallelism=1)
    await session.close()
    used = [c.split()[3].split(",")[0] for c in insp.commands if " EXTENDCIRCUIT " in c]
    assert used == [hops[0], hops[0], hops[1], hops[1], hops[2], hops[2]]


@virtual
async def test_session_loss_turns_into_errors():
    cfg = small_config(5, latency=LatencyModel(base=0.5, jitter=0.0))
    session, socks, _ = await scanning_session(cfg)
    mgr = CircuitManager(session, socks, first_hops(cfg))
    task = asyncio.ensure_future(mgr.run_scan(exits_of(cfg), HTTPS, parallelism=5))
    await asyncio.sleep(0.2)
    await session.close()
    results, acc = await task
    assert len(results) == 5
    assert all(r.verdict is Verdict.ERROR for r in results)
    with pytest.raises(ctlproto.SessionLost):
        await mgr.build_circuit(first_hops(cfg)[0], exits_of(cfg)[0].fingerprint)


@virtual
async def test_durations_cover_build_and_probe():
    cfg = small_config(4)
    results, acc, _ = await scan(cfg, exits_of(cfg), HTTPS)
    assert sorted(acc.per_probe_duration["https"]) == sorted(r.duration for r in results)
    assert all(0 < r.duration < 5 for r in results)


def test_accounting_roundtrip():
    acc = ScanAccounting(10, 8, 1, 1, 0)
    acc.per_probe_duration["https"].extend([1.0, 2.5])
    acc.peak_pending = 4
    again = ScanAccounting.from_dict(acc.to_dict())
    assert again.to_dict() == acc.to_dict()
    assert again.built_fraction == 0.8 and again.circuits_pending == 0


def test_failure_reasons():
    assert {r.value for r in FailureReason} == {"TIMEOUT", "DESTROYED", "OTHER"}
