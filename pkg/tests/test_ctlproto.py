import asyncio
import json
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from exitscan import ctlproto
from exitscan.ctlproto import (AsyncEvent, ControlCommand, ControlReply, EventKind, Verb, decode_command,
                               decode_reply, encode_command, encode_event, encode_reply, parse_event)
from exitscan.circuitmgr import CircuitManager
from exitscan.probes import load_decoys, specs_from_decoys
from exitscan.simnet import FaultTable, run_virtual, start_sim
from exitscan.simnet.fixtures import exits_of, first_hops, small_config
from exitscan.simnet.transport import stream_pair

from conftest import virtual

VECTORS = json.loads((Path(__file__).parent / "golden" / "ctlproto_vectors.json").read_text())


def test_golden_suite_is_large_enough():
    total = sum(len(VECTORS[k]) for k in ("commands", "replies", "events", "malformed", "invalid_commands"))
    assert total >= 30
    assert any("+" in v["wire"] for v in VECTORS["replies"])


@pytest.mark.parametrize("vec", VECTORS["commands"], ids=lambda v: v["name"])
def test_command_vectors(vec):
    cmd = ControlCommand(vec["verb"], vec["args"])
    assert encode_command(cmd) == vec["wire"].encode()
    assert decode_command(vec["wire"].encode()) == cmd


@pytest.mark.parametrize("vec", VECTORS["invalid_commands"], ids=lambda v: v["name"])
def test_invalid_command_vectors(vec):
    with pytest.raises(getattr(ctlproto, vec["error"])):
        ControlCommand(vec["verb"], vec["args"])


@pytest.mark.parametrize("vec", VECTORS["replies"], ids=lambda v: v["name"])
def test_reply_vectors(vec):
    reply = decode_reply(vec["wire"].encode())
    assert isinstance(reply, ControlReply)
    assert (reply.status, reply.lines) == (vec["status"], vec["lines"])
    assert reply.ok == (200 <= vec["status"] < 300)
    # Re-encoding and decoding again is stable.
    assert decode_reply(encode_reply(reply)) == reply


@pytest.mark.parametrize("vec", VECTORS["events"], ids=lambda v: v["name"])
def test_event_vectors(vec):
    event = decode_reply(vec["wire"].encode())
    assert isinstance(event, AsyncEvent)
    assert event.kind.value == vec["kind"]
    assert event.entity_id == vec["id"]
    assert event.status == vec["status"]
    assert event.detail == vec["detail"]
    if "source_port" in vec:
        assert event.source_port == vec["source_port"]
    if event.kind is not EventKind.OTHER:
        assert decode_reply(encode_event(event)) == event


@pytest.mark.parametrize("vec", VECTORS["malformed"], ids=lambda v: v["name"])
def test_malformed_vectors(vec):
    with pytest.raises(ctlproto.MalformedReply):
        decode_reply(vec["wire"].encode())


def test_read_message_frames_vectors():
    async def main():
        wire = b"".join(v["wire"].encode() for v in VECTORS["replies"] + VECTORS["events"])
        reader = asyncio.StreamReader()
        reader.feed_data(wire)
        reader.feed_eof()
        got = []
        for _ in VECTORS["replies"] + VECTORS["events"]:
            got.append(await ctlproto.read_message(reader))
        with pytest.raises(ctlproto.SessionLost):
            await ctlproto.read_message(reader)
        return got
    got = run_virtual(main())
    assert got == [v["wire"].encode() for v in VECTORS["replies"] + VECTORS["events"]]


def test_unknown_verb_is_rejected_on_decode():
    with pytest.raises(ctlproto.UnknownVerb) as info:
        decode_command(b"MAPADDRESS a=b\r\n")
    assert info.value.verb == "MAPADDRESS"


# -- properties -------------------------------------------------------------------

token = st.text(st.characters(min_codepoint=0x21, max_codepoint=0x7E, blacklist_characters='"\\'),
                min_size=1, max_size=12)
text_line = st.text(st.characters(min_codepoint=0x20, max_codepoint=0x7E), min_size=1, max_size=40)
fingerprint = st.text("0123456789ABCDEF", min_size=40, max_size=40)


@given(st.sampled_from([Verb.GETINFO, Verb.SIGNAL, Verb.SETCONF, Verb.SETEVENTS, Verb.AUTHENTICATE]),
       st.lists(token, min_size=1, max_size=4))
def test_command_roundtrip(verb, args):
    cmd = ControlCommand(verb, args)
    wire = encode_command(cmd)
    assert wire.endswith(b"\r\n") and wire.count(b"\r\n") == 1
    assert decode_command(wire) == cmd


@given(st.integers(1, 2**31), st.integers(1, 2**31))
def test_attach_roundtrip(stream_id, circuit_id):
    cmd = ControlCommand(Verb.ATTACHSTREAM, (str(stream_id), str(circuit_id)))
    assert decode_command(encode_command(cmd)) == cmd


@given(st.lists(fingerprint, min_size=1, max_size=3))
def test_extend_roundtrip(path):
    cmd = ControlCommand(Verb.EXTENDCIRCUIT, ("0", ",".join("$" + fp for fp in path)))
    assert decode_command(encode_command(cmd)) == cmd


@given(st.text(min_size=1).filter(lambda s: any(ord(c) < 0x20 or ord(c) > 0x7E for c in s)))
def test_tokens_with_control_or_non_ascii_are_refused(bad):
    with pytest.raises(ctlproto.InvalidToken):
        ControlCommand(Verb.GETINFO, ("x" + bad,))


@given(st.sampled_from([250, 251, 451, 510, 552]),
       st.lists(st.one_of(text_line, st.lists(st.text(st.characters(min_codepoint=0x20, max_codepoint=0x7E),
                                                      max_size=20), min_size=1, max_size=4)
                           .map(lambda ls: "key=\n" + "\n".join(ls))),
                min_size=1, max_size=4))
def test_reply_roundtrip(status, lines):
    if "\n" in lines[-1]:
        lines = lines + ["OK"]
    reply = ControlReply(status, lines)
    decoded = decode_reply(encode_reply(reply))
    expected = lines[:-1] if len(lines) > 1 and lines[-1] == "OK" and "\n" in lines[-2] else lines
    assert decoded.status == status and decoded.lines == expected


@given(st.integers(1, 10**6), st.sampled_from(["LAUNCHED", "EXTENDED", "BUILT", "FAILED", "CLOSED"]),
       st.lists(fingerprint, max_size=3),
       st.dictionaries(st.sampled_from(["REASON", "PURPOSE", "MSG"]), text_line, max_size=3))
def test_circ_event_roundtrip(cid, status, path, kw):
    detail = {}
    if path:
        detail["path"] = ",".join("$" + fp for fp in path)
    detail.update(kw)
    event = AsyncEvent(EventKind.CIRC, cid, status, detail)
    assert parse_event(ctlproto.format_event(event)) == event
    assert decode_reply(encode_event(event)) == event


@given(st.integers(1, 10**6), st.integers(0, 10**6), st.integers(1, 65535))
def test_stream_event_roundtrip(sid, cid, port):
    event = AsyncEvent(EventKind.STREAM, sid, "NEW", {"circuit_id": cid, "target": "secure.decoy:443",
                                                      "SOURCE_ADDR": "127.0.0.1:%d" % port})
    decoded = decode_reply(encode_event(event))
    assert decoded == event and decoded.source_port == port


# -- session behaviour against the simulator -------------------------------------

@virtual
async def test_session_authenticates_and_configures():
    cfg = small_config(2, cookie=b"\x01\x02\x03\x04")
    control, socks, insp = start_sim(cfg)
    session = await ctlproto.open_session(control, cfg.cookie)
    await ctlproto.configure_scanning(session)
    assert (await session.get_info("version")).startswith("0.2.4")
    commands = [c.split(" ", 1)[1] for c in insp.commands]
    assert commands == ["AUTHENTICATE 01020304",
                        "SETCONF __LeaveStreamsUnattached=1 __DisablePredictedCircuits=1",
                        "SETEVENTS CIRC STREAM", "GETINFO version"]
    await session.close()


@virtual
async def test_wrong_cookie_fails():
    cfg = small_config(1, cookie=b"secret")
    control, _, _ = start_sim(cfg)
    with pytest.raises(ctlproto.AuthFailed):
        await ctlproto.open_session(control, b"guess!")


@virtual
async def test_rejected_setconf_raises_config_rejected():
    cfg = small_config(1, faults=FaultTable(reject_conf=("__DisablePredictedCircuits",)))
    control, _, _ = start_sim(cfg)
    session = await ctlproto.open_session(control)
    with pytest.raises(ctlproto.ConfigRejected):
        await ctlproto.configure_scanning(session)
    await session.close()


@virtual
async def test_refused_connection():
    class Closed:
        async def open_connection(self):
            raise ConnectionRefusedError("nobody home")
    with pytest.raises(ctlproto.ConnectionRefused):
        await ctlproto.open_session(Closed())


@virtual
async def test_unknown_command_gets_510_and_failed_request_raises():
    cfg = small_config(1)
    control, _, _ = start_sim(cfg)
    session = await ctlproto.open_session(control)
    with pytest.raises(ctlproto.CommandFailed) as info:
        await session.request(Verb.GETINFO, "no-such-key")
    assert info.value.reply.status == 552
    await session.close()


@virtual
async def test_session_lost_wakes_subscribers_and_pending():
    (cr, cw), (sr, sw) = stream_pair()
    session = ctlproto.ControlSession(cr, cw)
    queue = session.subscribe()
    sw.write(b"650 CIRC 1 LAUNCHED\r\n")
    assert (await queue.get()).status == "LAUNCHED"
    pending = asyncio.ensure_future(session.send(ControlCommand(Verb.SIGNAL, ("NEWNYM",))))
    await asyncio.sleep(0)
    sw.close()
    assert await queue.get() is None
    with pytest.raises(ctlproto.SessionLost):
        await pending
    with pytest.raises(ctlproto.SessionLost):
        await session.signal("NEWNYM")


@virtual
async def test_events_interleaved_with_replies_are_routed():
    (cr, cw), (sr, sw) = stream_pair()
    session = ctlproto.ControlSession(cr, cw)
    queue = session.subscribe()
    request = asyncio.ensure_future(session.extend_circuit(["A" * 40, "B" * 40]))
    line = await sr.readline()
    assert line == b"EXTENDCIRCUIT 0 " + b"A" * 40 + b"," + b"B" * 40 + b"\r\n"
    sw.write(b"650 CIRC 5 LAUNCHED\r\n250 EXTENDED 5\r\n650 CIRC 5 BUILT\r\n")
    assert await request == 5
    assert [(await queue.get()).status for _ in range(2)] == ["LAUNCHED", "BUILT"]
    await session.close()


@virtual
async def test_concurrent_senders_never_interleave():
    cfg = small_config(4)
    control, _, insp = start_sim(cfg)
    session = await ctlproto.open_session(control)
    exits = [r.fingerprint for r in cfg.relays if r.is_exit]
    guard = cfg.relays[0].fingerprint

    async def sender_a():
        return [await session.get_info("version") for _ in range(50)]

    async def sender_b():
        return [await session.extend_circuit([guard, exits[i % 4]]) for i in range(50)]

    versions, circuits = await asyncio.gather(sender_a(), sender_b())
    assert len(set(versions)) == 1 and len(set(circuits)) == 50
    seen = [line.split(" ", 1)[1] for line in insp.commands]
    assert len(seen) == 101
    for line in seen:
        decode_command((line + "\r\n").encode())
    await session.close()


ORDER = {"LAUNCHED": 0, "EXTENDED": 1, "BUILT": 2, "FAILED": 2, "CLOSED": 3}


@virtual
async def test_circ_events_follow_lifecycle_order():
    cfg = small_config(60, bad={3: "destroy_circuits"},
                       faults=FaultTable(fail_prob=0.2, destroy_fraction=0.5))
    control, socks, _ = start_sim(cfg)
    session = await ctlproto.open_session(control)
    await ctlproto.configure_scanning(session)
    queue = session.subscribe()
    async with CircuitManager(session, socks, first_hops(cfg), circuit_timeout=5) as mgr:
        await mgr.run_scan(exits_of(cfg), specs_from_decoys(load_decoys())["https"], 10)
    await asyncio.sleep(30)
    await session.close()
    history = {}
    while True:
        event = queue.get_nowait()
        if event is None:
            break
        if event.kind is EventKind.CIRC:
            history.setdefault(event.entity_id, []).append(event.status)
    assert len(history) == 60
    for cid, statuses in history.items():
        ranks = [ORDER[s] for s in statuses]
        assert ranks == sorted(ranks), (cid, statuses)
        assert statuses[0] == "LAUNCHED" and statuses[-1] == "CLOSED"
        assert sum(s in ("BUILT", "FAILED") for s in statuses) <= 1
