"""A stand-in for the routing daemon: control port, SOCKS port, circuits.

Only what the scanner needs is implemented.  Unsupported commands get a
5xx reply, like a daemon that does not know them.
"""

import asyncio
import binascii
import collections
import copy
import itertools
import json
import logging
import random
import socket
import struct
from dataclasses import dataclass, field

from exitscan import ctlproto, socksio
from exitscan.consensus import format_consensus
from exitscan.ctlproto import AsyncEvent, ControlReply, EventKind, Verb
from exitscan.simnet.transport import MemoryEndpoint
from exitscan.simnet.world import HOSTS, SERVICES, ExitAgent, InvalidConfig

log = logging.getLogger(__name__)

SIM_VERSION = "0.2.4.20 (simnet)"


@dataclass
class LatencyModel:
    """Per-hop one-way delay: ``base`` plus uniform jitter in [0, jitter]."""

    base: float = 0.020
    jitter: float = 0.030

    def hop(self, rng):
        return self.base + rng.uniform(0.0, self.jitter)


@dataclass
class FaultTable:
    """Injected circuit failures.

    ``fail_prob`` of all circuit builds fail; ``destroy_fraction`` of those
    are torn down by a DESTROY cell, the rest time out.  Failures are drawn
    in shuffled blocks of ``block`` builds, each holding the configured
    share of failures, so the realised rate tracks ``fail_prob`` closely.
    ``block=0`` draws every build independently.
    ``reject_conf`` lists SETCONF keys the daemon refuses.
    """

    fail_prob: float = 0.0
    destroy_fraction: float = 0.0
    block: int = 100
    reject_conf: tuple = ()

    def __post_init__(self):
        if not 0.0 <= self.fail_prob <= 1.0 or not 0.0 <= self.destroy_fraction <= 1.0:
            raise InvalidConfig("fault probabilities must lie in [0, 1]")
        self.reject_conf = tuple(self.reject_conf)


@dataclass
class ClientPolicy:
    """How the daemon picks exits for streams it attaches itself.

    ``weighted`` draws by bandwidth, ``sequence`` walks ``exits`` in order,
    ``pinned`` always uses ``exits[0]``.
    """

    exit_choice: str = "weighted"
    exits: tuple = ()

    def __post_init__(self):
        if self.exit_choice not in ("weighted", "sequence", "pinned"):
            raise InvalidConfig("unknown exit_choice %r" % self.exit_choice)
        self.exits = tuple(fp.upper() for fp in self.exits)
        if self.exit_choice != "weighted" and not self.exits:
            raise InvalidConfig("%s exit choice needs a list of exits" % self.exit_choice)


@dataclass
class SimConfig:
    relays: list
    behaviors: dict = field(default_factory=dict)
    latency: LatencyModel = field(default_factory=LatencyModel)
    rng_seed: int = 0
    faults: FaultTable = field(default_factory=FaultTable)
    client: ClientPolicy = field(default_factory=ClientPolicy)
    cookie: bytes = None
    build_timeout: float = 10.0
    stream_timeout: float = 120.0

    def __post_init__(self):
        normalized = {}
        for fp, items in dict(self.behaviors).items():
            if not isinstance(items, (list, tuple)):
                items = [items]
            normalized[fp.upper()] = list(items)
        self.behaviors = normalized

    def validate(self):
        known = {r.fingerprint for r in self.relays}
        if len(known) != len(self.relays):
            raise InvalidConfig("duplicate relay fingerprints")
        for fp, items in self.behaviors.items():
            if fp not in known:
                raise InvalidConfig("behavior for unknown relay %s" % fp)
            for b in items:
                if b.exit_fp != fp:
                    raise InvalidConfig("behavior keyed by %s names exit %s" % (fp, b.exit_fp))
        for fp in self.client.exits:
            if fp not in known:
                raise InvalidConfig("client policy names unknown relay %s" % fp)
        return self


class _FailureSchedule:
    def __init__(self, faults, rng):
        self._faults = faults
        self._rng = rng
        self._queue = collections.deque()

    def next(self):
        """None for a healthy build, else 'DESTROYED' or 'TIMEOUT'."""
        f = self._faults
        if f.fail_prob <= 0.0:
            return None
        if f.block <= 0:
            failed = self._rng.random() < f.fail_prob
        else:
            if not self._queue:
                share = f.fail_prob * f.block
                count = int(share) + (1 if self._rng.random() < share - int(share) else 0)
                block = [True] * count + [False] * (f.block - count)
                self._rng.shuffle(block)
                self._queue.extend(block)
            failed = self._queue.popleft()
        if not failed:
            return None
        return "DESTROYED" if self._rng.random() < f.destroy_fraction else "TIMEOUT"


class Inspection:
    """Read-only view of what happened inside the simulator."""

    def __init__(self, daemon):
        self.daemon = daemon
        self.local_dns_calls = 0
        self.connections = []
        self.attacks = []
        self.destroy_count = 0
        self.circuits_launched = 0
        self.circuits_built = 0
        self.circuits_failed = 0
        self.trace = []
        self.commands = []

    def connection_counts(self):
        return collections.Counter(c["exit"] for c in self.connections)

    def snapshot(self):
        return copy.deepcopy({
            "local_dns_calls": self.local_dns_calls,
            "destroy_count": self.destroy_count,
            "circuits_launched": self.circuits_launched,
            "circuits_built": self.circuits_built,
            "circuits_failed": self.circuits_failed,
            "connections": self.connections,
            "attacks": self.attacks,
        })

    def to_json(self):
        return json.dumps(self.snapshot(), sort_keys=True)

    async def local_resolver(self, name):
        """Stand-in for the host's own resolver; only counts and answers."""
        self.local_dns_calls += 1
        return list(HOSTS.get(name.lower().rstrip("."), ()))


class SimCircuit:
    def __init__(self, circuit_id, path, latency):
        self.id = circuit_id
        self.path = path
        self.latency = latency
        self.status = "LAUNCHED"
        self.dirty = False
        self.client_owned = False
        self.streams = set()
        self.built = asyncio.get_running_loop().create_future()

    @property
    def exit(self):
        return self.path[-1]


class SimStream:
    def __init__(self, stream_id, host, port, command, source):
        self.id = stream_id
        self.host = host
        self.port = port
        self.command = command
        self.source = source
        self.circuit = None
        self.writer = None
        self.attached = asyncio.get_running_loop().create_future()

    @property
    def target(self):
        return "%s:%d" % (self.host, self.port)


class _ControlConn:
    def __init__(self, conn_id, writer):
        self.id = conn_id
        self.writer = writer
        self.authenticated = False
        self.events = frozenset()
        self.closing = False


class SimDaemon:
    def __init__(self, config):
        config.validate()
        self.config = config
        self.relays = {r.fingerprint: r for r in config.relays}
        self.inspection = Inspection(self)
        seed = config.rng_seed
        self._latency_rng = random.Random("%s/latency" % seed)
        self._client_rng = random.Random("%s/client" % seed)
        self._failures = _FailureSchedule(config.faults, random.Random("%s/faults" % seed))
        self._agents = {}
        self._circuits = {}
        self._streams = {}
        self._circ_ids = itertools.count(1)
        self._stream_ids = itertools.count(1)
        self._conn_ids = itertools.count(1)
        self._conns = []
        self._conf = {"__LeaveStreamsUnattached": "0", "__DisablePredictedCircuits": "0"}
        self._sequence = itertools.cycle(config.client.exits) if config.client.exits else None
        self._guards = [r.fingerprint for r in config.relays
                        if "Guard" in r.flags and not r.is_exit] or \
                       [r.fingerprint for r in config.relays if not r.is_exit]

    # -- helpers -------------------------------------------------------------

    def agent(self, fingerprint):
        agent = self._agents.get(fingerprint)
        if agent is None:
            agent = ExitAgent(self.relays[fingerprint], self.config.behaviors.get(fingerprint, ()),
                              self.config.rng_seed, self._note_attack)
            self._agents[fingerprint] = agent
        return agent

    def _note_attack(self, fp, kind, target):
        self.inspection.attacks.append({"exit": fp, "kind": kind, "target": target})

    def _hop_name(self, fp):
        return "$%s~%s" % (fp, self.relays[fp].nickname)

    def _emit(self, event):
        line = ctlproto.format_event(event)
        self.inspection.trace.append(line)
        wire = ("650 " + line + "\r\n").encode("utf-8")
        for conn in self._conns:
            if event.kind.value in conn.events and not conn.closing:
                conn.writer.write(wire)

    def _circ_event(self, circ, status, hops=None, **kw):
        detail = {}
        path = circ.path if hops is None else circ.path[:hops]
        if path:
            detail["path"] = ",".join(self._hop_name(fp) for fp in path)
        detail["PURPOSE"] = "GENERAL"
        detail.update(kw)
        self._emit(AsyncEvent(EventKind.CIRC, circ.id, status, detail))

    def _stream_event(self, stream, status, **kw):
        detail = {"circuit_id": stream.circuit.id if stream.circuit else 0, "target": stream.target}
        detail.update(kw)
        self._emit(AsyncEvent(EventKind.STREAM, stream.id, status, detail))

    @property
    def leave_streams_unattached(self):
        return self._conf.get("__LeaveStreamsUnattached") == "1"

    # -- circuits ------------------------------------------------------------

    def launch_circuit(self, path):
        loop = asyncio.get_running_loop()
        hops = [self.config.latency.hop(self._latency_rng) for _ in path]
        circ = SimCircuit(next(self._circ_ids), list(path), sum(hops))
        self._circuits[circ.id] = circ
        self.inspection.circuits_launched += 1
        failure = self._failures.next()
        if failure is None and self.agent(circ.exit).destroys_circuit():
            failure = "DESTROYED"
        loop.call_soon(self._circ_event, circ, "LAUNCHED", 0)
        elapsed = 0.0
        for i, hop in enumerate(hops):
            elapsed += 2 * hop
            last = i == len(hops) - 1
            if last and failure == "DESTROYED":
                loop.call_at(loop.time() + elapsed, self._fail_circuit, circ, "DESTROYED")
            elif last and failure == "TIMEOUT":
                loop.call_at(loop.time() + self.config.build_timeout, self._fail_circuit, circ, "TIMEOUT")
            elif last:
                loop.call_at(loop.time() + elapsed, self._build_circuit, circ)
            elif failure != "TIMEOUT" or i == 0:
                loop.call_at(loop.time() + elapsed, self._extend_circuit, circ, i + 1)
        return circ

    def _extend_circuit(self, circ, hops):
        if circ.status in ("LAUNCHED", "EXTENDED"):
            circ.status = "EXTENDED"
            self._circ_event(circ, "EXTENDED", hops)

    def _build_circuit(self, circ):
        if circ.status not in ("LAUNCHED", "EXTENDED"):
            return
        circ.status = "BUILT"
        self.inspection.circuits_built += 1
        self._circ_event(circ, "BUILT")
        if not circ.built.done():
            circ.built.set_result(circ)

    def _fail_circuit(self, circ, reason):
        if circ.status not in ("LAUNCHED", "EXTENDED"):
            return
        circ.status = "FAILED"
        self.inspection.circuits_failed += 1
        if reason == "DESTROYED":
            self.inspection.destroy_count += 1
            self._circ_event(circ, "FAILED", REASON="DESTROYED", REMOTE_REASON="OR_CONN_CLOSED")
        else:
            self._circ_event(circ, "FAILED", REASON=reason)
        self._circ_event(circ, "CLOSED", REASON=reason)
        circ.status = "CLOSED"
        self._circuits.pop(circ.id, None)
        if not circ.built.done():
            circ.built.set_exception(ConnectionError("circuit %d failed: %s" % (circ.id, reason)))
            circ.built.exception()  # mark retrieved

    def close_circuit(self, circ, reason="REQUESTED"):
        if circ.status == "CLOSED":
            return
        was_pending = circ.status in ("LAUNCHED", "EXTENDED")
        circ.status = "CLOSED"
        self._circuits.pop(circ.id, None)
        self._circ_event(circ, "CLOSED", REASON=reason)
        if was_pending and not circ.built.done():
            circ.built.set_exception(ConnectionError("circuit %d closed" % circ.id))
            circ.built.exception()
        for sid in sorted(circ.streams):
            stream = self._streams.get(sid)
            if stream is not None and stream.writer is not None:
                stream.writer.close()

    # -- client-mode path selection ------------------------------------------

    def _choose_exit(self, port):
        policy = self.config.client
        if policy.exit_choice == "pinned":
            return policy.exits[0]
        if policy.exit_choice == "sequence":
            return next(self._sequence)
        candidates = [r for r in self.config.relays
                      if r.is_exit and not r.is_bad_exit and r.allows_port(port) and r.bandwidth > 0]
        if not candidates:
            return None
        return self._client_rng.choices(candidates, weights=[r.bandwidth for r in candidates])[0].fingerprint

    async def _client_circuit(self, port):
        for circ in self._circuits.values():
            if (circ.client_owned and not circ.dirty and circ.status == "BUILT"
                    and self.relays[circ.exit].allows_port(port)):
                return circ
        for _ in range(5):
            exit_fp = self._choose_exit(port)
            if exit_fp is None:
                return None
            path = [fp for fp in self._guards[:1] if fp != exit_fp] + [exit_fp]
            circ = self.launch_circuit(path)
            circ.client_owned = True
            try:
                return await asyncio.shield(circ.built)
            except ConnectionError:
                continue
        return None

    # -- control port --------------------------------------------------------

    async def handle_control(self, reader, writer):
        conn = _ControlConn(next(self._conn_ids), writer)
        self._conns.append(conn)
        try:
            while not conn.closing:
                line = await reader.readline()
                if not line:
                    break
                if not line.endswith(b"\r\n"):
                    line = line.rstrip(b"\n") + b"\r\n"
                self.inspection.commands.append("%d %s" % (conn.id, line.decode("ascii", "replace").rstrip()))
                reply = self._dispatch(conn, line)
                writer.write(ctlproto.encode_reply(reply))
        finally:
            conn.closing = True
            self._conns.remove(conn)

    def _dispatch(self, conn, line):
        try:
            cmd = ctlproto.decode_command(line)
        except ctlproto.UnknownVerb as err:
            return ControlReply(510, ['Unrecognized command "%s"' % err.verb])
        except (ctlproto.InvalidCommand, ctlproto.MalformedReply, UnicodeDecodeError) as err:
            return ControlReply(512, ["Syntax error: %s" % err])
        if cmd.verb is Verb.AUTHENTICATE:
            return self._authenticate(conn, cmd.args)
        if not conn.authenticated:
            conn.closing = True
            return ControlReply(514, ["Authentication required."])
        handler = getattr(self, "_cmd_" + cmd.verb.value.lower())
        return handler(conn, cmd.args)

    def _authenticate(self, conn, args):
        expected = self.config.cookie
        if expected is not None:
            given = args[0].strip('"') if args else ""
            try:
                ok = binascii.unhexlify(given) == expected
            except (binascii.Error, ValueError):
                ok = False
            if not ok:
                conn.closing = True
                return ControlReply(515, ["Authentication failed: Wrong length on authentication cookie."])
        conn.authenticated = True
        return ControlReply(250, ["OK"])

    def _cmd_setconf(self, conn, args):
        updates = {}
        for arg in args:
            key, _, value = arg.partition("=")
            if key in self.config.faults.reject_conf:
                return ControlReply(552, ['Unrecognized option: Unknown option "%s".  Failing.' % key])
            updates[key] = value.strip('"')
        self._conf.update(updates)
        return ControlReply(250, ["OK"])

    def _cmd_setevents(self, conn, args):
        kinds = set()
        for arg in args:
            if arg.upper() not in ("CIRC", "STREAM"):
                return ControlReply(552, ['Unrecognized event "%s"' % arg])
            kinds.add(arg.upper())
        conn.events = frozenset(kinds)
        return ControlReply(250, ["OK"])

    def _cmd_extendcircuit(self, conn, args):
        if args[0] != "0":
            return ControlReply(552, ['Unknown circuit "%s"' % args[0]])
        path = [fp.lstrip("$").upper() for fp in args[1].split(",")]
        for fp in path:
            if fp not in self.relays:
                return ControlReply(552, ['No such router "%s"' % fp])
        circ = self.launch_circuit(path)
        return ControlReply(250, ["EXTENDED %d" % circ.id])

    def _cmd_attachstream(self, conn, args):
        sid, cid = int(args[0]), int(args[1])
        stream = self._streams.get(sid)
        if stream is None:
            return ControlReply(552, ['Unknown stream "%d"' % sid])
        if stream.attached.done():
            return ControlReply(555, ["Connection is not managed by controller."])
        circ = self._circuits.get(cid)
        if circ is None:
            return ControlReply(552, ['Unknown circuit "%d"' % cid])
        if circ.status != "BUILT":
            return ControlReply(551, ["Can't attach stream to non-open origin circuit"])
        stream.attached.set_result(circ)
        return ControlReply(250, ["OK"])

    def _cmd_closecircuit(self, conn, args):
        circ = self._circuits.get(int(args[0]))
        if circ is None or circ.status == "CLOSED":
            return ControlReply(552, ['Unknown circuit "%s"' % args[0]])
        asyncio.get_running_loop().call_soon(self.close_circuit, circ)
        return ControlReply(250, ["OK"])

    def _cmd_signal(self, conn, args):
        name = args[0].upper()
        if name == "NEWNYM":
            for circ in list(self._circuits.values()):
                circ.dirty = True
                # Idle client circuits are useless once dirty; retire them.
                if circ.client_owned and circ.status == "BUILT" and not circ.streams:
                    asyncio.get_running_loop().call_soon(self.close_circuit, circ, "FINISHED")
        elif name not in ("RELOAD", "HUP", "DEBUG", "DUMP", "CLEARDNSCACHE", "HEARTBEAT"):
            return ControlReply(552, ['Unrecognized signal code "%s"' % args[0]])
        return ControlReply(250, ["OK"])

    def _cmd_getinfo(self, conn, args):
        lines = []
        for key in args:
            if key == "version":
                lines.append("version=%s" % SIM_VERSION)
            elif key == "ns/all":
                lines.append("ns/all=\n" + format_consensus(self.config.relays).rstrip("\n"))
            elif key == "circuit-status":
                rows = ["%d %s %s PURPOSE=GENERAL" % (c.id, c.status,
                                                      ",".join(self._hop_name(fp) for fp in c.path))
                        for c in self._circuits.values() if c.status != "CLOSED"]
                lines.append("circuit-status=" + ("\n" + "\n".join(rows) if rows else ""))
            elif key == "stream-status":
                rows = ["%d %s %d %s" % (s.id, "SUCCEEDED" if s.writer else "NEW",
                                         s.circuit.id if s.circuit else 0, s.target)
                        for s in self._streams.values()]
                lines.append("stream-status=" + ("\n" + "\n".join(rows) if rows else ""))
            else:
                return ControlReply(552, ['Unrecognized key "%s"' % key])
        lines.append("OK")
        return ControlReply(250, lines)

    # -- SOCKS port ----------------------------------------------------------

    async def handle_socks(self, reader, writer):
        try:
            head = await reader.readexactly(2)
            methods = await reader.readexactly(head[1])
            if head[0] != 5 or 0 not in methods:
                writer.write(b"\x05\xff")
                return
            writer.write(b"\x05\x00")
            ver, cmd, _, atyp = await reader.readexactly(4)
            if atyp == socksio.ATYP_IPV4:
                host = socket.inet_ntoa(await reader.readexactly(4))
            elif atyp == socksio.ATYP_DOMAIN:
                length = (await reader.readexactly(1))[0]
                host = (await reader.readexactly(length)).decode("idna").lower()
            else:
                if atyp == socksio.ATYP_IPV6:
                    await reader.readexactly(16)
                await reader.readexactly(2)
                writer.write(self._socks_reply(0x08))
                return
            (port,) = struct.unpack(">H", await reader.readexactly(2))
        except (asyncio.IncompleteReadError, ConnectionError):
            return
        if cmd not in (socksio.CMD_CONNECT, socksio.CMD_RESOLVE):
            writer.write(self._socks_reply(0x07))
            return
        await self._run_stream(reader, writer, cmd, host, port)

    @staticmethod
    def _socks_reply(code, address="0.0.0.0", port=0):
        return bytes([5, code, 0, socksio.ATYP_IPV4]) + socket.inet_aton(address) + struct.pack(">H", port)

    async def _run_stream(self, reader, writer, cmd, host, port):
        source = writer.get_extra_info("peername") or ("127.0.0.1", 0)
        stream = SimStream(next(self._stream_ids), host, port, cmd, source)
        self._streams[stream.id] = stream
        resolving = cmd == socksio.CMD_RESOLVE
        try:
            self._stream_event(stream, "NEWRESOLVE" if resolving else "NEW",
                               SOURCE_ADDR="%s:%d" % (source[0], source[1]), PURPOSE="USER")
            if not self.leave_streams_unattached:
                circ = await self._client_circuit(port or 80)
                if circ is None:
                    writer.write(self._socks_reply(0x01))
                    self._stream_event(stream, "FAILED", REASON="NOROUTE")
                    return
                stream.attached.set_result(circ)
            try:
                circ = await asyncio.wait_for(asyncio.shield(stream.attached), self.config.stream_timeout)
            except asyncio.TimeoutError:
                writer.write(self._socks_reply(0x01))
                self._stream_event(stream, "FAILED", REASON="TIMEOUT")
                return
            stream.circuit = circ
            circ.streams.add(stream.id)
            self._stream_event(stream, "SENTRESOLVE" if resolving else "SENTCONNECT")
            await asyncio.sleep(2 * circ.latency)
            if circ.status != "BUILT":
                writer.write(self._socks_reply(0x01))
                self._stream_event(stream, "FAILED", REASON="DESTROY")
                return
            await self._exit_stream(stream, circ, reader, writer)
        finally:
            if stream.circuit is not None:
                stream.circuit.streams.discard(stream.id)
            self._streams.pop(stream.id, None)
            self._stream_event(stream, "CLOSED")

    async def _exit_stream(self, stream, circ, reader, writer):
        agent = self.agent(circ.exit)
        relay = self.relays[circ.exit]
        record = {"exit": circ.exit, "circuit": circ.id, "target": stream.target,
                  "kind": "resolve" if stream.command == socksio.CMD_RESOLVE else "connect"}
        self.inspection.connections.append(record)
        if stream.command == socksio.CMD_CONNECT and not relay.allows_port(stream.port):
            writer.write(self._socks_reply(0x02))
            self._stream_event(stream, "FAILED", REASON="EXITPOLICY")
            return
        if socksio.is_ipv4(stream.host):
            address = stream.host
        else:
            address = agent.resolve(stream.host)
        if address is None:
            writer.write(self._socks_reply(0x04))
            self._stream_event(stream, "FAILED", REASON="RESOLVEFAILED")
            return
        record["address"] = address
        if stream.command == socksio.CMD_RESOLVE:
            writer.write(self._socks_reply(0x00, address))
            self._stream_event(stream, "SUCCEEDED")
            return
        if (address, stream.port) not in SERVICES:
            writer.write(self._socks_reply(0x05))
            self._stream_event(stream, "FAILED", REASON="CONNECTREFUSED")
            return
        writer.write(self._socks_reply(0x00))
        self._stream_event(stream, "SUCCEEDED")
        transport = writer.transport
        if hasattr(transport, "set_latency"):
            transport.set_latency(circ.latency)
        stream.writer = writer
        await agent.serve(stream.host, stream.port, address, reader, writer, circ.id)


class SimHandles(tuple):
    """``(control, socks, inspection)``; unpacks like a plain triple."""

    def __new__(cls, control, socks, inspection):
        return super().__new__(cls, (control, socks, inspection))

    control = property(lambda self: self[0])
    socks = property(lambda self: self[1])
    inspection = property(lambda self: self[2])


def start_sim(config):
    """Create an in-process simulator; returns (control, socks, inspection).

    The endpoints work on whatever event loop they are first used from.
    """
    daemon = SimDaemon(config)
    ports = itertools.count(30000)
    control = MemoryEndpoint("control", daemon.handle_control, ports)
    socks = MemoryEndpoint("socks", daemon.handle_socks, ports)
    return SimHandles(control, socks, daemon.inspection)


async def serve_tcp(config, control_port, socks_port, host="127.0.0.1"):
    """Serve the simulator on real TCP ports; returns the two servers."""
    daemon = SimDaemon(config)

    async def guarded(handler, reader, writer):
        try:
            await handler(reader, writer)
        finally:
            writer.close()

    control = await asyncio.start_server(lambda r, w: guarded(daemon.handle_control, r, w), host, control_port)
    socks = await asyncio.start_server(lambda r, w: guarded(daemon.handle_socks, r, w), host, socks_port)
    return daemon, control, socks
