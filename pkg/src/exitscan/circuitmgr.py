"""Builds scanning circuits, pairs probe streams with them, and keeps count.

One dispatcher task owns all circuit and stream bookkeeping; it consumes the
control session's event queue.  Probes never touch circuit state: they ask
for a stream and the manager attaches it when the daemon announces it.

Streams are claimed by their local source port, which the daemon reports
in ``SOURCE_ADDR``.  Only when an event carries no source address does the
manager fall back to matching on the target, first come first served.
"""

import asyncio
import collections
import enum
import itertools
import logging
from dataclasses import dataclass, field

from exitscan import ctlproto, socksio
from exitscan.ctlproto import CircStatus, EventKind, StreamStatus
from exitscan.probes import PROBE_PORTS, ProbeName, ProbeResult, ProbeSpec, Verdict, run_probe

log = logging.getLogger(__name__)

DEFAULT_CIRCUIT_TIMEOUT = 60.0
DEFAULT_PROBE_TIMEOUT = 50.0


class CircuitState(str, enum.Enum):
    PENDING = "PENDING"
    BUILT = "BUILT"
    FAILED = "FAILED"
    CLOSED = "CLOSED"


class FailureReason(str, enum.Enum):
    TIMEOUT = "TIMEOUT"
    DESTROYED = "DESTROYED"
    OTHER = "OTHER"


class CircuitError(Exception):
    pass


class BuildTimeout(CircuitError, asyncio.TimeoutError):
    pass


class BuildDestroyed(CircuitError):
    pass


class BuildFailed(CircuitError):
    pass


class AttachRejected(CircuitError):
    def __init__(self, reply):
        super().__init__("%d %s" % (reply.status, " ".join(reply.lines)))
        self.reply = reply


class CircuitGone(CircuitError):
    pass


SessionLost = ctlproto.SessionLost


@dataclass
class Circuit:
    circuit_id: int
    path: tuple
    state: CircuitState = CircuitState.PENDING
    created_at: float = 0.0
    built_at: float = None
    closed_at: float = None
    failure_reason: FailureReason = None
    _done: asyncio.Future = field(default=None, repr=False, compare=False)

    @property
    def exit_fp(self):
        return self.path[-1]


@dataclass
class ScanAccounting:
    circuits_attempted: int = 0
    circuits_built: int = 0
    circuits_failed_timeout: int = 0
    circuits_failed_destroyed: int = 0
    circuits_failed_other: int = 0
    per_probe_duration: dict = field(default_factory=lambda: collections.defaultdict(list))
    peak_pending: int = 0
    peak_active: int = 0

    @property
    def circuits_failed(self):
        return self.circuits_failed_timeout + self.circuits_failed_destroyed + self.circuits_failed_other

    @property
    def circuits_pending(self):
        return self.circuits_attempted - self.circuits_built - self.circuits_failed

    @property
    def built_fraction(self):
        return self.circuits_built / self.circuits_attempted if self.circuits_attempted else 0.0

    def to_dict(self):
        return {
            "circuits_attempted": self.circuits_attempted,
            "circuits_built": self.circuits_built,
            "circuits_failed_timeout": self.circuits_failed_timeout,
            "circuits_failed_destroyed": self.circuits_failed_destroyed,
            "circuits_failed_other": self.circuits_failed_other,
            "per_probe_duration": {k: list(v) for k, v in sorted(self.per_probe_duration.items())},
            "peak_pending": self.peak_pending,
        }

    @classmethod
    def from_dict(cls, data):
        acc = cls(**{k: data[k] for k in ("circuits_attempted", "circuits_built",
                                          "circuits_failed_timeout", "circuits_failed_destroyed",
                                          "circuits_failed_other")})
        acc.per_probe_duration.update({k: list(v) for k, v in data.get("per_probe_duration", {}).items()})
        acc.peak_pending = data.get("peak_pending", 0)
        return acc


class _Claim:
    """A stream a probe is about to open and wants attached to ``circuit``."""

    def __init__(self, circuit, target):
        self.circuit = circuit
        self.target = target
        self.port = None
        self.stream_id = asyncio.get_running_loop().create_future()
        self.events = []
        self.error = None


class ProbeContext:
    """What a probe may do with the circuit it was given."""

    def __init__(self, manager, circuit, relay=None):
        self._manager = manager
        self.circuit = circuit
        self.relay = relay
        self.exit_fp = circuit.exit_fp

    async def open_stream(self, target, timeout):
        return await self._manager.open_stream(self.circuit, target, timeout)

    async def resolve(self, name, timeout):
        return await self._manager.resolve(self.circuit, name, timeout)


class CircuitManager:
    def __init__(self, session, socks_endpoint, first_hops, circuit_timeout=DEFAULT_CIRCUIT_TIMEOUT,
                 probe_timeout=DEFAULT_PROBE_TIMEOUT, middle_hops=(), rotate_every=1, retries=0,
                 resolver=None, stream_timeout=30.0):
        if isinstance(first_hops, str):
            first_hops = [first_hops]
        self.first_hops = [fp.lstrip("$").upper() for fp in first_hops]
        if not self.first_hops:
            raise ValueError("at least one first hop is required")
        self.session = session
        self.socks = socks_endpoint
        self.circuit_timeout = circuit_timeout
        self.probe_timeout = probe_timeout
        self.middle_hops = [fp.lstrip("$").upper() for fp in middle_hops]
        self.rotate_every = max(1, rotate_every)
        self.retries = retries
        self.resolver = resolver
        self.stream_timeout = stream_timeout
        self.accounting = ScanAccounting()
        self._circuits = {}
        self._early = collections.defaultdict(list)
        self._retired = set()
        self._claims_by_port = {}
        self._claims_by_target = collections.defaultdict(collections.deque)
        self._streams = {}
        self._queue = None
        self._dispatcher = None
        self._hop_counter = itertools.count()
        self._pending = 0
        self._active = 0
        self._lost = None

    # -- lifecycle -------------------------------------------------------------

    async def start(self):
        if self._dispatcher is None:
            self._queue = self.session.subscribe()
            self._dispatcher = asyncio.get_running_loop().create_task(self._dispatch())
        return self

    async def stop(self):
        if self._dispatcher is not None:
            self._dispatcher.cancel()
            try:
                await self._dispatcher
            except asyncio.CancelledError:
                pass
            self.session.unsubscribe(self._queue)
            self._dispatcher = None

    async def __aenter__(self):
        return await self.start()

    async def __aexit__(self, *exc):
        await self.stop()

    # -- event dispatch --------------------------------------------------------

    async def _dispatch(self):
        while True:
            event = await self._queue.get()
            if event is None:
                self._session_lost()
                return
            if event.kind is EventKind.CIRC:
                circ = self._circuits.get(event.entity_id)
                if circ is None:
                    if event.entity_id in self._retired:
                        if event.status == CircStatus.CLOSED.value:
                            self._retired.discard(event.entity_id)
                    else:
                        self._early[event.entity_id].append(event)
                else:
                    self._on_circ(circ, event)
            elif event.kind is EventKind.STREAM:
                self._on_stream(event)

    def _session_lost(self):
        self._lost = SessionLost("control session ended")
        for circ in self._circuits.values():
            if circ._done is not None and not circ._done.done():
                circ._done.set_exception(self._lost)
        for claim in list(self._claims_by_port.values()):
            if not claim.stream_id.done():
                claim.stream_id.set_exception(self._lost)

    def _on_circ(self, circ, event):
        loop = asyncio.get_running_loop()
        status = event.status
        if status == CircStatus.BUILT.value and circ.state is CircuitState.PENDING:
            circ.state = CircuitState.BUILT
            circ.built_at = loop.time()
            if not circ._done.done():
                circ._done.set_result(circ)
        elif status == CircStatus.FAILED.value and circ.state is CircuitState.PENDING:
            reason = event.detail.get("REASON", "")
            circ.failure_reason = {"DESTROYED": FailureReason.DESTROYED,
                                   "TIMEOUT": FailureReason.TIMEOUT}.get(reason, FailureReason.OTHER)
            circ.state = CircuitState.FAILED
            if not circ._done.done():
                circ._done.set_result(circ)
        elif status == CircStatus.CLOSED.value:
            if circ.state is CircuitState.PENDING:
                circ.state = CircuitState.FAILED
                circ.failure_reason = FailureReason.OTHER
                if not circ._done.done():
                    circ._done.set_result(circ)
            elif circ.state is CircuitState.BUILT:
                circ.state = CircuitState.CLOSED
            circ.closed_at = loop.time()

    def _on_stream(self, event):
        status = event.status
        if status in (StreamStatus.NEW.value, StreamStatus.NEWRESOLVE.value):
            claim = None
            port = event.source_port
            if port is not None:
                claim = self._claims_by_port.pop(port, None)
            if claim is None and port is None:
                # No source address to go on: oldest claim for the same target.
                waiting = self._claims_by_target.get(event.target)
                while waiting and claim is None:
                    candidate = waiting.popleft()
                    if not candidate.stream_id.done():
                        claim = candidate
            if claim is None:
                return
            if claim.port is not None:
                self._claims_by_port.pop(claim.port, None)
            self._streams[event.entity_id] = claim
            claim.events.append(event)
            if not claim.stream_id.done():
                claim.stream_id.set_result(event.entity_id)
            return
        claim = self._streams.get(event.entity_id)
        if claim is not None:
            claim.events.append(event)
            if status in (StreamStatus.CLOSED.value, StreamStatus.FAILED.value):
                if status == StreamStatus.CLOSED.value:
                    self._streams.pop(event.entity_id, None)

    # -- circuits --------------------------------------------------------------

    def next_first_hop(self, exit_fp):
        n = next(self._hop_counter) // self.rotate_every
        hops = [fp for fp in self.first_hops if fp != exit_fp] or self.first_hops
        return hops[n % len(hops)]

    async def build_circuit(self, first_hop, exit_fp, timeout=None):
        """Extend a new circuit ``first_hop -> [middle] -> exit`` and wait for it."""
        first_hop, exit_fp = first_hop.lstrip("$").upper(), exit_fp.lstrip("$").upper()
        if first_hop == exit_fp:
            raise ValueError("first hop and exit must differ")
        if self._lost is not None:
            raise self._lost
        timeout = self.circuit_timeout if timeout is None else timeout
        loop = asyncio.get_running_loop()
        path = tuple([first_hop] + [m for m in self.middle_hops if m not in (first_hop, exit_fp)][:1]
                     + [exit_fp])
        acc = self.accounting
        acc.circuits_attempted += 1
        self._pending += 1
        acc.peak_pending = max(acc.peak_pending, self._pending)
        created = loop.time()
        circ = None
        try:
            try:
                circuit_id = await asyncio.wait_for(self.session.extend_circuit(path), timeout)
            except ctlproto.CommandFailed as err:
                acc.circuits_failed_other += 1
                raise BuildFailed("EXTENDCIRCUIT rejected: %s" % err) from None
            except asyncio.TimeoutError:
                acc.circuits_failed_timeout += 1
                raise BuildTimeout("no EXTENDCIRCUIT reply within %.1fs" % timeout) from None
            except ctlproto.SessionLost:
                acc.circuits_failed_other += 1
                raise
            circ = Circuit(circuit_id, path, created_at=created, _done=loop.create_future())
            self._circuits[circuit_id] = circ
            for event in self._early.pop(circuit_id, ()):
                self._on_circ(circ, event)
            remaining = max(0.0, timeout - (loop.time() - created))
            try:
                await asyncio.wait_for(asyncio.shield(circ._done), remaining)
            except asyncio.TimeoutError:
                circ.state = CircuitState.FAILED
                circ.failure_reason = FailureReason.TIMEOUT
                acc.circuits_failed_timeout += 1
                await self._close_quietly(circ)
                raise BuildTimeout("circuit %d not built within %.1fs" % (circuit_id, timeout)) from None
            except SessionLost:
                acc.circuits_failed_other += 1
                raise
            if circ.state is CircuitState.BUILT:
                acc.circuits_built += 1
                return circ
            if circ.failure_reason is FailureReason.DESTROYED:
                acc.circuits_failed_destroyed += 1
                raise BuildDestroyed("circuit %d destroyed by %s" % (circuit_id, exit_fp[:8]))
            if circ.failure_reason is FailureReason.TIMEOUT:
                acc.circuits_failed_timeout += 1
                raise BuildTimeout("circuit %d timed out in the daemon" % circuit_id)
            acc.circuits_failed_other += 1
            raise BuildFailed("circuit %d failed" % circuit_id)
        finally:
            self._pending -= 1

    async def _close_quietly(self, circ):
        try:
            await self.session.close_circuit(circ.circuit_id)
        except ctlproto.ControlError:
            pass
        if circ.state is CircuitState.BUILT:
            circ.state = CircuitState.CLOSED
        if self._circuits.pop(circ.circuit_id, None) is not None and circ.closed_at is None:
            self._retired.add(circ.circuit_id)

    async def close_circuit(self, circ):
        await self._close_quietly(circ)

    # -- streams ---------------------------------------------------------------

    async def attach_stream(self, stream_id, circuit):
        if circuit.state is not CircuitState.BUILT:
            raise CircuitGone("circuit %d is %s" % (circuit.circuit_id, circuit.state.value))
        reply = await self.session.attach_stream(stream_id, circuit.circuit_id)
        if reply.ok:
            return
        if reply.status == 551 or (reply.status == 552 and "circuit" in " ".join(reply.lines).lower()):
            raise CircuitGone("circuit %d: %s" % (circuit.circuit_id, " ".join(reply.lines)))
        raise AttachRejected(reply)

    def _claim(self, circuit, target):
        claim = _Claim(circuit, target)
        self._claims_by_target[target].append(claim)
        loop = asyncio.get_running_loop()

        async def on_bound(writer):
            sockname = writer.get_extra_info("sockname")
            if sockname:
                claim.port = sockname[1]
                self._claims_by_port[claim.port] = claim
            task = loop.create_task(self._attach_when_announced(claim, writer))
            claim.task = task

        return claim, on_bound

    async def _attach_when_announced(self, claim, writer):
        try:
            stream_id = await claim.stream_id
            await self.attach_stream(stream_id, claim.circuit)
        except asyncio.CancelledError:
            raise
        except Exception as err:
            claim.error = err
            writer.close()

    def _release(self, claim):
        if claim.port is not None:
            self._claims_by_port.pop(claim.port, None)
        try:
            self._claims_by_target[claim.target].remove(claim)
        except ValueError:
            pass
        if not self._claims_by_target[claim.target]:
            self._claims_by_target.pop(claim.target, None)
        task = getattr(claim, "task", None)
        if task is not None and not task.done():
            task.cancel()

    async def open_stream(self, circuit, target, timeout=None):
        """Connect through the SOCKS port and attach the stream to ``circuit``."""
        if circuit.state is not CircuitState.BUILT:
            raise CircuitGone("circuit %d is %s" % (circuit.circuit_id, circuit.state.value))
        timeout = self.stream_timeout if timeout is None else timeout
        if not isinstance(target, socksio.SocksTarget):
            target = socksio.SocksTarget.parse(str(target))
        claim, on_bound = self._claim(circuit, str(target))
        try:
            stream = await socksio.connect_via(self.socks, target, timeout, on_bound=on_bound,
                                               resolver=self.resolver)
        except socksio.SocksError as err:
            if claim.error is not None:
                raise claim.error from err
            raise
        finally:
            self._release(claim)
        stream.exit_fp = circuit.exit_fp
        stream.events = claim.events
        return stream

    async def resolve(self, circuit, name, timeout=None):
        """Have the exit of ``circuit`` resolve ``name``."""
        if circuit.state is not CircuitState.BUILT:
            raise CircuitGone("circuit %d is %s" % (circuit.circuit_id, circuit.state.value))
        timeout = self.stream_timeout if timeout is None else timeout
        claim, on_bound = self._claim(circuit, "%s:0" % name)
        try:
            return await socksio.resolve_via(self.socks, name, timeout, on_bound=on_bound)
        except socksio.SocksError as err:
            if claim.error is not None:
                raise claim.error from err
            raise
        finally:
            self._release(claim)

    # -- scanning --------------------------------------------------------------

    async def _build_with_retries(self, exit_fp):
        last = None
        for _ in range(self.retries + 1):
            try:
                return await self.build_circuit(self.next_first_hop(exit_fp), exit_fp)
            except (BuildTimeout, BuildDestroyed, BuildFailed) as err:
                last = err
        raise last

    async def _scan_exit(self, relay, specs):
        loop = asyncio.get_running_loop()
        fp = relay.fingerprint if hasattr(relay, "fingerprint") else str(relay)
        results = {}
        runnable = []
        for i, spec in enumerate(specs):
            port = spec.port
            if port is not None and hasattr(relay, "allows_port") and not relay.allows_port(port):
                results[i] = ProbeResult(fp, spec.name.value, Verdict.ERROR,
                                         error="PolicyRejected: exit policy rejects port %d" % port)
            else:
                runnable.append((i, spec))
        if runnable:
            started = loop.time()
            try:
                circ = await self._build_with_retries(fp)
            except (CircuitError, SessionLost) as err:
                for i, spec in runnable:
                    results[i] = ProbeResult(fp, spec.name.value, Verdict.ERROR,
                                                duration=loop.time() - started,
                                                error="%s: %s" % (type(err).__name__, err))
            else:
                build_time = circ.built_at - circ.created_at
                ctx = ProbeContext(self, circ, relay)
                try:
                    for i, spec in runnable:
                        results[i] = await self._run_one(ctx, spec, build_time)
                finally:
                    await self._close_quietly(circ)
        return [results[i] for i in range(len(specs))]

    async def _run_one(self, ctx, spec, build_time):
        loop = asyncio.get_running_loop()
        started = loop.time()
        try:
            result = await asyncio.wait_for(run_probe(ctx, spec, self.stream_timeout), self.probe_timeout)
        except asyncio.TimeoutError:
            result = ProbeResult(ctx.exit_fp, spec.name.value, Verdict.ERROR,
                                 error="probe exceeded %.1fs" % self.probe_timeout)
        except (CircuitError, SessionLost, socksio.SocksError, ConnectionError) as err:
            result = ProbeResult(ctx.exit_fp, spec.name.value, Verdict.ERROR,
                                 error="%s: %s" % (type(err).__name__, err))
        result.duration = build_time + (loop.time() - started)
        self.accounting.per_probe_duration[spec.name.value].append(result.duration)
        return result

    async def run_scan(self, exits, probe, parallelism=10):
        """Probe every exit once; returns (results, accounting).

        ``probe`` is a ProbeSpec or a list of them; with several, each exit
        gets one circuit and the probes run on it in order.  Results follow
        the input order, exit-major.
        """
        if parallelism < 1:
            raise ValueError("parallelism must be at least 1")
        specs = [probe] if isinstance(probe, ProbeSpec) or not isinstance(probe, (list, tuple)) else list(probe)
        await self.start()
        sem = asyncio.Semaphore(parallelism)
        per_exit = [None] * len(exits)

        async def one(i, relay):
            async with sem:
                self._active += 1
                self.accounting.peak_active = max(self.accounting.peak_active, self._active)
                try:
                    per_exit[i] = await self._scan_exit(relay, specs)
                finally:
                    self._active -= 1

        await asyncio.gather(*(one(i, relay) for i, relay in enumerate(exits)))
        results = [r for batch in per_exit for r in batch]
        return results, self.accounting

    async def probe_once(self, relay, spec):
        """One probe over a fresh circuit; suitable as an estimator scan-fn.

        ``relay`` is a descriptor (its exit policy is honoured) or a bare
        fingerprint.
        """
        await self.start()
        (result,) = await self._scan_exit(relay, [spec])
        return result


__all__ = [
    "AttachRejected", "BuildDestroyed", "BuildFailed", "BuildTimeout", "Circuit", "CircuitGone",
    "CircuitManager", "CircuitState", "FailureReason", "ProbeContext", "ScanAccounting",
    "SessionLost", "PROBE_PORTS", "ProbeName",
]
