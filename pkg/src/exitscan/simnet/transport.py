"""In-process byte pipes that look like TCP connections to asyncio code."""

import asyncio
import collections
import itertools


class _PipeEnd(asyncio.Transport):
    """One direction-pair endpoint; writes are delivered to ``peer``.

    ``delay`` is a callable returning the one-way latency for a write (or a
    constant).  Delivery order always matches write order.
    """

    def __init__(self, loop, protocol, sockname, peername, delay=0.0):
        super().__init__()
        self._loop = loop
        self._protocol = protocol
        self._extra = {"sockname": sockname, "peername": peername}
        self._delay = delay
        self.peer = None
        self._closing = False
        self._lost = False
        self._outbox = collections.deque()
        self._timer = None
        self._paused = False
        self._inbox = collections.deque()
        self._eof_pending = False

    # -- asyncio.Transport API ---------------------------------------------

    def get_extra_info(self, name, default=None):
        return self._extra.get(name, default)

    def is_closing(self):
        return self._closing

    def write(self, data):
        if self._closing or not data:
            return
        self._enqueue(("data", bytes(data)))

    def writelines(self, chunks):
        self.write(b"".join(chunks))

    def can_write_eof(self):
        return True

    def write_eof(self):
        if not self._closing:
            self._enqueue(("eof", None))

    def close(self):
        if self._closing:
            return
        self._closing = True
        self._enqueue(("eof", None))
        self._enqueue(("close", None))

    def abort(self):
        self.close()

    def get_write_buffer_size(self):
        return 0

    def set_write_buffer_limits(self, high=None, low=None):
        pass

    def pause_reading(self):
        self._paused = True

    def resume_reading(self):
        if not self._paused:
            return
        self._paused = False
        while self._inbox and not self._paused:
            self._receive(*self._inbox.popleft())

    def is_reading(self):
        return not self._paused

    def set_latency(self, delay):
        """Change the one-way delay of both directions for future writes."""
        self._delay = delay
        if self.peer is not None:
            self.peer._delay = delay

    # -- delivery ------------------------------------------------------------

    def _latency(self):
        delay = self._delay() if callable(self._delay) else self._delay
        return max(0.0, delay)

    def _enqueue(self, item):
        now = self._loop.time()
        due = now + self._latency()
        if self._outbox and due < self._outbox[-1][0]:
            due = self._outbox[-1][0]
        self._outbox.append((due, item))
        if self._timer is None:
            self._arm()

    def _arm(self):
        due = self._outbox[0][0]
        if due <= self._loop.time():
            self._timer = self._loop.call_soon(self._flush)
        else:
            self._timer = self._loop.call_at(due, self._flush)

    def _flush(self):
        self._timer = None
        now = self._loop.time()
        while self._outbox and self._outbox[0][0] <= now:
            _, item = self._outbox.popleft()
            self.peer._incoming(*item)
        if self._outbox:
            self._arm()

    def _incoming(self, kind, data):
        if self._paused:
            self._inbox.append((kind, data))
        else:
            self._receive(kind, data)

    def _receive(self, kind, data):
        if self._lost:
            return
        if kind == "data":
            self._protocol.data_received(data)
        elif kind == "eof":
            if not self._eof_pending:
                self._eof_pending = True
                self._protocol.eof_received()
        elif kind == "close":
            self._lose()

    def _lose(self):
        if self._lost:
            return
        self._lost = True
        self._closing = True
        self._loop.call_soon(self._protocol.connection_lost, None)
        if self.peer is not None and not self.peer._closing:
            self.peer._closing = True
            self.peer._enqueue(("close", None))
        if self.peer is not None and not self.peer._lost and not self.peer._outbox:
            self.peer._lose()


_ports = itertools.count(40000)


def stream_pair(delay=0.0, client_addr=None, server_addr=("10.0.0.1", 0)):
    """Return ``((c_reader, c_writer), (s_reader, s_writer))`` joined in memory."""
    loop = asyncio.get_running_loop()
    if client_addr is None:
        client_addr = ("127.0.0.1", next(_ports))
    c_reader = asyncio.StreamReader(loop=loop)
    s_reader = asyncio.StreamReader(loop=loop)
    c_proto = asyncio.StreamReaderProtocol(c_reader, loop=loop)
    s_proto = asyncio.StreamReaderProtocol(s_reader, loop=loop)
    c_end = _PipeEnd(loop, c_proto, client_addr, server_addr, delay)
    s_end = _PipeEnd(loop, s_proto, server_addr, client_addr, delay)
    c_end.peer, s_end.peer = s_end, c_end
    c_proto.connection_made(c_end)
    s_proto.connection_made(s_end)
    c_writer = asyncio.StreamWriter(c_end, c_proto, c_reader, loop)
    s_writer = asyncio.StreamWriter(s_end, s_proto, s_reader, loop)
    return (c_reader, c_writer), (s_reader, s_writer)


class MemoryEndpoint:
    """An endpoint whose connections are served by ``handler(reader, writer)``.

    Source ports are allocated from ``port_source`` so that a simulator can
    hand out reproducible ``SOURCE_ADDR`` values.
    """

    def __init__(self, name, handler, port_source=None):
        self.name = name
        self._handler = handler
        self._ports = port_source if port_source is not None else _ports
        self.accepting = True
        self._tasks = set()

    async def open_connection(self):
        if not self.accepting:
            raise ConnectionRefusedError("%s is not accepting connections" % self.name)
        client, server = stream_pair(client_addr=("127.0.0.1", next(self._ports)),
                                     server_addr=("127.0.0.1", 0))
        task = asyncio.get_running_loop().create_task(self._serve(*server))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return client

    async def _serve(self, reader, writer):
        try:
            await self._handler(reader, writer)
        finally:
            writer.close()

    def __str__(self):
        return "sim:%s" % self.name
