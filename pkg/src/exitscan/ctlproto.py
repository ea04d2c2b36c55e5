"""
Codec and client session for the routing daemon's line-based control port.

Only the handful of verbs the scanner needs is implemented::

  AUTHENTICATE   null auth or a hex-encoded cookie
  SETCONF        __LeaveStreamsUnattached / __DisablePredictedCircuits
  SETEVENTS      CIRC and STREAM events
  EXTENDCIRCUIT  "0" plus a comma-separated fingerprint path builds a new circuit
  ATTACHSTREAM   binds a stream to a circuit
  SIGNAL         NEWNYM
  GETINFO        consensus and circuit-status retrieval
  CLOSECIRCUIT

Replies are framed as in the public control-port grammar: ``250-`` and
``250+`` continuation lines belong to one logical reply, ``+`` lines carry a
dot-terminated data block, and status 650 marks an asynchronous event.

The codec is symmetric (``encode_command``/``decode_command`` and
``encode_reply``/``decode_reply``) so the simulator can serve the same wire
format the client speaks.
"""

import asyncio
import binascii
import collections
import enum
import logging
import os
import re
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

FINGERPRINT_RE = re.compile(r"^\$?[0-9A-Fa-f]{40}$")


class ControlError(Exception):
    """Base class for control-port failures."""


class InvalidToken(ControlError, ValueError):
    """A command argument contains control characters or is not ASCII."""


class InvalidCommand(ControlError, ValueError):
    """A command's arguments violate the verb's shape."""


class UnknownVerb(ControlError, ValueError):
    def __init__(self, verb):
        super().__init__("unrecognized command %r" % verb)
        self.verb = verb


class MalformedReply(ControlError, ValueError):
    pass


class AuthFailed(ControlError):
    pass


class ConnectionRefused(ControlError, ConnectionRefusedError):
    pass


class ConfigRejected(ControlError):
    pass


class SessionLost(ControlError, ConnectionError):
    pass


class CommandFailed(ControlError):
    def __init__(self, reply):
        super().__init__("%d %s" % (reply.status, " | ".join(reply.lines)))
        self.reply = reply


class Verb(str, enum.Enum):
    AUTHENTICATE = "AUTHENTICATE"
    SETCONF = "SETCONF"
    SETEVENTS = "SETEVENTS"
    EXTENDCIRCUIT = "EXTENDCIRCUIT"
    ATTACHSTREAM = "ATTACHSTREAM"
    SIGNAL = "SIGNAL"
    GETINFO = "GETINFO"
    CLOSECIRCUIT = "CLOSECIRCUIT"


def _is_decimal(token, positive=False):
    if not token.isdigit() or not token.isascii():
        return False
    return int(token) > 0 if positive else True


@dataclass(frozen=True)
class ControlCommand:
    verb: Verb
    args: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "verb", Verb(self.verb))
        object.__setattr__(self, "args", tuple(self.args))
        for token in self.args:
            _check_token(token)
        if self.verb is Verb.EXTENDCIRCUIT:
            if len(self.args) < 2 or not _is_decimal(self.args[0]):
                raise InvalidCommand("EXTENDCIRCUIT needs a circuit id and a path")
            if not all(FINGERPRINT_RE.match(fp) for fp in self.args[1].split(",")):
                raise InvalidCommand("EXTENDCIRCUIT path must be comma-separated fingerprints")
        elif self.verb is Verb.ATTACHSTREAM:
            if len(self.args) != 2 or not all(_is_decimal(a, positive=True) for a in self.args):
                raise InvalidCommand("ATTACHSTREAM needs a stream id and a circuit id")
        elif self.verb is Verb.CLOSECIRCUIT:
            if not self.args or not _is_decimal(self.args[0], positive=True):
                raise InvalidCommand("CLOSECIRCUIT needs a circuit id")
        elif self.verb in (Verb.SIGNAL, Verb.GETINFO, Verb.SETCONF) and not self.args:
            raise InvalidCommand("%s needs at least one argument" % self.verb.value)


def _check_token(token):
    if not isinstance(token, str) or not token:
        raise InvalidToken("empty or non-string token %r" % (token,))
    if not token.isascii():
        raise InvalidToken("non-ASCII token %r" % token)
    if any(ord(c) < 0x20 or ord(c) == 0x7F for c in token):
        raise InvalidToken("control character in token %r" % token)


def encode_command(cmd):
    """Serialize one command as a single CRLF-terminated line."""
    return (" ".join((cmd.verb.value,) + cmd.args) + "\r\n").encode("ascii")


def decode_command(data):
    """Parse one command line, as the daemon side sees it."""
    if not data.endswith(b"\r\n"):
        raise MalformedReply("command line is not CRLF-terminated")
    text = data[:-2].decode("ascii", errors="strict")
    if "\r" in text or "\n" in text:
        raise MalformedReply("embedded line break in command")
    parts = split_tokens(text)
    if not parts:
        raise MalformedReply("empty command")
    verb = parts[0].upper()
    if verb not in Verb.__members__:
        raise UnknownVerb(parts[0])
    return ControlCommand(Verb(verb), tuple(parts[1:]))


@dataclass
class ControlReply:
    status: int
    lines: list = field(default_factory=list)
    is_async: bool = False

    @property
    def ok(self):
        return self.status == 250


class EventKind(str, enum.Enum):
    CIRC = "CIRC"
    STREAM = "STREAM"
    OTHER = "OTHER"


class CircStatus(str, enum.Enum):
    LAUNCHED = "LAUNCHED"
    EXTENDED = "EXTENDED"
    BUILT = "BUILT"
    FAILED = "FAILED"
    CLOSED = "CLOSED"


class StreamStatus(str, enum.Enum):
    NEW = "NEW"
    NEWRESOLVE = "NEWRESOLVE"
    REMAP = "REMAP"
    SENTCONNECT = "SENTCONNECT"
    SENTRESOLVE = "SENTRESOLVE"
    SUCCEEDED = "SUCCEEDED"
    FAILED = "FAILED"
    CLOSED = "CLOSED"
    DETACHED = "DETACHED"


@dataclass
class AsyncEvent:
    """One asynchronous (650) notification.

    ``detail`` holds the positional extras under fixed names (``path`` for
    circuits, ``circuit_id`` and ``target`` for streams) followed by the
    keyword arguments in wire order.
    """

    kind: EventKind
    entity_id: int = None
    status: str = None
    detail: dict = field(default_factory=dict)
    raw: str = field(default="", compare=False)
    is_async: bool = field(default=True, init=False)

    @property
    def target(self):
        return self.detail.get("target")

    @property
    def source_port(self):
        addr = self.detail.get("SOURCE_ADDR")
        if not addr or ":" not in addr:
            return None
        port = addr.rpartition(":")[2]
        return int(port) if port.isdigit() else None


def split_tokens(text):
    """Split on spaces, keeping ``"quoted strings"`` (with escapes) intact."""
    tokens = []
    i, n = 0, len(text)
    while i < n:
        if text[i] == " ":
            i += 1
            continue
        j = i
        while j < n and text[j] != " ":
            if text[j] == '"':
                j += 1
                while j < n and text[j] != '"':
                    j += 2 if text[j] == "\\" else 1
                if j >= n:
                    raise MalformedReply("unterminated quoted string in %r" % text)
            j += 1
        tokens.append(text[i:j])
        i = j
    return tokens


def _unquote(value):
    if len(value) >= 2 and value[0] == value[-1] == '"':
        return re.sub(r"\\(.)", r"\1", value[1:-1])
    return value


def _quote(value):
    if value and not any(c in value for c in ' "\\'):
        return value
    return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _keywords(tokens):
    out = {}
    for token in tokens:
        key, sep, value = token.partition("=")
        if not sep:
            raise MalformedReply("expected KEY=VALUE, got %r" % token)
        out[key] = _unquote(value)
    return out


def parse_event(text):
    """Build an AsyncEvent from the text after ``650 ``."""
    tokens = split_tokens(text)
    if not tokens:
        raise MalformedReply("empty event")
    kind = tokens[0]
    try:
        if kind == "CIRC" and len(tokens) >= 3:
            status = CircStatus(tokens[2]).value
            rest = tokens[3:]
            detail = {}
            if rest and "=" not in rest[0]:
                detail["path"] = rest.pop(0)
            detail.update(_keywords(rest))
            return AsyncEvent(EventKind.CIRC, int(tokens[1]), status, detail, raw=text)
        if kind == "STREAM" and len(tokens) >= 5:
            status = StreamStatus(tokens[2]).value
            detail = {"circuit_id": int(tokens[3]), "target": tokens[4]}
            detail.update(_keywords(tokens[5:]))
            return AsyncEvent(EventKind.STREAM, int(tokens[1]), status, detail, raw=text)
    except ValueError:
        pass
    # Anything we do not model is surfaced as an opaque event.
    return AsyncEvent(EventKind.OTHER, None, kind, {}, raw=text)


def format_event(event):
    """Inverse of :func:`parse_event`."""
    if event.kind is EventKind.OTHER:
        return event.raw
    detail = dict(event.detail)
    parts = [event.kind.value, str(event.entity_id), str(event.status)]
    if event.kind is EventKind.CIRC:
        if "path" in detail:
            parts.append(detail.pop("path"))
    else:
        parts.append(str(detail.pop("circuit_id")))
        parts.append(detail.pop("target"))
    parts.extend("%s=%s" % (k, _quote(str(v))) for k, v in detail.items())
    return " ".join(parts)


def encode_event(event):
    return ("650 " + format_event(event) + "\r\n").encode("utf-8")


def encode_reply(reply):
    """Serialize a reply; a line containing newlines becomes a data block."""
    if not reply.lines:
        raise ValueError("a reply needs at least one line")
    out = []
    last = len(reply.lines) - 1
    for i, line in enumerate(reply.lines):
        if "\n" in line:
            head, _, body = line.partition("\n")
            out.append("%03d+%s" % (reply.status, head))
            for data_line in body.split("\n"):
                out.append("." + data_line if data_line.startswith(".") else data_line)
            out.append(".")
            if i == last:
                out.append("%03d OK" % reply.status)
        else:
            out.append("%03d%s%s" % (reply.status, " " if i == last else "-", line))
    return ("\r\n".join(out) + "\r\n").encode("utf-8")


def decode_reply(data):
    """Decode one complete message into a ControlReply or an AsyncEvent."""
    if not data.endswith(b"\r\n"):
        raise MalformedReply("truncated message (no CRLF)")
    lines = data[:-2].decode("utf-8", errors="replace").split("\r\n")
    status = None
    out = []
    i = 0
    while i < len(lines):
        line = lines[i]
        if len(line) < 4 or not line[:3].isdigit() or line[3] not in " -+":
            raise MalformedReply("bad status line %r" % line)
        code = int(line[:3])
        if status is None:
            status = code
        elif code != status:
            raise MalformedReply("status changed mid-reply (%d then %d)" % (status, code))
        sep, text = line[3], line[4:]
        i += 1
        if sep == "+":
            body = []
            while i < len(lines) and lines[i] != ".":
                body.append(lines[i][1:] if lines[i].startswith("..") else lines[i])
                i += 1
            if i >= len(lines):
                raise MalformedReply("unterminated data block")
            i += 1
            out.append(text + "\n" + "\n".join(body))
            continue
        out.append(text)
        if sep == " ":
            if i != len(lines):
                raise MalformedReply("data after final reply line")
            break
    else:
        raise MalformedReply("reply has no final line")
    if status == 650:
        if len(out) == 1:
            return parse_event(out[0])
        return AsyncEvent(EventKind.OTHER, None, out[0].split(" ", 1)[0], {}, raw="\n".join(out))
    # Data blocks are followed by a bare "OK" terminator which carries no content.
    if len(out) > 1 and out[-1] == "OK" and "\n" in out[-2]:
        out.pop()
    return ControlReply(status, out)


async def read_message(reader):
    """Read one framed reply (possibly multi-line) from ``reader``."""
    chunks = []
    in_data = False
    while True:
        line = await reader.readline()
        if not line:
            if chunks:
                raise MalformedReply("connection closed mid-reply")
            raise SessionLost("control connection closed")
        if not line.endswith(b"\r\n"):
            line = line.rstrip(b"\n") + b"\r\n"
        chunks.append(line)
        if in_data:
            if line == b".\r\n":
                in_data = False
            continue
        if len(line) >= 6 and line[3:4] == b"+":
            in_data = True
        elif len(line) >= 5 and line[3:4] == b" ":
            return b"".join(chunks)


class ControlSession:
    """An authenticated control connection.

    Commands are serialized: at most one synchronous command is outstanding
    and each command goes out in a single write.  Asynchronous events are
    fanned out to every queue returned by :meth:`subscribe`; a ``None`` in a
    queue means the session ended.
    """

    def __init__(self, reader, writer):
        self._reader = reader
        self._writer = writer
        self._lock = asyncio.Lock()
        self._pending = collections.deque()
        self._listeners = []
        self._closed = False
        self._reader_task = asyncio.get_running_loop().create_task(self._read_loop())

    @property
    def closed(self):
        return self._closed

    def subscribe(self):
        queue = asyncio.Queue()
        self._listeners.append(queue)
        if self._closed:
            queue.put_nowait(None)
        return queue

    def unsubscribe(self, queue):
        if queue in self._listeners:
            self._listeners.remove(queue)

    async def _read_loop(self):
        try:
            while True:
                message = decode_reply(await read_message(self._reader))
                if message.is_async:
                    for queue in list(self._listeners):
                        queue.put_nowait(message)
                elif self._pending:
                    fut = self._pending.popleft()
                    if not fut.done():
                        fut.set_result(message)
                else:
                    log.warning("Dropping unsolicited reply %r.", message)
        except (SessionLost, MalformedReply, ConnectionError) as err:
            self._shutdown(err)
        except asyncio.CancelledError:
            self._shutdown(SessionLost("session closed"))
            raise

    def _shutdown(self, err):
        if self._closed:
            return
        self._closed = True
        while self._pending:
            fut = self._pending.popleft()
            if not fut.done():
                fut.set_exception(SessionLost(str(err)))
        for queue in self._listeners:
            queue.put_nowait(None)

    async def send(self, cmd):
        async with self._lock:
            if self._closed:
                raise SessionLost("control session is closed")
            fut = asyncio.get_running_loop().create_future()
            self._pending.append(fut)
            try:
                self._writer.write(encode_command(cmd))
                await self._writer.drain()
            except ConnectionError as err:
                self._shutdown(err)
            return await fut

    async def request(self, verb, *args):
        """Send a command and raise :class:`CommandFailed` unless it succeeded."""
        reply = await self.send(ControlCommand(verb, args))
        if not reply.ok:
            raise CommandFailed(reply)
        return reply

    async def get_info(self, key):
        reply = await self.request(Verb.GETINFO, key)
        for line in reply.lines:
            name, sep, value = line.partition("=")
            if sep and name == key:
                return value[1:] if value.startswith("\n") else value
        raise MalformedReply("GETINFO reply lacks %r" % key)

    async def extend_circuit(self, path):
        reply = await self.request(Verb.EXTENDCIRCUIT, "0", ",".join(path))
        parts = reply.lines[0].split()
        if len(parts) != 2 or parts[0] != "EXTENDED" or not parts[1].isdigit():
            raise MalformedReply("unexpected EXTENDCIRCUIT reply %r" % reply.lines[0])
        return int(parts[1])

    async def attach_stream(self, stream_id, circuit_id):
        return await self.send(ControlCommand(Verb.ATTACHSTREAM, (str(stream_id), str(circuit_id))))

    async def close_circuit(self, circuit_id):
        return await self.send(ControlCommand(Verb.CLOSECIRCUIT, (str(circuit_id),)))

    async def signal(self, name):
        await self.request(Verb.SIGNAL, name)

    async def set_events(self, kinds):
        await self.request(Verb.SETEVENTS, *kinds)

    async def close(self):
        self._reader_task.cancel()
        try:
            await self._reader_task
        except asyncio.CancelledError:
            pass
        self._writer.close()

    async def __aenter__(self):
        return self

    async def __aexit__(self, *exc):
        await self.close()


def read_cookie(path):
    with open(os.fspath(path), "rb") as fh:
        return fh.read()


async def open_session(endpoint, auth=None):
    """Connect to ``endpoint`` and authenticate.

    ``auth`` is ``None`` for null authentication, the raw cookie bytes, or a
    path to the cookie file.  Events are not subscribed yet.
    """
    try:
        reader, writer = await endpoint.open_connection()
    except ConnectionRefusedError as err:
        raise ConnectionRefused("control port %s refused the connection" % (endpoint,)) from err
    session = ControlSession(reader, writer)
    if auth is None:
        args = ()
    else:
        cookie = auth if isinstance(auth, (bytes, bytearray)) else read_cookie(auth)
        args = (binascii.hexlify(cookie).decode("ascii").upper(),)
    try:
        reply = await session.send(ControlCommand(Verb.AUTHENTICATE, args))
    except SessionLost:
        await session.close()
        raise AuthFailed("control port closed the connection during authentication")
    if not reply.ok:
        await session.close()
        raise AuthFailed(" ".join(reply.lines))
    return session


SCANNING_CONF = (("__LeaveStreamsUnattached", "1"), ("__DisablePredictedCircuits", "1"))


async def configure_scanning(session):
    """Take over stream attachment and stop preemptive circuit building."""
    settings = tuple("%s=%s" % kv for kv in SCANNING_CONF)
    for cmd in (ControlCommand(Verb.SETCONF, settings),
                ControlCommand(Verb.SETEVENTS, ("CIRC", "STREAM"))):
        reply = await session.send(cmd)
        if not reply.ok:
            raise ConfigRejected("%s rejected: %d %s" % (cmd.verb.value, reply.status,
                                                          " ".join(reply.lines)))
