"""SOCKS5 client toward the routing daemon.

Domain names are handed to the daemon unresolved (address type 0x03) so the
exit performs the lookup.  Bare lookups use the daemon's RESOLVE extension
(command 0xF0), which answers with an IPv4 address in the bound-address
field.
"""

import asyncio
import ipaddress
import re
import socket
import struct
from dataclasses import dataclass

SOCKS_VERSION = 5
CMD_CONNECT = 0x01
CMD_RESOLVE = 0xF0
ATYP_IPV4 = 0x01
ATYP_DOMAIN = 0x03
ATYP_IPV6 = 0x04

REPLY_MESSAGES = {
    0x01: "general failure",
    0x02: "connection not allowed by ruleset",
    0x03: "network unreachable",
    0x04: "host unreachable",
    0x05: "connection refused",
    0x06: "TTL expired",
    0x07: "command not supported",
    0x08: "address type not supported",
}

_LABEL = re.compile(r"^(?!-)[A-Za-z0-9-]{1,63}(?<!-)$")


class SocksError(Exception):
    pass


class SocksRefused(SocksError):
    """The proxy rejected the greeting or the request itself."""


class TargetUnreachable(SocksError):
    def __init__(self, message, code=None):
        super().__init__(message)
        self.code = code


class ResolveFailed(SocksError):
    pass


class Timeout(SocksError, asyncio.TimeoutError):
    pass


def is_ipv4(host):
    try:
        ipaddress.IPv4Address(host)
        return True
    except ValueError:
        return False


def is_domain(host):
    if is_ipv4(host) or len(host) > 253:
        return False
    return all(_LABEL.match(label) for label in host.rstrip(".").split("."))


@dataclass(frozen=True)
class SocksTarget:
    host: str
    port: int
    resolve_remotely: bool = True

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ValueError("port %d out of range" % self.port)
        if not (is_ipv4(self.host) or is_domain(self.host)):
            raise ValueError("%r is neither an IPv4 address nor a domain name" % self.host)
        if self.resolve_remotely and not is_domain(self.host):
            # Nothing to resolve; an address is simply connected to.
            object.__setattr__(self, "resolve_remotely", False)

    @classmethod
    def parse(cls, text, resolve_remotely=True):
        host, _, port = text.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError("expected host:port, got %r" % text)
        return cls(host, int(port), resolve_remotely)

    def __str__(self):
        return "%s:%d" % (self.host, self.port)


class ByteStream:
    """A connected stream through the proxy, owned by one probe."""

    def __init__(self, reader, writer, target=None):
        self.reader = reader
        self.writer = writer
        self.target = target

    @property
    def local_port(self):
        return (self.writer.get_extra_info("sockname") or (None, None))[1]

    async def read(self, n=-1):
        return await self.reader.read(n)

    async def readexactly(self, n):
        return await self.reader.readexactly(n)

    async def readline(self):
        return await self.reader.readline()

    async def write(self, data):
        self.writer.write(data)
        await self.writer.drain()

    def close(self):
        self.writer.close()

    async def __aenter__(self):
        return self

    async def __aexit__(self, *exc):
        self.close()


def encode_request(cmd, host, port):
    if is_ipv4(host):
        addr = bytes([ATYP_IPV4]) + socket.inet_aton(host)
    else:
        raw = host.encode("idna")
        if len(raw) > 255:
            raise ValueError("domain name too long")
        addr = bytes([ATYP_DOMAIN, len(raw)]) + raw
    return bytes([SOCKS_VERSION, cmd, 0x00]) + addr + struct.pack(">H", port)


async def _read_reply(reader):
    head = await reader.readexactly(4)
    if head[0] != SOCKS_VERSION:
        raise SocksRefused("bad SOCKS version %d in reply" % head[0])
    atyp = head[3]
    if atyp == ATYP_IPV4:
        addr = socket.inet_ntoa(await reader.readexactly(4))
    elif atyp == ATYP_DOMAIN:
        length = (await reader.readexactly(1))[0]
        addr = (await reader.readexactly(length)).decode("ascii", "replace")
    elif atyp == ATYP_IPV6:
        addr = socket.inet_ntop(socket.AF_INET6, await reader.readexactly(16))
    else:
        raise SocksRefused("unknown address type %d in reply" % atyp)
    (port,) = struct.unpack(">H", await reader.readexactly(2))
    return head[1], addr, port


async def _greet(reader, writer):
    writer.write(bytes([SOCKS_VERSION, 1, 0x00]))
    await writer.drain()
    answer = await reader.readexactly(2)
    if answer[0] != SOCKS_VERSION or answer[1] != 0x00:
        raise SocksRefused("proxy refused no-auth greeting (%s)" % answer.hex())


async def _default_resolver(name):
    infos = await asyncio.get_running_loop().getaddrinfo(name, None, family=socket.AF_INET,
                                                         type=socket.SOCK_STREAM)
    return [info[4][0] for info in infos]


async def _exchange(socks_endpoint, cmd, host, port, on_bound):
    try:
        reader, writer = await socks_endpoint.open_connection()
    except ConnectionRefusedError as err:
        raise SocksRefused("SOCKS port %s refused the connection" % (socks_endpoint,)) from err
    try:
        await _greet(reader, writer)
        if on_bound is not None:
            await on_bound(writer)
        writer.write(encode_request(cmd, host, port))
        await writer.drain()
        code, addr, bound_port = await _read_reply(reader)
    except asyncio.IncompleteReadError:
        writer.close()
        raise SocksRefused("proxy closed the connection during the handshake") from None
    except BaseException:
        writer.close()
        raise
    return reader, writer, code, addr


async def connect_via(socks_endpoint, target, timeout, on_bound=None, resolver=None):
    """Open a stream to ``target`` through the proxy.

    ``on_bound`` is awaited with the stream writer after the greeting and
    before the CONNECT request goes out; the circuit manager reads the local
    port from it to claim the stream the daemon is about to announce.  ``resolver`` is only
    consulted when ``target.resolve_remotely`` is false and the host is a
    name.
    """
    async def attempt():
        host = target.host
        if not target.resolve_remotely and not is_ipv4(host):
            addresses = await (resolver or _default_resolver)(host)
            if not addresses:
                raise TargetUnreachable("local resolution of %s returned nothing" % host)
            host = addresses[0]
        reader, writer, code, _ = await _exchange(socks_endpoint, CMD_CONNECT, host,
                                                  target.port, on_bound)
        if code != 0x00:
            writer.close()
            message = "%s: %s" % (target, REPLY_MESSAGES.get(code, "error %d" % code))
            if code in (0x02, 0x07, 0x08):
                raise SocksRefused(message)
            raise TargetUnreachable(message, code)
        return ByteStream(reader, writer, target)

    try:
        return await asyncio.wait_for(attempt(), timeout)
    except asyncio.TimeoutError:
        raise Timeout("connecting to %s timed out after %.1fs" % (target, timeout)) from None


async def resolve_via(socks_endpoint, name, timeout, on_bound=None):
    """Ask the exit to resolve ``name``; returns a list of IPv4 addresses."""
    if not is_domain(name):
        raise ValueError("%r is not a domain name" % name)

    async def attempt():
        _, writer, code, addr = await _exchange(socks_endpoint, CMD_RESOLVE, name, 0, on_bound)
        writer.close()
        if code != 0x00:
            raise ResolveFailed("%s: %s" % (name, REPLY_MESSAGES.get(code, "error %d" % code)))
        if not is_ipv4(addr):
            raise ResolveFailed("%s: resolver answered with non-IPv4 %r" % (name, addr))
        return [addr]

    try:
        return await asyncio.wait_for(attempt(), timeout)
    except asyncio.TimeoutError:
        raise Timeout("resolving %s timed out after %.1fs" % (name, timeout)) from None
