"""Addresses the clients can dial.

Anything with an ``open_connection()`` coroutine returning an asyncio
``(reader, writer)`` pair is an endpoint.  TCP endpoints talk to a real
routing daemon; the simulator hands out in-process endpoints with the same
surface.
"""

import asyncio
from typing import NamedTuple


class TcpEndpoint(NamedTuple):
    host: str
    port: int

    async def open_connection(self):
        return await asyncio.open_connection(self.host, self.port)

    def __str__(self):
        return "%s:%d" % (self.host, self.port)


def parse_endpoint(text, default_host="127.0.0.1"):
    """Parse ``host:port`` or a bare port number."""
    text = text.strip()
    if ":" in text:
        host, _, port = text.rpartition(":")
    else:
        host, port = default_host, text
    try:
        port = int(port)
    except ValueError:
        raise ValueError("bad endpoint %r: port is not a number" % text) from None
    if not 0 < port < 65536:
        raise ValueError("bad endpoint %r: port out of range" % text)
    return TcpEndpoint(host or default_host, port)
