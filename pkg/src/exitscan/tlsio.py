"""TLS handshakes driven over asyncio streams through memory BIOs.

The client side never verifies anything: a scanner must capture whatever
certificate an attacker presents, including weak keys and SHA-1 signatures,
so the security level is dropped to 0.

Python's ssl module (before 3.13) only exposes the leaf certificate.  The
full chain is recovered by passively parsing the server's plaintext
Certificate handshake message, which is only possible when TLS 1.2 or older
is negotiated; under TLS 1.3 the chain is just the leaf.
"""

import asyncio
import ssl
import struct
import warnings
from dataclasses import dataclass, field

TLS_HANDSHAKE = 22
HS_CERTIFICATE = 11


@dataclass(frozen=True)
class ClientProfile:
    """Shape of the client hello: ciphers, ALPN and protocol bounds."""

    name: str
    ciphers: str
    alpn: tuple = ()
    min_version: ssl.TLSVersion = ssl.TLSVersion.TLSv1
    max_version: ssl.TLSVersion = ssl.TLSVersion.TLSv1_2


# Cipher order of a Firefox-24-era browser (the TorBrowser base at the time).
TORBROWSER_PROFILE = ClientProfile(
    name="torbrowser",
    ciphers=":".join([
        "ECDHE-ECDSA-AES128-GCM-SHA256", "ECDHE-RSA-AES128-GCM-SHA256",
        "ECDHE-ECDSA-AES256-SHA", "ECDHE-ECDSA-AES128-SHA",
        "ECDHE-RSA-AES128-SHA", "ECDHE-RSA-AES256-SHA",
        "DHE-RSA-AES128-SHA", "DHE-RSA-AES256-SHA",
        "AES128-SHA", "AES256-SHA", "DES-CBC3-SHA",
        "@SECLEVEL=0",
    ]),
    alpn=("http/1.1",),
)

MODERN_PROFILE = ClientProfile(
    name="modern",
    ciphers="DEFAULT:@SECLEVEL=0",
    alpn=("h2", "http/1.1"),
    max_version=ssl.TLSVersion.TLSv1_3,
)

PROFILES = {p.name: p for p in (TORBROWSER_PROFILE, MODERN_PROFILE)}


class HandshakeError(Exception):
    pass


@dataclass
class HandshakeResult:
    chain: list = field(default_factory=list)
    version: str = None
    cipher: str = None


def client_context(profile=TORBROWSER_PROFILE):
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.check_hostname = False
    ctx.verify_mode = ssl.CERT_NONE
    with warnings.catch_warnings():
        # Old protocol versions stay enabled on purpose: attackers use them.
        warnings.simplefilter("ignore", DeprecationWarning)
        ctx.minimum_version = profile.min_version
    ctx.maximum_version = profile.max_version
    ctx.set_ciphers(profile.ciphers)
    if profile.alpn:
        ctx.set_alpn_protocols(list(profile.alpn))
    return ctx


def server_context(cert_file, key_file):
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)
        ctx.minimum_version = ssl.TLSVersion.TLSv1
    ctx.set_ciphers("DEFAULT:@SECLEVEL=0")
    ctx.load_cert_chain(cert_file, key_file)
    ctx.set_alpn_protocols(["http/1.1"])
    return ctx


class _RecordTap:
    """Collects plaintext handshake bytes from the raw server byte stream."""

    def __init__(self):
        self._buf = b""
        self.handshake = b""
        self.encrypted = False

    def feed(self, data):
        if self.encrypted:
            return
        self._buf += data
        while len(self._buf) >= 5:
            ctype = self._buf[0]
            (length,) = struct.unpack(">H", self._buf[3:5])
            if len(self._buf) < 5 + length:
                return
            body, self._buf = self._buf[5:5 + length], self._buf[5 + length:]
            if ctype == 20:
                # ChangeCipherSpec: everything after it is encrypted.
                self.encrypted = True
                return
            if ctype == TLS_HANDSHAKE:
                self.handshake += body

    def certificates(self):
        data = self.handshake
        while len(data) >= 4:
            mtype = data[0]
            length = int.from_bytes(data[1:4], "big")
            body, data = data[4:4 + length], data[4 + length:]
            if mtype != HS_CERTIFICATE or len(body) < 3:
                continue
            total = int.from_bytes(body[:3], "big")
            certs, rest = [], body[3:3 + total]
            while len(rest) >= 3:
                clen = int.from_bytes(rest[:3], "big")
                certs.append(rest[3:3 + clen])
                rest = rest[3 + clen:]
            return certs
        return []


async def _pump(sslobj, incoming, outgoing, reader, writer, tap=None):
    while True:
        try:
            sslobj.do_handshake()
            break
        except ssl.SSLWantReadError:
            pending = outgoing.read()
            if pending:
                writer.write(pending)
                await writer.drain()
            data = await reader.read(65536)
            if not data:
                raise HandshakeError("peer closed the connection during the handshake")
            if tap is not None:
                tap.feed(data)
            incoming.write(data)
    pending = outgoing.read()
    if pending:
        writer.write(pending)
        await writer.drain()


async def client_handshake(reader, writer, server_name, profile=TORBROWSER_PROFILE, ctx=None):
    """Run a client handshake and return the certificate chain (leaf first)."""
    ctx = ctx or client_context(profile)
    incoming, outgoing = ssl.MemoryBIO(), ssl.MemoryBIO()
    sslobj = ctx.wrap_bio(incoming, outgoing, server_hostname=server_name)
    tap = _RecordTap()
    try:
        await _pump(sslobj, incoming, outgoing, reader, writer, tap)
    except ssl.SSLError as err:
        raise HandshakeError(str(err)) from err
    except (asyncio.IncompleteReadError, ConnectionError) as err:
        raise HandshakeError("connection lost: %s" % err) from err
    leaf = sslobj.getpeercert(binary_form=True)
    if leaf is None:
        raise HandshakeError("server sent no certificate")
    chain = tap.certificates()
    if not chain or chain[0] != leaf:
        chain = [leaf]
    cipher = sslobj.cipher()
    return HandshakeResult(chain, sslobj.version(), cipher[0] if cipher else None)


class TlsChannel:
    """Application data over an established server-side TLS session."""

    def __init__(self, sslobj, incoming, outgoing, reader, writer):
        self._ssl = sslobj
        self._in = incoming
        self._out = outgoing
        self._reader = reader
        self._writer = writer

    async def read(self, n=65536):
        while True:
            try:
                return self._ssl.read(n)
            except ssl.SSLWantReadError:
                data = await self._reader.read(65536)
                if not data:
                    return b""
                self._in.write(data)
            except (ssl.SSLZeroReturnError, ssl.SSLEOFError):
                return b""

    async def write(self, data):
        self._ssl.write(data)
        self._writer.write(self._out.read())
        await self._writer.drain()


async def server_handshake(reader, writer, ctx):
    incoming, outgoing = ssl.MemoryBIO(), ssl.MemoryBIO()
    sslobj = ctx.wrap_bio(incoming, outgoing, server_side=True)
    try:
        await _pump(sslobj, incoming, outgoing, reader, writer)
    except ssl.SSLError as err:
        raise HandshakeError(str(err)) from err
    return TlsChannel(sslobj, incoming, outgoing, reader, writer)
