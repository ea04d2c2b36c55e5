"""Just enough of the SSH transport layer to learn a server's host key.

The client sends its identification string and KEXINIT, runs a
curve25519-sha256 exchange, checks the server's signature over the exchange
hash and stops before NEWKEYS.  No authentication is ever attempted.  The
server half exists for the simulator's decoy hosts.
"""

import base64
import hashlib
import os
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, ed25519, padding, rsa, utils, x25519

MSG_DISCONNECT = 1
MSG_KEXINIT = 20
MSG_NEWKEYS = 21
MSG_KEX_ECDH_INIT = 30
MSG_KEX_ECDH_REPLY = 31

DISCONNECT_BY_APPLICATION = 11
KEX_ALGORITHMS = ("curve25519-sha256", "curve25519-sha256@libssh.org")
HOST_KEY_ALGORITHMS = ("ssh-ed25519", "ecdsa-sha2-nistp256", "rsa-sha2-256", "ssh-rsa")
CLIENT_BANNER = "SSH-2.0-OpenSSH_6.4"
MAX_PACKET = 35000


class SshError(Exception):
    pass


# -- wire encoding ---------------------------------------------------------

def ssh_string(data):
    if isinstance(data, str):
        data = data.encode("utf-8")
    return struct.pack(">I", len(data)) + data


def ssh_mpint(value):
    if value == 0:
        return ssh_string(b"")
    raw = value.to_bytes((value.bit_length() + 7) // 8, "big")
    if raw[0] & 0x80:
        raw = b"\x00" + raw
    return ssh_string(raw)


def name_list(names):
    return ssh_string(",".join(names))


class Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def byte(self):
        if self.pos >= len(self.data):
            raise SshError("truncated message")
        self.pos += 1
        return self.data[self.pos - 1]

    def uint32(self):
        if self.pos + 4 > len(self.data):
            raise SshError("truncated message")
        (value,) = struct.unpack(">I", self.data[self.pos:self.pos + 4])
        self.pos += 4
        return value

    def string(self):
        length = self.uint32()
        if self.pos + length > len(self.data):
            raise SshError("truncated string")
        value = self.data[self.pos:self.pos + length]
        self.pos += length
        return value

    def mpint(self):
        return int.from_bytes(self.string(), "big", signed=True)

    def names(self):
        raw = self.string().decode("ascii", "replace")
        return raw.split(",") if raw else []

    def raw(self, n):
        if self.pos + n > len(self.data):
            raise SshError("truncated message")
        value = self.data[self.pos:self.pos + n]
        self.pos += n
        return value


def frame(payload, block=8):
    pad = block - (len(payload) + 5) % block
    if pad < 4:
        pad += block
    return struct.pack(">IB", len(payload) + pad + 1, pad) + payload + os.urandom(pad)


async def read_packet(reader):
    head = await reader.readexactly(4)
    (length,) = struct.unpack(">I", head)
    if not 5 <= length <= MAX_PACKET:
        raise SshError("implausible packet length %d" % length)
    body = await reader.readexactly(length)
    pad = body[0]
    if pad >= length:
        raise SshError("padding longer than packet")
    return body[1:length - pad]


async def read_banner(reader):
    """Skip pre-banner lines and return the peer's identification string."""
    for _ in range(32):
        line = await reader.readline()
        if not line:
            raise SshError("connection closed before identification string")
        if line.startswith(b"SSH-"):
            return line.rstrip(b"\r\n").decode("ascii", "replace")
    raise SshError("no identification string")


def kexinit_payload(host_key_algorithms=HOST_KEY_ALGORITHMS, kex=KEX_ALGORITHMS):
    return (bytes([MSG_KEXINIT]) + os.urandom(16)
            + name_list(kex) + name_list(host_key_algorithms)
            + name_list(["aes128-ctr"]) * 2 + name_list(["hmac-sha2-256"]) * 2
            + name_list(["none"]) * 2 + name_list([]) * 2
            + b"\x00" + struct.pack(">I", 0))


def parse_kexinit(payload):
    r = Reader(payload)
    if r.byte() != MSG_KEXINIT:
        raise SshError("expected KEXINIT")
    r.raw(16)
    return {"kex": r.names(), "host_key": r.names()}


def exchange_hash(v_c, v_s, i_c, i_s, k_s, q_c, q_s, shared):
    h = hashlib.sha256()
    for part in (v_c, v_s, i_c, i_s, k_s, q_c, q_s):
        h.update(ssh_string(part))
    h.update(ssh_mpint(int.from_bytes(shared, "big")))
    return h.digest()


def disconnect_payload(reason=DISCONNECT_BY_APPLICATION, text="bye"):
    return bytes([MSG_DISCONNECT]) + struct.pack(">I", reason) + ssh_string(text) + ssh_string("")


# -- host keys and fingerprints ---------------------------------------------

def sha256_fingerprint(blob):
    return "SHA256:" + base64.b64encode(hashlib.sha256(blob).digest()).decode("ascii").rstrip("=")


def md5_fingerprint(blob):
    return ":".join("%02x" % b for b in hashlib.md5(blob).digest())


def fingerprint_matches(blob, expected):
    """Compare against an OpenSSH SHA256 or legacy colon-separated MD5 fingerprint."""
    expected = expected.strip()
    if expected.upper().startswith("SHA256:"):
        return sha256_fingerprint(blob)[7:] == expected[7:].rstrip("=")
    return md5_fingerprint(blob) == expected.lower().replace("md5:", "")


def public_key_blob(private_key):
    return private_key.public_key().public_bytes(serialization.Encoding.OpenSSH,
                                                 serialization.PublicFormat.OpenSSH).split()[1]


def host_key_blob(private_key):
    return base64.b64decode(public_key_blob(private_key))


def sign_exchange(private_key, data):
    if isinstance(private_key, ed25519.Ed25519PrivateKey):
        return ssh_string("ssh-ed25519") + ssh_string(private_key.sign(data))
    raise SshError("decoy servers only sign with ed25519")


_ECDSA_CURVES = {"nistp256": (ec.SECP256R1, hashes.SHA256),
                 "nistp384": (ec.SECP384R1, hashes.SHA384),
                 "nistp521": (ec.SECP521R1, hashes.SHA512)}


def verify_exchange(blob, signature, data):
    """Check the server's signature over the exchange hash with key ``blob``.

    Returns True/False, or None for key types we cannot check.
    """
    key = Reader(blob)
    key_type = key.string().decode("ascii", "replace")
    sig = Reader(signature)
    sig_type = sig.string().decode("ascii", "replace")
    sig_bytes = sig.string()
    try:
        if key_type == "ssh-ed25519":
            ed25519.Ed25519PublicKey.from_public_bytes(key.string()).verify(sig_bytes, data)
            return True
        if key_type == "ssh-rsa":
            e, n = key.mpint(), key.mpint()
            digest = {"ssh-rsa": hashes.SHA1, "rsa-sha2-256": hashes.SHA256,
                      "rsa-sha2-512": hashes.SHA512}.get(sig_type)
            if digest is None:
                return False
            rsa.RSAPublicNumbers(e, n).public_key().verify(sig_bytes, data, padding.PKCS1v15(), digest())
            return True
        if key_type.startswith("ecdsa-sha2-"):
            curve_name = key.string().decode("ascii")
            curve, digest = _ECDSA_CURVES[curve_name]
            point = key.string()
            pub = ec.EllipticCurvePublicKey.from_encoded_point(curve(), point)
            rs = Reader(sig_bytes)
            der = utils.encode_dss_signature(rs.mpint(), rs.mpint())
            pub.verify(der, data, ec.ECDSA(digest()))
            return True
    except (InvalidSignature, ValueError, KeyError, SshError):
        return False
    return None


@dataclass
class HostKeyObservation:
    key_type: str
    blob: bytes
    server_banner: str
    signature_valid: bool = None

    @property
    def sha256(self):
        return sha256_fingerprint(self.blob)

    @property
    def md5(self):
        return md5_fingerprint(self.blob)


async def _send(writer, payload):
    writer.write(frame(payload))
    await writer.drain()


async def fetch_host_key(reader, writer, banner=CLIENT_BANNER):
    """Client half: returns a HostKeyObservation and says goodbye."""
    writer.write((banner + "\r\n").encode("ascii"))
    await writer.drain()
    server_banner = await read_banner(reader)
    if not server_banner.startswith(("SSH-2.0-", "SSH-1.99-")):
        raise SshError("unsupported protocol version %r" % server_banner)

    client_kexinit = kexinit_payload()
    await _send(writer, client_kexinit)
    server_kexinit = await read_packet(reader)
    offer = parse_kexinit(server_kexinit)
    if not any(k in offer["kex"] for k in KEX_ALGORITHMS):
        raise SshError("server offers no curve25519 key exchange: %s" % ",".join(offer["kex"]))

    ephemeral = x25519.X25519PrivateKey.generate()
    q_c = ephemeral.public_key().public_bytes(serialization.Encoding.Raw,
                                              serialization.PublicFormat.Raw)
    await _send(writer, bytes([MSG_KEX_ECDH_INIT]) + ssh_string(q_c))

    reply = await read_packet(reader)
    r = Reader(reply)
    if r.byte() != MSG_KEX_ECDH_REPLY:
        raise SshError("expected KEX_ECDH_REPLY, got message %d" % reply[0])
    k_s, q_s, signature = r.string(), r.string(), r.string()
    try:
        shared = ephemeral.exchange(x25519.X25519PublicKey.from_public_bytes(q_s))
    except ValueError as err:
        raise SshError("bad server ephemeral key: %s" % err) from None
    h = exchange_hash(banner.encode(), server_banner.encode(), client_kexinit, server_kexinit,
                      k_s, q_c, q_s, shared)
    key_type = Reader(k_s).string().decode("ascii", "replace")
    observation = HostKeyObservation(key_type, k_s, server_banner, verify_exchange(k_s, signature, h))
    try:
        await _send(writer, disconnect_payload())
    except ConnectionError:
        pass
    return observation


async def serve_host_key(reader, writer, host_key, banner="SSH-2.0-OpenSSH_6.2p2 Debian-6"):
    """Server half used by decoy hosts: complete the exchange, then wait."""
    writer.write((banner + "\r\n").encode("ascii"))
    server_kexinit = kexinit_payload(host_key_algorithms=("ssh-ed25519",))
    writer.write(frame(server_kexinit))
    await writer.drain()
    client_banner = await read_banner(reader)
    client_kexinit = await read_packet(reader)
    offer = parse_kexinit(client_kexinit)
    if "ssh-ed25519" not in offer["host_key"]:
        await _send(writer, disconnect_payload(3, "no matching host key type"))
        return
    init = await read_packet(reader)
    r = Reader(init)
    if r.byte() != MSG_KEX_ECDH_INIT:
        raise SshError("expected KEX_ECDH_INIT")
    q_c = r.string()
    ephemeral = x25519.X25519PrivateKey.generate()
    q_s = ephemeral.public_key().public_bytes(serialization.Encoding.Raw,
                                              serialization.PublicFormat.Raw)
    shared = ephemeral.exchange(x25519.X25519PublicKey.from_public_bytes(q_c))
    k_s = host_key_blob(host_key)
    h = exchange_hash(client_banner.encode(), banner.encode(), client_kexinit, server_kexinit,
                      k_s, q_c, q_s, shared)
    await _send(writer, bytes([MSG_KEX_ECDH_REPLY]) + ssh_string(k_s) + ssh_string(q_s)
                + ssh_string(sign_exchange(host_key, h)))
    await _send(writer, bytes([MSG_NEWKEYS]))
    while True:
        try:
            payload = await read_packet(reader)
        except Exception:
            return
        if payload[:1] == bytes([MSG_DISCONNECT]):
            return
