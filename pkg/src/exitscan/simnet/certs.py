"""Certificates and host keys for the simulated Internet.

Everything is derived from key files shipped next to this module.  All
certificates are signed with RSA PKCS#1 v1.5, which is deterministic, so a
given host always gets byte-identical DER and the decoy fingerprints can be
frozen in configuration.
"""

import datetime
import functools
import hashlib
import os
import tempfile
from importlib import resources

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.x509.oid import NameOID

from exitscan import tlsio

MAIN_AUTHORITY_SERIAL = 0xE53A5BE2BD702077

_MA_SUBJECT = [
    (NameOID.COUNTRY_NAME, "US"),
    (NameOID.STATE_OR_PROVINCE_NAME, "Nevada"),
    (NameOID.LOCALITY_NAME, "Newbury"),
    (NameOID.ORGANIZATION_NAME, "Main Authority"),
    (NameOID.ORGANIZATIONAL_UNIT_NAME, "Certificate Management"),
]

_DECOY_CA_NAME = x509.Name([
    x509.NameAttribute(NameOID.COUNTRY_NAME, "ZZ"),
    x509.NameAttribute(NameOID.ORGANIZATION_NAME, "Decoy Trust Services"),
    x509.NameAttribute(NameOID.COMMON_NAME, "Decoy Root CA 1"),
])

_EPOCH = datetime.datetime(2013, 1, 1, tzinfo=datetime.timezone.utc)


def _data(name):
    return resources.files("exitscan.simnet").joinpath("data", name).read_bytes()


@functools.lru_cache(maxsize=None)
def load_key(name):
    raw = _data(name)
    if raw.startswith(b"-----BEGIN OPENSSH"):
        return serialization.load_ssh_private_key(raw, password=None)
    return serialization.load_pem_private_key(raw, password=None)


@functools.lru_cache(maxsize=None)
def main_authority_root():
    return x509.load_pem_x509_certificate(_data("main_authority_root.pem"))


def is_main_authority(cert):
    """True for the shared attacker root, matched on subject DN and serial."""
    root = main_authority_root()
    return cert.subject == root.subject and cert.serial_number == MAIN_AUTHORITY_SERIAL


def _serial_for(label):
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "big") >> 1 | 1


def _build(subject, issuer, public_key, signing_key, serial, not_before, days, ca=False,
           san=None, issuer_key=None):
    builder = (x509.CertificateBuilder()
               .subject_name(subject)
               .issuer_name(issuer)
               .public_key(public_key)
               .serial_number(serial)
               .not_valid_before(not_before)
               .not_valid_after(not_before + datetime.timedelta(days=days))
               .add_extension(x509.BasicConstraints(ca=ca, path_length=None), critical=ca)
               .add_extension(x509.SubjectKeyIdentifier.from_public_key(public_key), critical=False))
    if issuer_key is not None:
        builder = builder.add_extension(
            x509.AuthorityKeyIdentifier.from_issuer_public_key(issuer_key), critical=False)
    if san:
        builder = builder.add_extension(x509.SubjectAlternativeName([x509.DNSName(san)]),
                                        critical=False)
    return builder.sign(signing_key, hashes.SHA256())


@functools.lru_cache(maxsize=None)
def decoy_ca():
    key = load_key("decoy_ca.key")
    return _build(_DECOY_CA_NAME, _DECOY_CA_NAME, key.public_key(), key,
                  _serial_for("decoy-ca"), _EPOCH, 365 * 30, ca=True)


@functools.lru_cache(maxsize=None)
def decoy_leaf(host):
    """The genuine certificate of a decoy HTTPS host, issued by the decoy CA."""
    ca_key = load_key("decoy_ca.key")
    leaf_key = load_key("decoy_leaf.key")
    subject = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, host)])
    return _build(subject, _DECOY_CA_NAME, leaf_key.public_key(), ca_key,
                  _serial_for("decoy-leaf:" + host), _EPOCH, 365 * 30, san=host,
                  issuer_key=ca_key.public_key())


@functools.lru_cache(maxsize=None)
def self_signed(host):
    """A self-signed certificate, as served by hosts without a CA."""
    key = load_key("decoy_ca.key")
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, host)])
    return _build(name, name, key.public_key(), key, _serial_for("self:" + host), _EPOCH,
                  365 * 30, ca=True, san=host)


@functools.lru_cache(maxsize=None)
def attacker_leaf(host):
    """Forged leaf for ``host`` issued by the Main Authority root."""
    root = main_authority_root()
    subject = x509.Name([x509.NameAttribute(oid, value) for oid, value in _MA_SUBJECT]
                        + [x509.NameAttribute(NameOID.COMMON_NAME, host)])
    return _build(subject, root.subject, load_key("attacker_leaf.key").public_key(),
                  load_key("main_authority_root.key"), _serial_for("ma-leaf:" + host),
                  datetime.datetime(2013, 6, 1, tzinfo=datetime.timezone.utc), 365 * 5,
                  san=host, issuer_key=root.public_key())


def sha1_hex(cert):
    return cert.fingerprint(hashes.SHA1()).hex()


_tmpdir = None


def _write(name, data):
    global _tmpdir
    if _tmpdir is None:
        _tmpdir = tempfile.TemporaryDirectory(prefix="exitscan-sim-")
    path = os.path.join(_tmpdir.name, name)
    with open(path, "wb") as fh:
        fh.write(data)
    return path


def _pem(*certs):
    return b"".join(c.public_bytes(serialization.Encoding.PEM) for c in certs)


def _key_pem(key):
    return key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                             serialization.NoEncryption())


@functools.lru_cache(maxsize=None)
def server_context(kind, host):
    """An ssl server context presenting the chain ``kind`` for ``host``.

    ``kind`` is ``decoy`` (decoy CA chain), ``self`` (self-signed) or
    ``mitm`` (Main Authority forged chain).
    """
    if kind == "decoy":
        chain, key = (decoy_leaf(host), decoy_ca()), load_key("decoy_leaf.key")
    elif kind == "self":
        chain, key = (self_signed(host),), load_key("decoy_ca.key")
    elif kind == "mitm":
        chain, key = (attacker_leaf(host), main_authority_root()), load_key("attacker_leaf.key")
    else:
        raise ValueError("unknown certificate kind %r" % kind)
    tag = hashlib.sha1(("%s/%s" % (kind, host)).encode()).hexdigest()[:12]
    cert_file = _write(tag + ".crt", _pem(*chain))
    key_file = _write(tag + ".key", _key_pem(key))
    return tlsio.server_context(cert_file, key_file)
