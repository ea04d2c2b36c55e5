#!/usr/bin/env python3
"""Regenerate the key material shipped with the simulator.

Only private keys and the reconstructed "Main Authority" root are written;
leaf certificates are issued deterministically at runtime from these keys
(RSA PKCS#1 v1.5 signatures are deterministic), see exitscan.simnet.certs.

The root is signed with the openssl CLI because cryptography refuses
SHA-1 signatures; the published certificate is sha1WithRSAEncryption.

Running this script invalidates every fingerprint frozen in the test-suite
and in data/decoys.json, so it is not part of the normal workflow.
"""

import os
import pathlib
import subprocess
import tempfile

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ec, ed25519, rsa

DATA = pathlib.Path(__file__).resolve().parent.parent / "src" / "exitscan" / "simnet" / "data"

MAIN_AUTHORITY_SERIAL = 0xE53A5BE2BD702077


OPENSSL_CONF = """
[ca]
default_ca = ma
[ma]
database = {work}/index.txt
new_certs_dir = {work}
serial = {work}/serial
policy = anything
email_in_dn = yes
preserve = yes
x509_extensions = ext
[anything]
countryName = optional
stateOrProvinceName = optional
localityName = optional
organizationName = optional
organizationalUnitName = optional
commonName = supplied
emailAddress = optional
[req]
distinguished_name = dn
prompt = no
[dn]
C = US
ST = Nevada
L = Newbury
O = Main Authority
OU = Certificate Management
CN = main.authority.com
emailAddress = cert@authority.com
[ext]
subjectKeyIdentifier = hash
authorityKeyIdentifier = keyid:always,issuer:always
basicConstraints = CA:TRUE
"""


def sign_root(key_path, out_path):
    with tempfile.TemporaryDirectory() as work:
        cnf = os.path.join(work, "ca.cnf")
        with open(cnf, "w") as fh:
            fh.write(OPENSSL_CONF.format(work=work))
        open(os.path.join(work, "index.txt"), "w").close()
        with open(os.path.join(work, "serial"), "w") as fh:
            fh.write("%X\n" % MAIN_AUTHORITY_SERIAL)
        csr = os.path.join(work, "root.csr")
        subprocess.run(["openssl", "req", "-new", "-config", cnf, "-key", str(key_path),
                        "-out", csr], check=True)
        subprocess.run(["openssl", "ca", "-batch", "-selfsign", "-config", cnf, "-md", "sha1",
                        "-keyfile", str(key_path), "-in", csr, "-notext", "-out", str(out_path),
                        "-startdate", "20130212081307Z", "-enddate", "20230210081307Z"],
                       check=True, stderr=subprocess.DEVNULL)


def write_key(name, key):
    if isinstance(key, ed25519.Ed25519PrivateKey):
        fmt = serialization.PrivateFormat.OpenSSH
    else:
        fmt = serialization.PrivateFormat.PKCS8
    pem = key.private_bytes(serialization.Encoding.PEM, fmt, serialization.NoEncryption())
    (DATA / name).write_bytes(pem)


def main():
    DATA.mkdir(parents=True, exist_ok=True)

    root_key = rsa.generate_private_key(public_exponent=65537, key_size=1024)
    write_key("main_authority_root.key", root_key)
    sign_root(DATA / "main_authority_root.key", DATA / "main_authority_root.pem")
    write_key("attacker_leaf.key", rsa.generate_private_key(public_exponent=65537, key_size=1024))

    write_key("decoy_ca.key", rsa.generate_private_key(public_exponent=65537, key_size=2048))
    write_key("decoy_leaf.key", ec.generate_private_key(ec.SECP256R1()))

    write_key("decoy_ssh_host.key", ed25519.Ed25519PrivateKey.generate())
    write_key("attacker_ssh_host.key", ed25519.Ed25519PrivateKey.generate())


if __name__ == "__main__":
    main()
