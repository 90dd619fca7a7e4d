"""Regenerate the certificate corpus used by the TLS tests.

    python tests/fixtures/make_certs.py

Fingerprints frozen in the tests must be recomputed (openssl x509
-fingerprint -sha256) whenever this is rerun.
"""

import datetime as dt
import ipaddress
from pathlib import Path

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

OUT = Path(__file__).parent / "certs"
NOT_BEFORE = dt.datetime(2024, 1, 1, tzinfo=dt.timezone.utc)
NOT_AFTER = dt.datetime(2124, 1, 1, tzinfo=dt.timezone.utc)


def key():
    return ec.generate_private_key(ec.SECP256R1())


def write(name, cert, k):
    (OUT / f"{name}.crt").write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    (OUT / f"{name}.key").write_bytes(k.private_bytes(
        serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8, serialization.NoEncryption()))


def make_ca(cn):
    k = key()
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, cn)])
    cert = (x509.CertificateBuilder().subject_name(name).issuer_name(name)
            .public_key(k.public_key()).serial_number(x509.random_serial_number())
            .not_valid_before(NOT_BEFORE).not_valid_after(NOT_AFTER)
            .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
            .add_extension(x509.KeyUsage(False, False, False, False, False, True, True, False, False), critical=True)
            .sign(k, hashes.SHA256()))
    return cert, k


def make_leaf(cn, ca, ca_key, server=False, dns=(), ips=()):
    k = key()
    builder = (x509.CertificateBuilder()
               .subject_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, cn)]))
               .issuer_name(ca.subject).public_key(k.public_key())
               .serial_number(x509.random_serial_number())
               .not_valid_before(NOT_BEFORE).not_valid_after(NOT_AFTER)
               .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
               .add_extension(x509.ExtendedKeyUsage(
                   [ExtendedKeyUsageOID.SERVER_AUTH if server else ExtendedKeyUsageOID.CLIENT_AUTH]),
                   critical=False))
    sans = [x509.DNSName(d) for d in dns] + [x509.IPAddress(ipaddress.ip_address(i)) for i in ips]
    if sans:
        builder = builder.add_extension(x509.SubjectAlternativeName(sans), critical=False)
    return builder.sign(ca_key, hashes.SHA256()), k


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    ca, ca_key = make_ca("netkit test CA")
    rogue_ca, rogue_key = make_ca("rogue CA")
    write("ca", ca, ca_key)
    write("rogue-ca", rogue_ca, rogue_key)
    write("agent", *make_leaf("agent.example", ca, ca_key, server=True,
                              dns=("agent.example", "localhost"), ips=("127.0.0.1",)))
    write("wrongname", *make_leaf("other.example", ca, ca_key, server=True, dns=("other.example",)))
    write("rogue-agent", *make_leaf("agent.example", rogue_ca, rogue_key, server=True, dns=("agent.example",)))
    write("admin", *make_leaf("admin", ca, ca_key))
    write("guest", *make_leaf("guest", ca, ca_key))
    write("unmapped", *make_leaf("unmapped", ca, ca_key))
    write("rogue", *make_leaf("rogue", rogue_ca, rogue_key))


if __name__ == "__main__":
    main()
