"""Endpoint identities, dev certificate issuance and the certificate keyring.

An endpoint id is the SHA-1 digest of ``lowercase(mac) + "|" + canonical(ip)``.
It is derived once and then persisted, so later address changes never
alter the identity of a device.

Store layout::

    <store>/identity.id   20 raw bytes
    <store>/cert.pem      X.509 v3 certificate
    <store>/key.pem       RSA private key (PKCS#8, unencrypted, mode 0600)
"""

from __future__ import annotations

import datetime
import hashlib
import ipaddress
import os
import re
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import rsa
from cryptography.x509.oid import NameOID

ID_SIZE = 20
RSA_BITS = 2048

_MAC_RE = re.compile(r"^[0-9A-Fa-f]{2}(:[0-9A-Fa-f]{2}){5}$")


class IdentityError(Exception):
    """Base class for identity and certificate failures."""


class IdentityValidationError(IdentityError, ValueError):
    pass


class IdentityIntegrityError(IdentityError):
    """The on-disk identity store is corrupt or inconsistent."""


class TrustError(IdentityError):
    """A certificate does not chain to the trusted CA."""


class Role(str, Enum):
    DEVICE = "device"
    AGENT = "agent"
    SERVER = "server"
    CONTROLLER = "controller"
    CA = "ca"


def canonical_mac(mac: str) -> str:
    if not isinstance(mac, str) or not _MAC_RE.match(mac):
        raise IdentityValidationError(f"malformed MAC address: {mac!r}")
    return mac.lower()


def canonical_ip(ip: str) -> str:
    try:
        return str(ipaddress.ip_address(ip))
    except ValueError as exc:
        raise IdentityValidationError(f"malformed IP address: {ip!r}") from exc


def derive_endpoint_id(mac: str, ip: str) -> bytes:
    """Return the 160-bit id for a MAC/IP pair."""
    canonical = f"{canonical_mac(mac)}|{canonical_ip(ip)}"
    return hashlib.sha1(canonical.encode("ascii")).digest()


def _subject(common_name: str, role: str | None = None) -> x509.Name:
    attrs = [x509.NameAttribute(NameOID.COMMON_NAME, common_name)]
    if role:
        attrs.append(x509.NameAttribute(NameOID.ORGANIZATIONAL_UNIT_NAME, role))
    return x509.Name(attrs)


def generate_private_key(bits: int = RSA_BITS) -> rsa.RSAPrivateKey:
    return rsa.generate_private_key(public_exponent=65537, key_size=bits)


def _build_certificate(subject, issuer, public_key, signing_key, *, ca: bool, days: int):
    now = datetime.datetime.now(datetime.timezone.utc)
    builder = (
        x509.CertificateBuilder()
        .subject_name(subject)
        .issuer_name(issuer)
        .public_key(public_key)
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(days=1))
        .not_valid_after(now + datetime.timedelta(days=days))
        .add_extension(x509.BasicConstraints(ca=ca, path_length=None), critical=True)
    )
    return builder.sign(signing_key, hashes.SHA256())


def certificate_id(cert: x509.Certificate) -> bytes:
    """Endpoint id bound into ``cert`` as its hex common name."""
    cns = cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)
    if not cns:
        raise IdentityValidationError("certificate has no common name")
    try:
        raw = bytes.fromhex(cns[0].value)
    except ValueError as exc:
        raise IdentityValidationError("certificate CN is not a hex id") from exc
    if len(raw) != ID_SIZE:
        raise IdentityValidationError("certificate CN is not a 160-bit id")
    return raw


def certificate_role(cert: x509.Certificate) -> str | None:
    ous = cert.subject.get_attributes_for_oid(NameOID.ORGANIZATIONAL_UNIT_NAME)
    return ous[0].value if ous else None


def load_certificate(data: bytes) -> x509.Certificate:
    try:
        if data.lstrip().startswith(b"-----BEGIN"):
            return x509.load_pem_x509_certificate(data)
        return x509.load_der_x509_certificate(data)
    except ValueError as exc:
        raise IdentityValidationError("unparseable certificate") from exc


def certificate_der(cert: x509.Certificate) -> bytes:
    return cert.public_bytes(serialization.Encoding.DER)


@dataclass(frozen=True)
class EndpointIdentity:
    id: bytes
    role: Role
    certificate: x509.Certificate
    private_key: rsa.RSAPrivateKey | None = None

    @property
    def public_key(self) -> rsa.RSAPublicKey:
        return self.certificate.public_key()

    @property
    def hex_id(self) -> str:
        return self.id.hex()

    def __repr__(self) -> str:
        return f"EndpointIdentity({self.role.value}, {self.hex_id})"


@dataclass(frozen=True)
class CertificateAuthority:
    certificate: x509.Certificate
    private_key: rsa.RSAPrivateKey | None

    @classmethod
    def create(cls, name: str = "loghive dev CA", days: int = 3650) -> "CertificateAuthority":
        key = generate_private_key()
        subject = _subject(name, Role.CA.value)
        cert = _build_certificate(subject, subject, key.public_key(), key, ca=True, days=days)
        return cls(cert, key)

    def save(self, store: os.PathLike | str) -> None:
        store = Path(store)
        store.mkdir(parents=True, exist_ok=True)
        (store / "ca.pem").write_bytes(self.certificate.public_bytes(serialization.Encoding.PEM))
        if self.private_key is not None:
            _write_private(store / "ca-key.pem", self.private_key)

    @classmethod
    def load(cls, store: os.PathLike | str) -> "CertificateAuthority":
        store = Path(store)
        cert = load_certificate((store / "ca.pem").read_bytes())
        key_path = store / "ca-key.pem"
        key = None
        if key_path.exists():
            key = serialization.load_pem_private_key(key_path.read_bytes(), password=None)
        return cls(cert, key)


def issue_dev_certificate(
    subject_id: bytes,
    subject_public_key: rsa.RSAPublicKey,
    ca: CertificateAuthority,
    role: Role | str = Role.DEVICE,
    days: int = 825,
) -> bytes:
    """Issue a PEM certificate with CN = hex(subject_id), signed by ``ca``.

    Development tooling only: certificate issuance happens outside the
    transport protocol.
    """
    if ca.private_key is None:
        raise IdentityError("CA identity has no private key")
    if len(subject_id) != ID_SIZE:
        raise IdentityValidationError("subject id must be 20 bytes")
    role = Role(role).value
    cert = _build_certificate(
        _subject(subject_id.hex(), role),
        ca.certificate.subject,
        subject_public_key,
        ca.private_key,
        ca=False,
        days=days,
    )
    return cert.public_bytes(serialization.Encoding.PEM)


def verify_certificate(cert: x509.Certificate, ca_cert: x509.Certificate) -> None:
    """Raise TrustError unless ``cert`` is signed by ``ca_cert`` and currently valid."""
    try:
        cert.verify_directly_issued_by(ca_cert)
    except (ValueError, TypeError, InvalidSignature) as exc:
        raise TrustError(f"certificate not issued by trusted CA: {exc}") from exc
    now = datetime.datetime.now(datetime.timezone.utc)
    if not (cert.not_valid_before_utc <= now <= cert.not_valid_after_utc):
        raise TrustError("certificate outside its validity period")


def _write_private(path: Path, key: rsa.RSAPrivateKey) -> None:
    data = key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)


def _self_signed(endpoint_id: bytes, role: Role, key: rsa.RSAPrivateKey) -> x509.Certificate:
    name = _subject(endpoint_id.hex(), role.value)
    return _build_certificate(name, name, key.public_key(), key, ca=False, days=825)


def save_identity(store: os.PathLike | str, identity: EndpointIdentity) -> None:
    store = Path(store)
    store.mkdir(parents=True, exist_ok=True)
    (store / "identity.id").write_bytes(identity.id)
    (store / "cert.pem").write_bytes(identity.certificate.public_bytes(serialization.Encoding.PEM))
    if identity.private_key is not None:
        _write_private(store / "key.pem", identity.private_key)


def load_identity(store: os.PathLike | str) -> EndpointIdentity:
    store = Path(store)
    try:
        raw_id = (store / "identity.id").read_bytes()
        cert_pem = (store / "cert.pem").read_bytes()
        key_pem = (store / "key.pem").read_bytes()
    except FileNotFoundError as exc:
        raise IdentityIntegrityError(f"incomplete identity store: {exc.filename}") from exc
    if len(raw_id) != ID_SIZE:
        raise IdentityIntegrityError(f"identity.id holds {len(raw_id)} bytes, expected {ID_SIZE}")
    try:
        cert = x509.load_pem_x509_certificate(cert_pem)
        key = serialization.load_pem_private_key(key_pem, password=None)
    except ValueError as exc:
        raise IdentityIntegrityError("unreadable certificate or key") from exc
    if key.public_key().public_numbers() != cert.public_key().public_numbers():
        raise IdentityIntegrityError("private key does not match certificate")
    try:
        cert_id = certificate_id(cert)
    except IdentityValidationError as exc:
        raise IdentityIntegrityError(str(exc)) from exc
    if cert_id != raw_id:
        raise IdentityIntegrityError("certificate CN does not match identity.id")
    role = Role(certificate_role(cert) or Role.DEVICE.value)
    return EndpointIdentity(raw_id, role, cert, key)


def load_or_create_identity(
    store: os.PathLike | str,
    mac: str,
    ip: str,
    role: Role | str = Role.DEVICE,
    ca: CertificateAuthority | None = None,
) -> EndpointIdentity:
    """Return the identity persisted at ``store``, creating it on first use.

    An existing identity is returned unchanged whatever ``mac``/``ip`` are now.
    Without ``ca`` the new certificate is self-signed.
    """
    store = Path(store)
    if (store / "identity.id").exists():
        return load_identity(store)
    role = Role(role)
    endpoint_id = derive_endpoint_id(mac, ip)
    key = generate_private_key()
    if ca is not None:
        cert = x509.load_pem_x509_certificate(
            issue_dev_certificate(endpoint_id, key.public_key(), ca, role)
        )
    else:
        cert = _self_signed(endpoint_id, role, key)
    identity = EndpointIdentity(endpoint_id, role, cert, key)
    save_identity(store, identity)
    return identity


def reissue_identity(store: os.PathLike | str, ca: CertificateAuthority) -> EndpointIdentity:
    """Replace the certificate in ``store`` with one issued by ``ca``."""
    ident = load_identity(store)
    pem = issue_dev_certificate(ident.id, ident.public_key, ca, ident.role)
    Path(store, "cert.pem").write_bytes(pem)
    return load_identity(store)


class Keyring:
    """Directory of trusted peer certificates, one ``<hexid>.pem`` per endpoint."""

    def __init__(self, path: os.PathLike | str):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            os.chmod(self.path, 0o700)
        except OSError:
            pass
        self._lock = threading.Lock()
        self._cache: dict[bytes, x509.Certificate] = {}

    def add(self, cert: x509.Certificate) -> bytes:
        endpoint_id = certificate_id(cert)
        pem = cert.public_bytes(serialization.Encoding.PEM)
        with self._lock:
            tmp = self.path / f".{endpoint_id.hex()}.tmp"
            tmp.write_bytes(pem)
            os.replace(tmp, self.path / f"{endpoint_id.hex()}.pem")
            self._cache[endpoint_id] = cert
        return endpoint_id

    def get(self, endpoint_id: bytes) -> x509.Certificate | None:
        cert = self._cache.get(endpoint_id)
        if cert is not None:
            return cert
        path = self.path / f"{endpoint_id.hex()}.pem"
        try:
            cert = x509.load_pem_x509_certificate(path.read_bytes())
        except (FileNotFoundError, ValueError):
            return None
        self._cache[endpoint_id] = cert
        return cert

    def get_pem(self, endpoint_id: bytes) -> bytes | None:
        cert = self.get(endpoint_id)
        return None if cert is None else cert.public_bytes(serialization.Encoding.PEM)

    def ids(self) -> list[bytes]:
        out = []
        for p in sorted(self.path.glob("*.pem")):
            try:
                out.append(bytes.fromhex(p.stem))
            except ValueError:
                continue
        return out

    def __contains__(self, endpoint_id: bytes) -> bool:
        return self.get(endpoint_id) is not None

    def __len__(self) -> int:
        return len(self.ids())

