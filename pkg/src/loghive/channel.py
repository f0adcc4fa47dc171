"""Session security: challenge-response authentication, Diffie-Hellman key
agreement, AES payload encryption with a kilobit TTL, signatures, the replay
window and clock-offset estimation.

These are the building blocks; :mod:`loghive.transport` drives them over a
socket.
"""

from __future__ import annotations

import hashlib
import os
import secrets
import struct
import time
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, padding as sympadding
from cryptography.hazmat.primitives.asymmetric import dh, padding, rsa, utils
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography import x509

from .identity import EndpointIdentity, TrustError, certificate_id, verify_certificate

NONCE_BYTES = 512  # 4096-bit challenge
CHUNK_BYTES = 32
KEY_BYTES = 16
IV_BYTES = 16
DIGEST_BYTES = 32

DEFAULT_TTL_KILOBITS = 8192
DEFAULT_WINDOW = 64
DEFAULT_BATCH_SIZE = 32

# RFC 3526, 2048-bit MODP group 14
MODP_2048_P = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)
MODP_2048_G = 2
DH_PUBLIC_BYTES = 256


class ChannelError(Exception):
    pass


class AuthError(ChannelError):
    pass


class KeyAgreementError(ChannelError):
    pass


class ProtocolStateError(ChannelError):
    pass


class DecryptError(ChannelError):
    pass


@dataclass(frozen=True)
class DHParams:
    p: int = MODP_2048_P
    g: int = MODP_2048_G

    def public_bytes_len(self) -> int:
        return (self.p.bit_length() + 7) // 8


DEFAULT_DH = DHParams()
_DH_CACHE: dict[DHParams, dh.DHParameters] = {}


def _dh_parameters(params: DHParams) -> dh.DHParameters:
    cached = _DH_CACHE.get(params)
    if cached is None:
        cached = dh.DHParameterNumbers(params.p, params.g).parameters()
        _DH_CACHE[params] = cached
    return cached


class DiffieHellman:
    """One side of a finite-field Diffie-Hellman exchange."""

    def __init__(self, params: DHParams = DEFAULT_DH):
        self.params = params
        self._private = _dh_parameters(params).generate_private_key()

    @property
    def public_value(self) -> int:
        return self._private.public_key().public_numbers().y

    def public_bytes(self) -> bytes:
        return self.public_value.to_bytes(self.params.public_bytes_len(), "big")

    def shared_secret(self, peer_public: bytes | int) -> bytes:
        y = int.from_bytes(peer_public, "big") if isinstance(peer_public, (bytes, bytearray)) else peer_public
        p = self.params.p
        if y <= 1 or y >= p - 1:
            raise KeyAgreementError("peer DH value out of range")
        peer = dh.DHPublicNumbers(y, dh.DHParameterNumbers(p, self.params.g)).public_key()
        try:
            return self._private.exchange(peer)
        except ValueError as exc:
            raise KeyAgreementError(str(exc)) from exc


def derive_session_key(shared_secret: bytes) -> bytes:
    """128-bit key: SHA-256 of the shared secret, truncated."""
    return hashlib.sha256(shared_secret).digest()[:KEY_BYTES]


@dataclass
class SessionState:
    peer_id: bytes
    ttl_kilobits: int = DEFAULT_TTL_KILOBITS
    window: int = DEFAULT_WINDOW
    session_key: bytes | None = None
    encrypted_bits_used: int = 0
    highest_message_id: int = 0
    clock_offset_ms: float = 0.0
    epoch: int = 0
    rekey_required: bool = False
    rekeys: int = 0
    _accepted: set = field(default_factory=set, repr=False)

    def __post_init__(self):
        if self.ttl_kilobits <= 0:
            raise ValueError("ttl_kilobits must be positive")

    @property
    def ttl_bits(self) -> int:
        return self.ttl_kilobits * 1000

    def install_key(self, key: bytes) -> None:
        if len(key) != KEY_BYTES:
            raise KeyAgreementError("session key must be 16 bytes")
        if self.session_key is not None:
            self.rekeys += 1
        self.session_key = key
        self.epoch += 1
        self.encrypted_bits_used = 0
        self.rekey_required = False
        # the replay window deliberately survives a rekey: ids are monotonic per
        # connection, so an old DH_OFFER cannot be replayed to force a key change

    def replay_seen(self, message_id: int) -> bool:
        """Would ``check_replay`` reject this id? Does not record it."""
        if message_id in self._accepted:
            return True
        return message_id <= self.highest_message_id - self.window


def negotiate_session_key(state: SessionState, own: DiffieHellman, peer_public: bytes) -> SessionState:
    """Derive Ks from the exchange and start a new epoch in ``state``."""
    state.install_key(derive_session_key(own.shared_secret(peer_public)))
    return state


def _aes(key: bytes, iv: bytes) -> Cipher:
    return Cipher(algorithms.AES(key), modes.CBC(iv))


def encrypt_payload(state: SessionState, plaintext: bytes) -> tuple[bytes, bool]:
    """AES-128-CBC with a random IV prepended; returns (ciphertext, rekey_required).

    A key never encrypts more than its TTL: a payload that would cross the
    budget is refused, and ``rekey_required`` is set once the budget is spent.
    """
    if state.session_key is None:
        raise ProtocolStateError("no session key established")
    if state.rekey_required:
        raise ProtocolStateError("session key TTL exhausted; renegotiate first")
    if not fits_budget(state, len(plaintext)):
        raise ProtocolStateError(
            f"{8 * len(plaintext)} bits would exceed the key budget "
            f"({state.encrypted_bits_used}/{state.ttl_bits} used); renegotiate first"
        )
    iv = os.urandom(IV_BYTES)
    padder = sympadding.PKCS7(128).padder()
    padded = padder.update(plaintext) + padder.finalize()
    enc = _aes(state.session_key, iv).encryptor()
    ciphertext = iv + enc.update(padded) + enc.finalize()
    state.encrypted_bits_used += 8 * len(plaintext)
    state.rekey_required = state.encrypted_bits_used >= state.ttl_bits
    return ciphertext, state.rekey_required


def fits_budget(state: SessionState, n_bytes: int) -> bool:
    """Can ``n_bytes`` more plaintext go under the current key?"""
    return state.encrypted_bits_used + 8 * n_bytes <= state.ttl_bits


def decrypt_payload(state: SessionState, ciphertext: bytes) -> bytes:
    """Inverse of :func:`encrypt_payload`; also enforces the TTL on the receive side."""
    if state.session_key is None:
        raise ProtocolStateError("no session key established")
    if len(ciphertext) < 2 * IV_BYTES or len(ciphertext) % IV_BYTES:
        raise DecryptError("ciphertext length invalid")
    iv, body = ciphertext[:IV_BYTES], ciphertext[IV_BYTES:]
    dec = _aes(state.session_key, iv).decryptor()
    padded = dec.update(body) + dec.finalize()
    unpadder = sympadding.PKCS7(128).unpadder()
    try:
        plaintext = unpadder.update(padded) + unpadder.finalize()
    except ValueError as exc:
        raise DecryptError("bad padding") from exc
    if not fits_budget(state, len(plaintext)):
        raise ProtocolStateError("peer exceeded the session key TTL")
    state.encrypted_bits_used += 8 * len(plaintext)
    return plaintext


def check_replay(state: SessionState, message_id: int) -> bool:
    """Accept (and record) ``message_id`` unless it was seen or fell below the window."""
    if state.replay_seen(message_id):
        return False
    state._accepted.add(message_id)
    if message_id > state.highest_message_id:
        state.highest_message_id = message_id
        floor = message_id - state.window
        if len(state._accepted) > 2 * state.window:
            state._accepted = {m for m in state._accepted if m > floor}
    return True


def accept_checked(state: SessionState, message_id: int) -> bool:
    """Record an id already screened by ``replay_seen`` when it arrived.

    Used for group-signed messages, which are committed only once their
    BATCH_SIGNATURE verifies. Only exact duplicates are refused here.
    """
    if message_id in state._accepted:
        return False
    state._accepted.add(message_id)
    state.highest_message_id = max(state.highest_message_id, message_id)
    return True


# -- signatures ---------------------------------------------------------------

def sign_message(identity: EndpointIdentity, data: bytes) -> bytes:
    """RSA PKCS#1 v1.5 signature over SHA-256(data)."""
    if identity.private_key is None:
        raise AuthError("identity has no private key")
    return identity.private_key.sign(data, padding.PKCS1v15(), hashes.SHA256())


def verify_signature(public_key: rsa.RSAPublicKey, data: bytes, signature: bytes) -> bool:
    try:
        public_key.verify(signature, data, padding.PKCS1v15(), hashes.SHA256())
    except (InvalidSignature, ValueError):
        return False
    return True


def message_digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


_U16 = struct.Struct("!H")
_U64 = struct.Struct("!Q")


def sign_batch(identity: EndpointIdentity, message_ids: list[int], digests: list[bytes]) -> bytes:
    """Build a BATCH_SIGNATURE payload.

    Layout: count(u16) | count x messageId(u64) | sigLen(u16) | signature,
    where the signature covers the concatenated digests in transmission order.
    """
    if not digests:
        raise ValueError("empty batch")
    if len(message_ids) != len(digests):
        raise ValueError("one message id per digest")
    if any(len(d) != DIGEST_BYTES for d in digests):
        raise ValueError("digests must be 32 bytes")
    sig = sign_message(identity, b"".join(digests))
    ids = b"".join(_U64.pack(m) for m in message_ids)
    return _U16.pack(len(digests)) + ids + _U16.pack(len(sig)) + sig


def parse_batch_signature(payload: bytes) -> tuple[list[int], bytes]:
    try:
        (count,) = _U16.unpack_from(payload, 0)
        ids = [_U64.unpack_from(payload, 2 + 8 * i)[0] for i in range(count)]
        pos = 2 + 8 * count
        (slen,) = _U16.unpack_from(payload, pos)
    except struct.error as exc:
        raise ValueError("truncated batch signature") from exc
    sig = payload[pos + 2:pos + 2 + slen]
    if len(sig) != slen or pos + 2 + slen != len(payload) or count == 0:
        raise ValueError("malformed batch signature")
    return ids, sig


def verify_batch(public_key: rsa.RSAPublicKey, digests: list[bytes], signature: bytes) -> bool:
    """False means every message in the group must be retransmitted."""
    return verify_signature(public_key, b"".join(digests), signature)


# -- challenge-response -------------------------------------------------------

@dataclass(frozen=True)
class Challenge:
    nonce: bytes
    issuer_id: bytes
    target_id: bytes
    issued_at: float


def private_transform(key: rsa.RSAPrivateKey, nonce: bytes) -> bytes:
    """Transform ``nonce`` with the private key so the public key can recover it.

    The nonce is split into 32-byte chunks; each chunk becomes one
    PKCS#1 v1.5 signature block whose embedded value is the chunk itself.
    """
    if len(nonce) % CHUNK_BYTES:
        raise ValueError("nonce length must be a multiple of 32")
    algo = utils.Prehashed(hashes.SHA256())
    return b"".join(
        key.sign(nonce[i:i + CHUNK_BYTES], padding.PKCS1v15(), algo)
        for i in range(0, len(nonce), CHUNK_BYTES)
    )


def public_inverse(public_key: rsa.RSAPublicKey, blob: bytes) -> bytes:
    """Recover the value hidden by :func:`private_transform`; AuthError on failure."""
    block = public_key.key_size // 8
    if not blob or len(blob) % block:
        raise AuthError("transform length does not match peer key")
    out = []
    for i in range(0, len(blob), block):
        try:
            out.append(
                public_key.recover_data_from_signature(
                    blob[i:i + block], padding.PKCS1v15(), hashes.SHA256()
                )
            )
        except (InvalidSignature, ValueError) as exc:
            raise AuthError("challenge transform does not invert under peer key") from exc
    return b"".join(out)


def start_authentication(
    identity: EndpointIdentity,
    peer_cert: x509.Certificate,
    ca_cert: x509.Certificate,
) -> tuple[Challenge, bytes]:
    """Validate the peer and produce a fresh challenge plus its private-key transform."""
    if identity.private_key is None:
        raise AuthError("identity has no private key")
    verify_certificate(peer_cert, ca_cert)
    nonce = secrets.token_bytes(NONCE_BYTES)
    challenge = Challenge(nonce, identity.id, certificate_id(peer_cert), time.time())
    return challenge, private_transform(identity.private_key, nonce)


def respond_to_challenge(
    identity: EndpointIdentity, inbound: bytes, peer_public_key: rsa.RSAPublicKey
) -> bytes:
    nonce = public_inverse(peer_public_key, inbound)
    if len(nonce) != NONCE_BYTES:
        raise AuthError("challenge nonce has the wrong length")
    if identity.private_key is None:
        raise AuthError("identity has no private key")
    return private_transform(identity.private_key, nonce)


def verify_challenge(original: Challenge, response: bytes, peer_public_key: rsa.RSAPublicKey) -> bool:
    try:
        recovered = public_inverse(peer_public_key, response)
    except AuthError:
        return False
    return secrets.compare_digest(recovered, original.nonce)


def sync_clock(t1: float, t2: float, t3: float, t4: float) -> float:
    """Peer-minus-local clock offset from a request/reply timestamp exchange."""
    if t4 < t1:
        raise ValueError("reply received before request was sent")
    return ((t2 - t1) + (t3 - t4)) / 2


__all__ = [
    "AuthError", "Challenge", "ChannelError", "DHParams", "DecryptError",
    "DiffieHellman", "KeyAgreementError", "ProtocolStateError", "SessionState",
    "TrustError", "check_replay", "decrypt_payload", "derive_session_key",
    "encrypt_payload", "message_digest", "negotiate_session_key",
    "parse_batch_signature", "respond_to_challenge", "sign_batch",
    "sign_message", "start_authentication", "sync_clock", "verify_batch",
    "verify_challenge", "verify_signature",
]
