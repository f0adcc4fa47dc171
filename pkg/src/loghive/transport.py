"""Secure sessions over a stream socket.

Handshake (connecting side = client)::

    C -> S  CLOCK_SYNC  t1, CERT              S validates the certificate
    S -> C  CLOCK_SYNC  t1 t2 t3, CERT        C validates, computes offset
    C -> S  CLOCK_SYNC  t1 t2 t3 t4           S computes its offset
    C -> S  CHALLENGE            S -> C  CHALLENGE_RESPONSE
    S -> C  CHALLENGE            C -> S  CHALLENGE_RESPONSE
    C -> S  DH_OFFER             S -> C  DH_ACCEPT

Every message is RSA-signed except data messages in group-signing mode,
which are covered by a later BATCH_SIGNATURE. Data messages carry an EPOCH
extension so frames from an earlier session key are always rejected.
A rekey is a fresh DH_OFFER/DH_ACCEPT pair; a REKEY_REQUEST from the server
asks the client to start one.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable

from cryptography import x509

from . import channel as ch
from . import wire
from .identity import (
    EndpointIdentity,
    IdentityValidationError,
    TrustError,
    certificate_der,
    certificate_id,
    load_certificate,
    verify_certificate,
)
from .wire import Ext, MsgType, WireMessage

ZERO_ID = bytes(20)
DEFAULT_VALIDITY_S = 300
DEFAULT_TIMEOUT_S = 30.0

ACK_OK = 0
ACK_RETRANSMIT = 1
ACK_RETRY_LATER = 2

_ACK = struct.Struct("!QB")
_U32 = struct.Struct("!I")
_CLOCK = struct.Struct("!q")
_FRAG = struct.Struct("!II")
MAX_REASSEMBLY = 64 * 1024 * 1024
MAX_PENDING = 4096  # unsigned messages awaiting a BATCH_SIGNATURE

DATA_TYPES = frozenset({MsgType.LOG_BATCH, MsgType.CONTROL_COMMAND})


class TransportError(Exception):
    pass


class HandshakeRejected(ch.AuthError):
    """The peer refused the session (the ERROR reason is in ``args[0]``)."""


class PeerRefused(ch.AuthError):
    """Local policy refused the peer (for example a log filter)."""


@dataclass
class CryptoParams:
    ttl_kilobits: int = ch.DEFAULT_TTL_KILOBITS
    batch_size: int = 1
    sig_proto: int = wire.SIG_SHA256_RSA
    enc_proto: int = wire.ENC_AES128
    window: int = ch.DEFAULT_WINDOW
    validity_s: int = DEFAULT_VALIDITY_S

    def __post_init__(self):
        if self.ttl_kilobits <= 0:
            raise ValueError("ttl_kilobits must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.sig_proto != wire.SIG_SHA256_RSA:
            raise ValueError(f"unsupported signature protocol {self.sig_proto}")
        if self.enc_proto not in (wire.ENC_NONE, wire.ENC_AES128):
            raise ValueError(f"unsupported encryption protocol {self.enc_proto}")


def parse_endpoint(text: str) -> tuple[str, int]:
    """``host:port`` or ``[v6addr]:port``."""
    text = text.strip()
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        if not rest.startswith(":"):
            raise ValueError(f"bad endpoint {text!r}")
        return host, int(rest[1:])
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"bad endpoint {text!r}")
    return host, int(port)


def format_endpoint(host: str, port: int) -> str:
    return f"[{host}]:{port}" if ":" in host else f"{host}:{port}"


def now_ms() -> int:
    return int(time.time() * 1000)


def encode_ack(message_id: int, status: int = ACK_OK) -> bytes:
    return _ACK.pack(message_id, status)


def decode_ack(payload: bytes) -> tuple[int, int]:
    """(message id, status); bytes after the first 9 are a reply body."""
    if len(payload) < _ACK.size:
        raise wire.ValidationError("ACK payload too short")
    return _ACK.unpack_from(payload, 0)


def _ack_payload(message_id: int, result) -> bytes:
    status, extra = result if isinstance(result, tuple) else (result, b"")
    return encode_ack(message_id, status) + extra


@dataclass
class ConnStats:
    sent: int = 0
    received: int = 0
    rejects: int = 0
    replays: int = 0
    expired: int = 0
    bad_signatures: int = 0
    naks: int = 0
    retransmits: int = 0
    stray_acks: int = 0
    bytes_sent: int = 0


class SecureConnection:
    """One authenticated, encrypted session. Owned by a single thread."""

    def __init__(
        self,
        sock: socket.socket,
        identity: EndpointIdentity,
        ca_cert: x509.Certificate,
        params: CryptoParams | None = None,
        timeout: float | None = DEFAULT_TIMEOUT_S,
    ):
        self.sock = sock
        self.identity = identity
        self.ca_cert = ca_cert
        self.params = params or CryptoParams()
        sock.settimeout(timeout)
        if sock.family in (socket.AF_INET, socket.AF_INET6):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._rfile = sock.makefile("rb")
        self.peer_id: bytes = ZERO_ID
        self.peer_cert: x509.Certificate | None = None
        self.state = ch.SessionState(ZERO_ID, self.params.ttl_kilobits, self.params.window)
        self.stats = ConnStats()
        self._next_id = time.time_ns() // 1000
        self._early: list[WireMessage] = []
        self._rekey_requested = False
        self._frag: tuple[int, list[bytes]] | None = None
        self.closed = False

    # -- framing ---------------------------------------------------------

    def _read_exact(self, n: int) -> bytes:
        data = self._rfile.read(n)
        if data is None or len(data) < n:
            raise EOFError("connection closed by peer")
        return data

    def recv_frame(self) -> tuple[WireMessage, bytes]:
        msg, frame = wire.read_message(self._read_exact)
        self.stats.received += 1
        return msg, frame

    def send_raw(self, frame: bytes) -> None:
        self.sock.sendall(frame)
        self.stats.bytes_sent += len(frame)

    def _allocate_id(self) -> int:
        mid = self._next_id
        self._next_id += 1
        return mid

    def build(
        self,
        msg_type: int,
        payload: bytes = b"",
        exts: tuple = (),
        *,
        enc_proto: int = wire.ENC_NONE,
        sign: bool = True,
        receiver: bytes | None = None,
    ) -> WireMessage:
        validity = int(time.time()) + self.params.validity_s
        msg = WireMessage(
            msg_type=int(msg_type),
            sender_id=self.identity.id,
            receiver_id=self.peer_id if receiver is None else receiver,
            message_id=self._allocate_id(),
            validity=validity,
            sig_proto=self.params.sig_proto,
            enc_proto=enc_proto,
            extensions=tuple(exts),
            payload=payload,
        )
        if sign:
            msg = msg.with_signature(ch.sign_message(self.identity, wire.signed_bytes(msg)))
        return msg

    def send(self, msg_type: int, payload: bytes = b"", exts: tuple = (), **kw) -> WireMessage:
        msg = self.build(msg_type, payload, exts, **kw)
        frame = wire.encode_message(msg)
        self.send_raw(frame)
        self.stats.sent += 1
        return msg

    def send_error(self, reason: str) -> None:
        try:
            self.send(MsgType.ERROR, reason.encode()[:1024])
        except OSError:
            pass

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._rfile.close()
        finally:
            self.sock.close()

    # -- receive checks ---------------------------------------------------

    def _peer_now(self) -> float:
        return time.time() + self.state.clock_offset_ms / 1000.0

    def _verify(self, msg: WireMessage) -> bool:
        if self.peer_cert is None or not msg.signature:
            return False
        return ch.verify_signature(self.peer_cert.public_key(), wire.signed_bytes(msg), msg.signature)

    def _expect(self, *types: int) -> WireMessage:
        """Next signed control message of one of ``types`` during the handshake."""
        msg, _ = self.recv_frame()
        if msg.msg_type == MsgType.ERROR:
            raise HandshakeRejected(msg.payload.decode(errors="replace"))
        if msg.msg_type not in types:
            self.send_error("unexpected message")
            raise ch.AuthError(f"expected {types}, got type {msg.msg_type}")
        if msg.sender_id != self.peer_id or msg.receiver_id != self.identity.id:
            self.send_error("wrong endpoint ids")
            raise ch.AuthError("message endpoint ids do not match the session")
        if not self._verify(msg):
            self.send_error("bad signature")
            raise ch.AuthError("handshake message signature invalid")
        if wire.is_expired(msg, self._peer_now()):
            self.send_error("expired")
            raise ch.AuthError("handshake message expired")
        if not ch.check_replay(self.state, msg.message_id):
            self.send_error("replayed")
            raise ch.AuthError("handshake message replayed")
        return msg

    def _adopt_peer(self, msg: WireMessage) -> None:
        der = msg.ext(Ext.CERT)
        if der is None:
            raise TrustError("peer sent no certificate")
        try:
            cert = load_certificate(der)
            cert_id = certificate_id(cert)
        except IdentityValidationError as exc:
            raise TrustError(str(exc)) from exc
        verify_certificate(cert, self.ca_cert)
        if cert_id != msg.sender_id:
            raise TrustError("certificate id does not match sender id")
        self.peer_cert = cert
        self.peer_id = cert_id
        self.state.peer_id = cert_id
        if not self._verify(msg):
            raise ch.AuthError("first message signature invalid")
        if not ch.check_replay(self.state, msg.message_id):
            raise ch.AuthError("first message replayed")

    # -- handshake ----------------------------------------------------------

    def client_handshake(self) -> None:
        t1 = now_ms()
        self.send(MsgType.CLOCK_SYNC, _CLOCK.pack(t1), ((Ext.CERT, certificate_der(self.identity.certificate)),),
                  receiver=ZERO_ID)
        msg, _ = self.recv_frame()
        t4 = now_ms()
        if msg.msg_type == MsgType.ERROR:
            raise HandshakeRejected(msg.payload.decode(errors="replace"))
        if msg.msg_type != MsgType.CLOCK_SYNC or msg.receiver_id != self.identity.id:
            raise ch.AuthError("expected CLOCK_SYNC reply")
        try:
            self._adopt_peer(msg)
        except (TrustError, ch.AuthError) as exc:
            self.send_error(f"rejected: {exc}")
            raise
        r1, t2, t3 = struct.unpack("!qqq", msg.payload)
        if r1 != t1:
            raise ch.AuthError("clock sync echo mismatch")
        self.state.clock_offset_ms = ch.sync_clock(t1, t2, t3, t4)
        self.send(MsgType.CLOCK_SYNC, struct.pack("!qqqq", t1, t2, t3, t4))

        challenge, blob = ch.start_authentication(self.identity, self.peer_cert, self.ca_cert)
        self.send(MsgType.CHALLENGE, blob)
        resp = self._expect(MsgType.CHALLENGE_RESPONSE)
        if not ch.verify_challenge(challenge, resp.payload, self.peer_cert.public_key()):
            self.send_error("challenge response mismatch")
            raise ch.AuthError("peer failed the challenge")

        inbound = self._expect(MsgType.CHALLENGE)
        try:
            answer = ch.respond_to_challenge(self.identity, inbound.payload, self.peer_cert.public_key())
        except ch.AuthError:
            self.send_error("challenge does not invert")
            raise
        self.send(MsgType.CHALLENGE_RESPONSE, answer)
        self._client_dh()

    def _client_dh(self) -> None:
        own = ch.DiffieHellman()
        self.send(MsgType.DH_OFFER, own.public_bytes(), ((Ext.TTL, _U32.pack(self.params.ttl_kilobits)),))
        while True:
            msg = self._expect(MsgType.DH_ACCEPT, MsgType.ACK, MsgType.REKEY_REQUEST)
            if msg.msg_type == MsgType.DH_ACCEPT:
                break
            if msg.msg_type == MsgType.ACK:
                self._early.append(msg)
        ch.negotiate_session_key(self.state, own, msg.payload)
        self._rekey_requested = False

    def server_handshake(self, accept_peer: Callable[[bytes], bool] | None = None) -> None:
        msg, _ = self.recv_frame()
        t2 = now_ms()
        if msg.msg_type != MsgType.CLOCK_SYNC:
            self.send_error("expected CLOCK_SYNC")
            raise ch.AuthError("first message must be CLOCK_SYNC")
        try:
            self._adopt_peer(msg)
        except (TrustError, ch.AuthError) as exc:
            self.send_error(f"rejected: {exc}")
            raise
        if accept_peer is not None and not accept_peer(self.peer_id):
            self.send_error("refused by policy")
            raise PeerRefused(f"peer {self.peer_id.hex()} refused by policy")
        (t1,) = _CLOCK.unpack(msg.payload)
        self.send(MsgType.CLOCK_SYNC, struct.pack("!qqq", t1, t2, now_ms()),
                  ((Ext.CERT, certificate_der(self.identity.certificate)),))
        sync = self._expect(MsgType.CLOCK_SYNC)
        c1, c2, c3, c4 = struct.unpack("!qqqq", sync.payload)
        self.state.clock_offset_ms = -ch.sync_clock(c1, c2, c3, c4)

        inbound = self._expect(MsgType.CHALLENGE)
        try:
            answer = ch.respond_to_challenge(self.identity, inbound.payload, self.peer_cert.public_key())
        except ch.AuthError:
            self.send_error("challenge does not invert")
            raise
        self.send(MsgType.CHALLENGE_RESPONSE, answer)

        challenge, blob = ch.start_authentication(self.identity, self.peer_cert, self.ca_cert)
        self.send(MsgType.CHALLENGE, blob)
        resp = self._expect(MsgType.CHALLENGE_RESPONSE)
        if not ch.verify_challenge(challenge, resp.payload, self.peer_cert.public_key()):
            self.send_error("challenge response mismatch")
            raise ch.AuthError("peer failed the challenge")

        offer = self._expect(MsgType.DH_OFFER)
        self._server_dh(offer)

    def _server_dh(self, offer: WireMessage) -> None:
        own = ch.DiffieHellman()
        ttl = offer.ext(Ext.TTL)
        if ttl is not None and _U32.unpack(ttl)[0] > 0:
            self.state.ttl_kilobits = _U32.unpack(ttl)[0]
        try:
            ch.negotiate_session_key(self.state, own, offer.payload)
        except ch.KeyAgreementError:
            self.send_error("bad DH value")
            raise
        self.send(MsgType.DH_ACCEPT, own.public_bytes())

    # -- client data path ---------------------------------------------------

    def rekey(self) -> None:
        self._client_dh()

    def _fragment_bytes(self) -> int | None:
        """Largest plaintext one key may carry; None when payloads are not encrypted."""
        if self.params.enc_proto != wire.ENC_AES128:
            return None
        return max(1, self.state.ttl_bits // 8)

    def _data_message(self, payload: bytes, exts: tuple, msg_type: int, sign: bool) -> WireMessage:
        encrypting = self.params.enc_proto == wire.ENC_AES128
        if (self.state.rekey_required or self._rekey_requested
                or (encrypting and not ch.fits_budget(self.state, len(payload)))):
            self.rekey()
        exts = tuple(exts) + ((Ext.EPOCH, _U32.pack(self.state.epoch)),)
        if self.params.enc_proto == wire.ENC_AES128:
            body, _ = ch.encrypt_payload(self.state, payload)
        else:
            body = payload
        return self.build(msg_type, body, exts, enc_proto=self.params.enc_proto, sign=sign)

    def send_group(
        self,
        items: list[tuple[bytes, tuple]],
        msg_type: int = MsgType.LOG_BATCH,
        max_attempts: int = 5,
        on_frame: Callable[[bytes], None] | None = None,
    ) -> int:
        """Send data items and wait until every one is acknowledged.

        With ``batch_size == 1`` each item is signed and sent stop-and-wait,
        so a NAK never reorders the stream. With ``batch_size > 1`` the items
        go out in groups covered by one BATCH_SIGNATURE each; a rejected group
        signature makes the peer NAK the whole group, which is then sent again
        as fresh messages. Returns the number of acknowledgements.
        """
        step = self.params.batch_size
        acked = 0
        for start in range(0, len(items), step):
            acked += self._send_acked(items[start:start + step], msg_type, max_attempts, on_frame)
        return acked

    def _send_acked(self, items, msg_type, max_attempts, on_frame) -> int:
        grouped = self.params.batch_size > 1
        limit = self._fragment_bytes()
        todo = list(range(len(items)))
        acked = 0
        for attempt in range(1, max_attempts + 1):
            if attempt > 1:
                self.stats.retransmits += len(todo)
            outstanding: dict[int, tuple[int, bool]] = {}
            ids: list[int] = []
            digests: list[bytes] = []
            for idx in todo:
                payload, exts = items[idx]
                pieces = split_payload(payload, limit)
                for k, piece in enumerate(pieces):
                    e = tuple(exts)
                    if len(pieces) > 1:
                        e += ((Ext.FRAGMENT, _FRAG.pack(k, len(pieces))),)
                    msg = self._data_message(piece, e, msg_type, sign=not grouped)
                    frame = wire.encode_message(msg)
                    self.send_raw(frame)
                    self.stats.sent += 1
                    outstanding[msg.message_id] = (idx, k == len(pieces) - 1)
                    if on_frame is not None:
                        on_frame(frame)
                    if grouped:
                        ids.append(msg.message_id)
                        digests.append(ch.message_digest(wire.signed_bytes(msg)))
            if grouped:
                self.send(MsgType.BATCH_SIGNATURE, ch.sign_batch(self.identity, ids, digests), sign=False)
            retry: set[int] = set()
            done: set[int] = set()
            while outstanding:
                mid, status = self._next_ack()
                entry = outstanding.pop(mid, None)
                if entry is None:
                    self.stats.stray_acks += 1
                    continue
                idx, final = entry
                if status == ACK_OK:
                    if final:
                        done.add(idx)
                else:
                    self.stats.naks += 1
                    retry.add(idx)
            acked += len(done - retry)
            if not retry:
                return acked
            time.sleep(0.05 * attempt)
            todo = sorted(retry)
        raise TransportError(f"{len(todo)} items still unacknowledged after {max_attempts} attempts")

    def _next_ack(self) -> tuple[int, int]:
        while True:
            if self._early:
                msg = self._early.pop(0)
            else:
                msg, _ = self.recv_frame()
                if msg.msg_type == MsgType.ERROR:
                    raise HandshakeRejected(msg.payload.decode(errors="replace"))
                if (msg.sender_id != self.peer_id or not self._verify(msg)
                        or wire.is_expired(msg, self._peer_now())
                        or not ch.check_replay(self.state, msg.message_id)):
                    self.stats.rejects += 1
                    continue
                if msg.msg_type == MsgType.REKEY_REQUEST:
                    self._rekey_requested = True
                    continue
                if msg.msg_type != MsgType.ACK:
                    continue
            return decode_ack(msg.payload)

    def request(self, payload: bytes, msg_type: int = MsgType.CONTROL_COMMAND) -> tuple[int, bytes]:
        """Send one signed data message; return the ACK status and reply body."""
        msg = self._data_message(payload, (), msg_type, sign=True)
        self.send_raw(wire.encode_message(msg))
        self.stats.sent += 1
        while True:
            reply, _ = self.recv_frame()
            if reply.msg_type == MsgType.ERROR:
                raise HandshakeRejected(reply.payload.decode(errors="replace"))
            if (reply.msg_type != MsgType.ACK or not self._verify(reply)
                    or not ch.check_replay(self.state, reply.message_id)):
                self.stats.rejects += 1
                continue
            mid, status = decode_ack(reply.payload)
            if mid == msg.message_id:
                return status, reply.payload[_ACK.size:]

    # -- server data path ---------------------------------------------------

    def serve(
        self,
        handler: Callable[[bytes, WireMessage], int],
        stop: threading.Event | None = None,
    ) -> None:
        """Receive data until the peer closes.

        ``handler(plaintext, msg)`` returns an ACK status, or ``(status, body)``
        to append a reply body to the ACK.
        """
        pending: dict[int, tuple[WireMessage, bytes, bytes]] = {}
        while stop is None or not stop.is_set():
            try:
                msg, _ = self.recv_frame()
            except (EOFError, OSError, wire.WireError):
                # peer gone, socket closed by stop(), idle timeout or a desynced stream
                return
            if msg.msg_type == MsgType.ERROR:
                return
            if msg.sender_id != self.peer_id or msg.receiver_id != self.identity.id:
                self.stats.rejects += 1
                continue
            if wire.is_expired(msg, self._peer_now()):
                self.stats.expired += 1
                self.stats.rejects += 1
                continue
            if msg.msg_type == MsgType.DH_OFFER:
                if self._verify(msg) and ch.check_replay(self.state, msg.message_id):
                    self._server_dh(msg)
                else:
                    self.stats.rejects += 1
                continue
            if msg.msg_type == MsgType.BATCH_SIGNATURE:
                self._commit_group(msg, pending, handler)
                continue
            if msg.msg_type not in DATA_TYPES:
                continue
            epoch = msg.ext(Ext.EPOCH)
            if epoch is None or _U32.unpack(epoch)[0] != self.state.epoch:
                self.stats.replays += 1
                self.stats.rejects += 1
                continue
            if msg.signature:
                if not self._verify(msg):
                    self.stats.bad_signatures += 1
                    self.send(MsgType.ACK, encode_ack(msg.message_id, ACK_RETRANSMIT))
                    continue
                if not ch.check_replay(self.state, msg.message_id):
                    self.stats.replays += 1
                    self.stats.rejects += 1
                    continue
                try:
                    plaintext = self._open(msg)
                except ch.ChannelError:
                    self.stats.rejects += 1
                    continue
                self.send(MsgType.ACK, self._deliver(plaintext, msg, handler))
            else:
                if msg.message_id in pending or self.state.replay_seen(msg.message_id):
                    self.stats.replays += 1
                    self.stats.rejects += 1
                    continue
                try:
                    plaintext = self._open(msg)
                except ch.ChannelError:
                    plaintext = None
                if len(pending) >= MAX_PENDING:
                    pending.pop(next(iter(pending)))
                pending[msg.message_id] = (msg, ch.message_digest(wire.signed_bytes(msg)), plaintext)

    def _deliver(self, plaintext: bytes, msg: WireMessage, handler) -> bytes:
        """Hand a payload to ``handler`` (reassembling fragments); returns the ACK payload."""
        frag = msg.ext(Ext.FRAGMENT)
        if frag is None:
            self._frag = None
            return _ack_payload(msg.message_id, handler(plaintext, msg))
        index, count = _FRAG.unpack(frag)
        if index == 0:
            self._frag = (count, [])
        buf = self._frag
        if (buf is None or buf[0] != count or len(buf[1]) != index
                or sum(map(len, buf[1])) + len(plaintext) > MAX_REASSEMBLY):
            # a piece went missing; the sender retransmits the whole payload
            self._frag = None
            return encode_ack(msg.message_id, ACK_RETRANSMIT)
        buf[1].append(plaintext)
        if index + 1 < count:
            return encode_ack(msg.message_id, ACK_OK)
        self._frag = None
        return _ack_payload(msg.message_id, handler(b"".join(buf[1]), msg))

    def _open(self, msg: WireMessage) -> bytes:
        if msg.enc_proto == wire.ENC_AES128:
            return ch.decrypt_payload(self.state, msg.payload)
        if msg.enc_proto == wire.ENC_NONE:
            return msg.payload
        raise ch.ProtocolStateError(f"unknown encryption protocol {msg.enc_proto}")

    def _commit_group(self, sig_msg: WireMessage, pending: dict, handler) -> None:
        try:
            ids, signature = ch.parse_batch_signature(sig_msg.payload)
        except ValueError:
            self.stats.rejects += 1
            return
        if self.state.replay_seen(sig_msg.message_id):
            self.stats.replays += 1
            self.stats.rejects += 1
            return
        entries = [pending.get(mid) for mid in ids]
        ok = (
            all(e is not None and e[2] is not None for e in entries)
            and self.peer_cert is not None
            and ch.verify_batch(self.peer_cert.public_key(), [e[1] for e in entries], signature)
        )
        if not ok:
            self.stats.bad_signatures += 1
            for mid in ids:
                pending.pop(mid, None)
                self.send(MsgType.ACK, encode_ack(mid, ACK_RETRANSMIT))
            return
        ch.check_replay(self.state, sig_msg.message_id)
        for mid, (msg, _, plaintext) in zip(ids, entries):
            pending.pop(mid, None)
            if not ch.accept_checked(self.state, mid):
                self.stats.replays += 1
                self.stats.rejects += 1
                continue
            self.send(MsgType.ACK, self._deliver(plaintext, msg, handler))


def split_payload(payload: bytes, limit: int | None) -> list[bytes]:
    if limit is None or len(payload) <= limit:
        return [payload]
    return [payload[i:i + limit] for i in range(0, len(payload), limit)]


def open_socket(endpoint: str | tuple[str, int], timeout: float = 10.0) -> socket.socket:
    host, port = parse_endpoint(endpoint) if isinstance(endpoint, str) else endpoint
    return socket.create_connection((host, port), timeout=timeout)


def connect(
    endpoint: str | tuple[str, int],
    identity: EndpointIdentity,
    ca_cert: x509.Certificate,
    params: CryptoParams | None = None,
    timeout: float = DEFAULT_TIMEOUT_S,
) -> SecureConnection:
    """Open a socket to ``endpoint`` and run the client handshake."""
    sock = open_socket(endpoint, timeout)
    conn = SecureConnection(sock, identity, ca_cert, params, timeout)
    try:
        conn.client_handshake()
    except BaseException:
        conn.close()
        raise
    return conn


def listen(endpoint: str | tuple[str, int], backlog: int = 64) -> socket.socket:
    host, port = parse_endpoint(endpoint) if isinstance(endpoint, str) else endpoint
    family = socket.AF_INET6 if ":" in host else socket.AF_INET
    info = socket.getaddrinfo(host, port, family, socket.SOCK_STREAM)[0]
    sock = socket.socket(family, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind(info[4])
    sock.listen(backlog)
    return sock


def bound_endpoint(sock: socket.socket) -> str:
    host, port = sock.getsockname()[:2]
    return format_endpoint(host, port)


def close_listener(sock: socket.socket) -> None:
    """Close a listening socket, waking any thread blocked in accept()."""
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    sock.close()
