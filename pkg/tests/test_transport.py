import socket
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from loghive import channel as ch
from loghive import wire
from loghive.identity import Role, TrustError
from loghive.transport import (
    ACK_OK,
    ACK_RETRANSMIT,
    ACK_RETRY_LATER,
    CryptoParams,
    HandshakeRejected,
    PeerRefused,
    SecureConnection,
    decode_ack,
    encode_ack,
    format_endpoint,
    parse_endpoint,
    split_payload,
)
from loghive.wire import MsgType


class Server:
    """Server half of a socketpair session, run on a thread."""

    def __init__(self, sock, identity, ca, params, handler=None, accept_peer=None):
        self.conn = SecureConnection(sock, identity, ca, params, timeout=10)
        self.received = []
        self.error = None
        self.handler = handler or self._record
        self.accept_peer = accept_peer
        self.thread = threading.Thread(target=self._run, daemon=True)
        self.thread.start()

    def _record(self, payload, msg):
        self.received.append(payload)
        return ACK_OK

    def _run(self):
        try:
            self.conn.server_handshake(self.accept_peer)
            self.conn.serve(self.handler)
        except Exception as exc:
            self.error = exc
        finally:
            self.conn.close()

    def join(self):
        self.thread.join(timeout=20)
        assert not self.thread.is_alive()


@pytest.fixture
def session(pki):
    made = []

    def make(params=None, client=None, handler=None, accept_peer=None, server_params=None):
        a, b = socket.socketpair()
        params = params or CryptoParams()
        srv = Server(b, pki.identity("tp-server", Role.AGENT), pki.ca_cert, server_params or params,
                     handler, accept_peer)
        cli = SecureConnection(a, client or pki.identity("tp-device"), pki.ca_cert, params, timeout=10)
        made.append((cli, srv))
        return cli, srv

    yield make
    for cli, srv in made:
        cli.close()
        srv.join()


def payloads(n, size=100):
    return [(bytes([i % 256]) * size, ()) for i in range(n)]


def test_endpoint_text():
    assert parse_endpoint("[::1]:80") == ("::1", 80)
    assert parse_endpoint("10.0.0.1:7781") == ("10.0.0.1", 7781)
    assert format_endpoint("::1", 80) == "[::1]:80"
    for bad in ("nohost", ":80", "[::1]80"):
        with pytest.raises(ValueError):
            parse_endpoint(bad)


def test_ack_payload():
    assert encode_ack(5, ACK_RETRY_LATER) == bytes(7) + b"\x05\x02"
    assert decode_ack(encode_ack(5, 2) + b"body") == (5, 2)
    with pytest.raises(wire.ValidationError):
        decode_ack(b"\x00")


@given(st.binary(max_size=500), st.one_of(st.none(), st.integers(1, 64)))
def test_split_payload_reassembles(payload, limit):
    pieces = split_payload(payload, limit)
    assert b"".join(pieces) == payload
    if limit:
        assert all(len(p) <= limit for p in pieces)


def test_handshake_agrees_on_key(session):
    cli, srv = session()
    cli.client_handshake()
    cli.send_group(payloads(1))
    cli.close()
    srv.join()
    assert srv.error is None
    assert cli.state.session_key is not None and cli.state.epoch == 1
    assert cli.peer_id == srv.conn.identity.id and srv.conn.peer_id == cli.identity.id
    assert abs(cli.state.clock_offset_ms) < 1000


@pytest.mark.parametrize("batch_size", [1, 4])
def test_data_delivered_in_order(session, batch_size):
    cli, srv = session(CryptoParams(batch_size=batch_size))
    cli.client_handshake()
    items = payloads(10)
    assert cli.send_group(items) == 10
    cli.close()
    srv.join()
    assert srv.received == [p for p, _ in items]


def test_impostor_rejected_at_handshake(session, pki):
    cli, srv = session(client=pki.identity("tp-imp", signed=False))
    with pytest.raises(HandshakeRejected):
        cli.client_handshake()
    srv.join()
    assert isinstance(srv.error, TrustError)
    assert srv.received == []


def test_client_rejects_untrusted_server(pki, other_ca):
    a, b = socket.socketpair()
    srv = Server(b, pki.identity("tp-server", Role.AGENT), pki.ca_cert, CryptoParams())
    cli = SecureConnection(a, pki.identity("tp-device"), other_ca.certificate, CryptoParams(), timeout=10)
    with pytest.raises(TrustError):
        cli.client_handshake()
    cli.close()
    srv.join()


def test_policy_refusal(session):
    cli, srv = session(accept_peer=lambda peer: False)
    with pytest.raises(HandshakeRejected, match="refused by policy"):
        cli.client_handshake()
    srv.join()
    assert isinstance(srv.error, PeerRefused)


def test_ttl_rekeys_and_fragments(session):
    cli, srv = session(CryptoParams(ttl_kilobits=1, batch_size=1))
    cli.client_handshake()
    items = [(b"x" * 100, ()), (b"y" * 125, ()), (b"z" * 600, ())]
    assert cli.send_group(items) == 3
    cli.close()
    srv.join()
    assert srv.error is None
    assert srv.received == [p for p, _ in items]
    # 100 | 125 | 125 x4 + 100: every piece needs a fresh key except the first
    assert cli.state.rekeys == 6
    assert srv.conn.state.epoch == cli.state.epoch


def test_grouped_mode_with_tiny_ttl(session):
    cli, srv = session(CryptoParams(ttl_kilobits=1, batch_size=8))
    cli.client_handshake()
    items = payloads(20, 300)
    assert cli.send_group(items) == 20
    cli.close()
    srv.join()
    assert srv.received == [p for p, _ in items]


def test_replayed_frame_rejected(session):
    cli, srv = session(CryptoParams(batch_size=1))
    cli.client_handshake()
    frames = []
    cli.send_group(payloads(2), on_frame=frames.append)
    for f in frames * 3:
        cli.send_raw(f)
    cli.send_group(payloads(1))
    cli.close()
    srv.join()
    assert len(srv.received) == 3
    assert srv.conn.stats.replays == 6


def test_cross_epoch_replay_rejected(session):
    cli, srv = session(CryptoParams(batch_size=4))
    cli.client_handshake()
    frames = []
    cli.send_group(payloads(4), on_frame=frames.append)
    cli.rekey()
    for f in frames:
        cli.send_raw(f)
    cli.send_group(payloads(1))
    cli.close()
    srv.join()
    assert len(srv.received) == 5
    assert srv.conn.stats.replays == 4


def test_retransmit_then_accept(session):
    calls = []

    def flaky(payload, msg):
        calls.append(payload)
        return ACK_RETRANSMIT if len(calls) == 2 else ACK_OK

    cli, srv = session(CryptoParams(batch_size=1), handler=flaky)
    cli.client_handshake()
    items = payloads(3)
    assert cli.send_group(items) == 3
    cli.close()
    srv.join()
    assert calls == [items[0][0], items[1][0], items[1][0], items[2][0]]
    assert cli.stats.naks == 1 and cli.stats.retransmits == 1


def test_bad_group_signature_is_resent(session, monkeypatch):
    real = ch.sign_batch
    state = {"first": True}

    def broken(identity, ids, digests):
        if state.pop("first", False):
            digests = [bytes(32)] * len(digests)
        return real(identity, ids, digests)

    monkeypatch.setattr(ch, "sign_batch", broken)
    cli, srv = session(CryptoParams(batch_size=4))
    cli.client_handshake()
    items = payloads(4)
    assert cli.send_group(items) == 4
    cli.close()
    srv.join()
    assert srv.received == [p for p, _ in items]
    assert srv.conn.stats.bad_signatures == 1
    assert cli.stats.naks == 4


def test_request_returns_reply_body(session):
    cli, srv = session(handler=lambda payload, msg: (ACK_OK, b"pong:" + payload))
    cli.client_handshake()
    assert cli.request(b"ping") == (ACK_OK, b"pong:ping")
    cli.close()
    srv.join()


def test_tampered_signed_frame_gets_retransmit(session):
    cli, srv = session(CryptoParams(batch_size=1))
    cli.client_handshake()
    msg = cli._data_message(b"hello", (), MsgType.LOG_BATCH, sign=True)
    bad = msg.with_signature(bytes(len(msg.signature)))
    cli.send_raw(wire.encode_message(bad))
    mid, status = cli._next_ack()
    assert (mid, status) == (msg.message_id, ACK_RETRANSMIT)
    cli.close()
    srv.join()
    assert srv.received == []
