"""The agent: device capture, compression/normalization, forwarding, control.

Threads:

* capture acceptor, plus one exclusive worker per connected device;
* one forwarder owning the warehouse session (single FIFO, so batches from
  one device reach the warehouse in the order the device sent them);
* control acceptor, plus one worker per controller session;
* optional discovery responder.

A device batch is acknowledged once it is compressed and queued for the
warehouse. Each device may have at most ``queue_limit`` batches queued;
beyond that its worker blocks, which holds back the device's ACK and so
throttles the device.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path

from . import channel as ch
from . import wire
from .cbe import attach_metadata_l1, cbe_document
from .config import AgentConfig, ConfigError, _crypto_from, _idset
from .discovery import DiscoveryResponder
from .identity import (
    EndpointIdentity,
    IdentityError,
    Keyring,
    Role,
    certificate_role,
    load_certificate,
    load_identity,
)
from .pipeline import DevicePipeline, serialize_batch
from .transport import (
    ACK_OK,
    ACK_RETRANSMIT,
    CryptoParams,
    SecureConnection,
    TransportError,
    bound_endpoint,
    close_listener,
    connect,
    listen,
    parse_endpoint,
)
from .warehouse import pack_forward_payload, pack_origin
from .wire import Ext

log = logging.getLogger(__name__)

_U64 = struct.Struct("!Q")

VERBS = ("SET_WAREHOUSE", "SET_LOG_FILTER", "SET_CRYPTO", "GET_STATUS")
CONTROL_OK = 0
CONTROL_ERROR = 1


class AgentError(Exception):
    pass


@dataclass
class ForwardItem:
    device_id: bytes
    origin_id: int
    payload: bytes
    release: threading.Semaphore | None = None


_STOP = object()


def encode_command(verb: str, args: dict[str, str] | None = None) -> bytes:
    lines = [verb] + [f"{k}={v}" for k, v in (args or {}).items()]
    return "\n".join(lines).encode()


def parse_command(payload: bytes) -> tuple[str, dict[str, str]]:
    text = payload.decode()
    head, *rest = text.split("\n")
    args = {}
    for line in rest:
        if not line.strip():
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise ValueError(f"malformed argument {line!r}")
        args[k.strip()] = v.strip()
    return head.strip().upper(), args


def encode_lines(lines) -> bytes:
    """Device payload: every line terminated by a newline."""
    return "".join(line + "\n" for line in lines).encode()


def decode_lines(payload: bytes) -> list[str]:
    text = payload.decode()
    if text and not text.endswith("\n"):
        raise ValueError("payload must end with a newline")
    return text.split("\n")[:-1]


class Agent:
    def __init__(
        self,
        config: AgentConfig,
        identity: EndpointIdentity | None = None,
        ca_cert=None,
    ):
        self.config = config
        self.identity = identity or load_identity(config.identity_path)
        if ca_cert is None:
            ca_cert = load_certificate(Path(config.ca_cert).read_bytes())
        self.ca_cert = ca_cert
        self.keyring = Keyring(config.keyring_path)
        self._config_lock = threading.Lock()
        self._counter_lock = threading.Lock()
        self.counters = {
            "sessions": 0, "active_sessions": 0, "refused_sessions": 0,
            "batches": 0, "lines": 0, "forwarded": 0, "forward_errors": 0,
            "rekeys": 0, "rejects": 0, "replays": 0, "expired": 0, "control_commands": 0,
        }
        self._queue: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self._abandon = threading.Event()
        self._threads: list[threading.Thread] = []
        self._workers: list[threading.Thread] = []
        self._conns: set[SecureConnection] = set()
        self._capture: socket.socket | None = None
        self._control: socket.socket | None = None
        self._forwarder: threading.Thread | None = None
        self._discovery: DiscoveryResponder | None = None
        self._slots: dict[bytes, threading.BoundedSemaphore] = {}

    # -- lifecycle ------------------------------------------------------------

    @property
    def capture_endpoint(self) -> str:
        return bound_endpoint(self._capture)

    @property
    def control_endpoint(self) -> str:
        return bound_endpoint(self._control)

    def start(self) -> "Agent":
        try:
            self._capture = listen(self.config.capture_listen)
            self._control = listen(self.config.control_listen)
        except OSError as exc:
            self._close_listeners()
            raise AgentError(f"cannot bind: {exc}") from exc
        self._spawn(self._accept_loop, self._capture, self._device_session, name="capture")
        self._spawn(self._accept_loop, self._control, self._control_session, name="control")
        self._forwarder = self._spawn(self._forward_loop, name="forwarder")
        if self.config.discovery:
            host, port = parse_endpoint(self.config.discovery)
            try:
                self._discovery = DiscoveryResponder(
                    self.identity, self.keyring, lambda peer: self.capture_endpoint, host, port
                ).start()
            except OSError as exc:
                log.warning("discovery disabled: %s", exc)
        return self

    def _spawn(self, target, *args, name: str) -> threading.Thread:
        t = threading.Thread(target=target, args=args, name=f"agent-{name}", daemon=True)
        t.start()
        self._threads.append(t)
        return t

    def _close_listeners(self) -> None:
        for s in (self._capture, self._control):
            if s is not None:
                close_listener(s)

    def stop(self, drain: bool = True, timeout: float = 30.0) -> None:
        """Stop accepting, end sessions, and (by default) flush queued batches."""
        if self._stop.is_set():
            return
        self._stop.set()
        self._close_listeners()
        if self._discovery is not None:
            self._discovery.stop()
        with self._counter_lock:
            conns = list(self._conns)
        for c in conns:
            try:
                c.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        for t in list(self._workers):
            t.join(timeout=5)
        if not drain:
            self._abandon.set()
        self._queue.put(_STOP)
        if self._forwarder is not None:
            self._forwarder.join(timeout=timeout)
        for t in self._threads:
            t.join(timeout=2)

    def _bump(self, key: str, n: int = 1) -> None:
        with self._counter_lock:
            self.counters[key] += n

    def status(self) -> dict[str, int]:
        with self._counter_lock:
            out = dict(self.counters)
        out["queued"] = self._queue.qsize()
        return out

    def _accept_loop(self, lsock: socket.socket, handler) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = lsock.accept()
            except OSError:
                return
            t = threading.Thread(target=handler, args=(sock,), name="agent-session", daemon=True)
            t.start()
            self._workers = [w for w in self._workers if w.is_alive()] + [t]

    # -- device sessions ------------------------------------------------------

    def _device_session(self, sock: socket.socket) -> None:
        cfg = self.config
        conn = SecureConnection(sock, self.identity, self.ca_cert, cfg.crypto, timeout=None)
        with self._counter_lock:
            self._conns.add(conn)
        try:
            self.handle_device_session(conn, cfg)
        finally:
            with self._counter_lock:
                self._conns.discard(conn)
            conn.close()

    def handle_device_session(self, conn: SecureConnection, cfg: AgentConfig) -> int:
        """Handshake, then compress and queue every batch; returns batches queued."""
        def accept(peer_id: bytes) -> bool:
            return certificate_role(conn.peer_cert) == Role.DEVICE.value and self.config.accepts(peer_id)

        try:
            conn.server_handshake(accept_peer=accept)
        except (ch.ChannelError, IdentityError, OSError, EOFError, ValueError) as exc:
            log.info("device session refused: %s", exc)
            self._bump("refused_sessions")
            return 0
        self._bump("sessions")
        self._bump("active_sessions")
        self.keyring.add(conn.peer_cert)
        device_id = conn.peer_id
        slots = self._slots.setdefault(device_id, threading.BoundedSemaphore(cfg.queue_limit))
        pipe = DevicePipeline(cfg.theta, cfg.learning_window)
        family = "ipv6" if conn.sock.family == socket.AF_INET6 else "ipv4"
        queued = 0
        expected_line: list[int | None] = [None]
        rekeys_seen = [0]

        def on_batch(plaintext: bytes, msg: wire.WireMessage) -> int:
            nonlocal queued
            try:
                lines = decode_lines(plaintext)
            except (UnicodeDecodeError, ValueError):
                self._bump("rejects")
                return ACK_RETRANSMIT
            seq = msg.ext(Ext.SEQUENCE)
            first = _U64.unpack(seq)[0] if seq else pipe.next_line
            quality = "unknown" if seq is None else (
                "gapped" if expected_line[0] is not None and first != expected_line[0] else "complete")
            expected_line[0] = first + len(lines)
            batch = pipe.process(lines, first)
            body = serialize_batch(batch)
            doc = b""
            if cfg.emit_cbe:
                meta = attach_metadata_l1(
                    device_id, self.config.devices, time.time(), conn.state.clock_offset_ms,
                    quality, f"{family}/epoch{conn.state.epoch}",
                )
                doc = cbe_document(batch.records, batch.dictionary, meta, device_id)
            while not slots.acquire(timeout=0.5):
                if self._abandon.is_set():
                    return ACK_RETRANSMIT
            self._queue.put(ForwardItem(device_id, msg.message_id, pack_forward_payload(body, doc), slots))
            self._bump("batches")
            self._bump("lines", len(lines))
            queued += 1
            if conn.state.rekeys != rekeys_seen[0]:
                self._bump("rekeys", conn.state.rekeys - rekeys_seen[0])
                rekeys_seen[0] = conn.state.rekeys
            return ACK_OK

        try:
            conn.serve(on_batch, self._stop)
        finally:
            st = conn.stats
            if conn.state.rekeys != rekeys_seen[0]:
                self._bump("rekeys", conn.state.rekeys - rekeys_seen[0])
            self._bump("rejects", st.rejects)
            self._bump("replays", st.replays)
            self._bump("expired", st.expired)
            self._bump("active_sessions", -1)
        return queued

    # -- forwarding -----------------------------------------------------------

    def _forward_loop(self) -> None:
        conn: SecureConnection | None = None
        conn_endpoint = None
        stopping = False
        while not stopping:
            item = self._queue.get()
            if item is _STOP:
                break
            group = [item]
            limit = max(1, self.config.crypto.batch_size)
            while len(group) < limit:
                try:
                    nxt = self._queue.get_nowait()
                except queue.Empty:
                    break
                if nxt is _STOP:
                    stopping = True
                    break
                group.append(nxt)
            backoff = 0.1
            while True:
                if self._abandon.is_set():
                    break
                endpoint = self.config.warehouse_endpoint
                try:
                    if conn is None or conn_endpoint != endpoint:
                        if conn is not None:
                            conn.close()
                        conn = None
                        conn = connect(endpoint, self.identity, self.ca_cert, self.config.crypto)
                        conn_endpoint = endpoint
                    before = conn.state.rekeys
                    conn.send_group([
                        (it.payload, ((Ext.ORIGIN, pack_origin(it.device_id, it.origin_id)),))
                        for it in group
                    ])
                    self._bump("rekeys", conn.state.rekeys - before)
                    self._bump("forwarded", len(group))
                    break
                except (OSError, EOFError, ch.ChannelError, TransportError, wire.WireError) as exc:
                    log.warning("forwarding to %s failed: %s", endpoint, exc)
                    self._bump("forward_errors")
                    if conn is not None:
                        conn.close()
                    conn = None
                    if self._abandon.wait(backoff):
                        break
                    backoff = min(backoff * 2, 2.0)
            for it in group:
                if it.release is not None:
                    it.release.release()
        if conn is not None:
            conn.close()

    # -- control --------------------------------------------------------------

    def _authorized_controller(self, conn: SecureConnection, peer_id: bytes) -> bool:
        allowed = self.config.controllers
        if allowed is not None:
            return peer_id.hex() in allowed
        return certificate_role(conn.peer_cert) == Role.CONTROLLER.value

    def _control_session(self, sock: socket.socket) -> None:
        conn = SecureConnection(sock, self.identity, self.ca_cert, self.config.crypto, timeout=60)
        with self._counter_lock:
            self._conns.add(conn)
        try:
            try:
                conn.server_handshake(accept_peer=lambda pid: self._authorized_controller(conn, pid))
            except (ch.ChannelError, IdentityError, OSError, EOFError, ValueError) as exc:
                log.info("control session refused: %s", exc)
                self._bump("refused_sessions")
                return

            def on_command(plaintext: bytes, msg: wire.WireMessage):
                if not msg.signature:
                    return CONTROL_ERROR, b"unsigned command"
                self._bump("control_commands")
                try:
                    verb, args = parse_command(plaintext)
                    return CONTROL_OK, self.apply_control_command(verb, args).encode()
                except (ValueError, ConfigError, UnicodeDecodeError) as exc:
                    return CONTROL_ERROR, f"error: {exc}".encode()

            conn.serve(on_command, self._stop)
        finally:
            with self._counter_lock:
                self._conns.discard(conn)
            conn.close()

    def apply_control_command(self, verb: str, args: dict[str, str]) -> str:
        """Apply one command atomically; returns the reply text."""
        if verb not in VERBS:
            raise ValueError(f"unknown verb {verb!r}")
        if verb == "GET_STATUS":
            st = self.status()
            st["warehouse"] = self.config.warehouse_endpoint
            return "\n".join(f"{k}={v}" for k, v in st.items())
        with self._config_lock:
            cfg = self.config
            if verb == "SET_WAREHOUSE":
                if "endpoint" not in args:
                    raise ValueError("SET_WAREHOUSE needs endpoint=")
                new = replace(cfg, warehouse_endpoint=args["endpoint"])
            elif verb == "SET_LOG_FILTER":
                if "devices" not in args:
                    raise ValueError("SET_LOG_FILTER needs devices=")
                new = replace(cfg, log_filter=_idset(args["devices"]))
            else:
                crypto = _crypto_from(args, cfg.crypto)
                new = replace(cfg, crypto=crypto)
            self.config = new  # replace() re-validates; a bad value never lands
        return "ok"


def send_control(
    endpoint: str,
    identity: EndpointIdentity,
    ca_cert,
    verb: str,
    args: dict[str, str] | None = None,
    params: CryptoParams | None = None,
) -> tuple[int, str]:
    """Run one control command against an agent; returns (status, reply text)."""
    conn = connect(endpoint, identity, ca_cert, params or CryptoParams())
    try:
        status, body = conn.request(encode_command(verb, args))
        return status, body.decode(errors="replace")
    finally:
        conn.close()


def run_agent(config: AgentConfig, stop: threading.Event | None = None) -> Agent:
    """Start an agent; when ``stop`` is given, block until it is set and drain."""
    agent = Agent(config).start()
    log.info("agent %s capture=%s control=%s", agent.identity.hex_id, agent.capture_endpoint, agent.control_endpoint)
    if stop is not None:
        stop.wait()
        agent.stop(drain=True)
    return agent
