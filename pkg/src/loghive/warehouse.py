"""Warehouse server: verified batches persisted in per-device append-only logs.

Disk layout under the store directory (see docs/store-format.md)::

    <hexdevice>.log   records: bodyLen(u32) | body | sha256(body)
    <hexdevice>.idx   dedup index: agentId(20) | messageId(u64) | offset(u64)

Record body::

    deviceId(20) | agentId(20) | messageId(u64) | receivedAt ms(u64)
    | batchLen(u32) | batch | cbeLen(u32) | cbe

The index is a cache of the log. On open, records past the last indexed
offset are re-indexed and a torn tail (incomplete record) is truncated, so
offsets of complete records never move.
"""

from __future__ import annotations

import errno
import hashlib
import logging
import os
import socket
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from . import channel as ch
from .config import WarehouseConfig
from .identity import (
    IdentityError,
    Keyring,
    Role,
    certificate_role,
    load_certificate,
    load_identity,
)
from .pipeline import CorruptBatchError, decompress, deserialize_batch
from .transport import (
    ACK_OK,
    ACK_RETRANSMIT,
    ACK_RETRY_LATER,
    SecureConnection,
    bound_endpoint,
    close_listener,
    listen,
)
from .wire import Ext, WireMessage

log = logging.getLogger(__name__)

_BODY_HEAD = struct.Struct("!20s20sQQ")
_U32 = struct.Struct("!I")
_IDX = struct.Struct("!20sQQ")
_ORIGIN = struct.Struct("!20sQ")
DIGEST = 32


class StoreCorruptionError(Exception):
    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: corrupt record at offset {offset}: {reason}")
        self.path = path
        self.offset = offset


def pack_forward_payload(batch: bytes, cbe: bytes) -> bytes:
    return _U32.pack(len(batch)) + batch + _U32.pack(len(cbe)) + cbe


def unpack_forward_payload(payload: bytes) -> tuple[bytes, bytes]:
    try:
        (n,) = _U32.unpack_from(payload, 0)
        batch = payload[4:4 + n]
        (m,) = _U32.unpack_from(payload, 4 + n)
        cbe = payload[8 + n:8 + n + m]
    except struct.error as exc:
        raise ValueError("truncated forward payload") from exc
    if len(batch) != n or len(cbe) != m or 8 + n + m != len(payload):
        raise ValueError("malformed forward payload")
    return batch, cbe


def pack_origin(device_id: bytes, message_id: int) -> bytes:
    return _ORIGIN.pack(device_id, message_id)


def unpack_origin(value: bytes) -> tuple[bytes, int]:
    return _ORIGIN.unpack(value)


@dataclass(frozen=True)
class WarehouseRecord:
    device_id: bytes
    agent_id: bytes
    message_id: int
    received_at: float
    batch: bytes
    cbe_document: bytes

    @property
    def batch_digest(self) -> bytes:
        return hashlib.sha256(self.batch).digest()

    def encode_body(self) -> bytes:
        return b"".join([
            _BODY_HEAD.pack(self.device_id, self.agent_id, self.message_id, int(self.received_at * 1000)),
            _U32.pack(len(self.batch)), self.batch,
            _U32.pack(len(self.cbe_document)), self.cbe_document,
        ])

    @classmethod
    def decode_body(cls, body: bytes) -> "WarehouseRecord":
        dev, agent, mid, ms = _BODY_HEAD.unpack_from(body, 0)
        pos = _BODY_HEAD.size
        (n,) = _U32.unpack_from(body, pos)
        batch = body[pos + 4:pos + 4 + n]
        pos += 4 + n
        (m,) = _U32.unpack_from(body, pos)
        cbe = body[pos + 4:pos + 4 + m]
        if pos + 4 + m != len(body) or len(batch) != n:
            raise ValueError("record body length mismatch")
        return cls(dev, agent, mid, ms / 1000.0, batch, cbe)


class _DeviceLog:
    """Single-writer append-only log for one device."""

    def __init__(self, store: Path, device_id: bytes, fsync: bool):
        self.log_path = store / f"{device_id.hex()}.log"
        self.idx_path = store / f"{device_id.hex()}.idx"
        self.fsync = fsync
        self.lock = threading.Lock()
        self.index: dict[tuple[bytes, int], int] = {}
        self._recover()
        self._log = os.open(self.log_path, os.O_WRONLY | os.O_APPEND)
        self._idx = os.open(self.idx_path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)

    def _recover(self) -> None:
        self.log_path.touch(exist_ok=True)
        size = self.log_path.stat().st_size
        indexed_end = 0
        raw = self.idx_path.read_bytes() if self.idx_path.exists() else b""
        good = len(raw) - len(raw) % _IDX.size
        entries = []
        for i in range(0, good, _IDX.size):
            agent, mid, off = _IDX.unpack_from(raw, i)
            if off >= size:
                break
            entries.append((agent, mid, off))
        with open(self.log_path, "rb") as fh:
            for agent, mid, off in entries:
                fh.seek(off)
                head = fh.read(4)
                if len(head) < 4:
                    break
                (n,) = _U32.unpack(head)
                if off + 4 + n + DIGEST > size:
                    break
                self.index[(agent, mid)] = off
                indexed_end = max(indexed_end, off + 4 + n + DIGEST)
            # re-index anything appended after the last indexed record
            off = indexed_end
            while off < size:
                fh.seek(off)
                head = fh.read(4)
                if len(head) < 4:
                    break
                (n,) = _U32.unpack(head)
                body = fh.read(n)
                digest = fh.read(DIGEST)
                if len(body) < n or len(digest) < DIGEST:
                    break
                if hashlib.sha256(body).digest() != digest:
                    raise StoreCorruptionError(self.log_path, off, "digest mismatch during recovery")
                _, agent, mid, _ = _BODY_HEAD.unpack_from(body, 0)
                self.index[(agent, mid)] = off
                off += 4 + n + DIGEST
        if off < size:
            log.warning("truncating torn tail of %s at offset %d", self.log_path, off)
            with open(self.log_path, "r+b") as fh:
                fh.truncate(off)
        rebuilt = b"".join(_IDX.pack(a, m, o) for (a, m), o in sorted(self.index.items(), key=lambda kv: kv[1]))
        if rebuilt != raw:
            tmp = self.idx_path.with_suffix(".idx.tmp")
            tmp.write_bytes(rebuilt)
            os.replace(tmp, self.idx_path)

    def append(self, record: WarehouseRecord) -> bool:
        key = (record.agent_id, record.message_id)
        with self.lock:
            if key in self.index:
                return False
            body = record.encode_body()
            offset = _append_all(self._log, _U32.pack(len(body)) + body + hashlib.sha256(body).digest())
            if self.fsync:
                try:
                    os.fsync(self._log)
                except OSError:
                    # not durable, so not stored: the sender retries into a clean tail
                    os.ftruncate(self._log, offset)
                    raise
            # the log is authoritative: once the record is durable it counts as
            # stored even if the index write below fails (recovery re-indexes)
            self.index[key] = offset
            _append_all(self._idx, _IDX.pack(record.agent_id, record.message_id, offset))
            return True

    def close(self) -> None:
        with self.lock:
            os.close(self._log)
            os.close(self._idx)


def _append_all(fd: int, data: bytes) -> int:
    """Append ``data`` in full or not at all; returns the offset it starts at."""
    start = os.fstat(fd).st_size
    try:
        view = memoryview(data)
        while view:
            view = view[os.write(fd, view):]
    except OSError:
        # drop a partial write so the next record starts on a boundary
        try:
            os.ftruncate(fd, start)
        except OSError:
            pass
        raise
    return start


class WarehouseStore:
    def __init__(self, path: os.PathLike | str, fsync: bool = True):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._logs: dict[bytes, _DeviceLog] = {}
        self._lock = threading.Lock()

    def _device(self, device_id: bytes) -> _DeviceLog:
        with self._lock:
            dl = self._logs.get(device_id)
            if dl is None:
                dl = self._logs[device_id] = _DeviceLog(self.path, device_id, self.fsync)
            return dl

    def append(self, record: WarehouseRecord) -> bool:
        """Persist ``record``; False when its (agent, message id) is already stored."""
        return self._device(record.device_id).append(record)

    def count(self, device_id: bytes) -> int:
        return sum(1 for _ in iter_records(self.path, device_id))

    def devices(self) -> list[bytes]:
        return list_devices(self.path)

    def close(self) -> None:
        with self._lock:
            for dl in self._logs.values():
                dl.close()
            self._logs.clear()


def list_devices(store: os.PathLike | str) -> list[bytes]:
    out = []
    for p in sorted(Path(store).glob("*.log")):
        try:
            out.append(bytes.fromhex(p.stem))
        except ValueError:
            continue
    return out


def iter_records(store: os.PathLike | str, device_id: bytes):
    """Yield ``(offset, WarehouseRecord)`` in append order, checking every digest."""
    path = Path(store) / f"{device_id.hex()}.log"
    if not path.exists():
        return
    data = path.read_bytes()
    off = 0
    while off < len(data):
        if off + 4 > len(data):
            raise StoreCorruptionError(path, off, "truncated length prefix")
        (n,) = _U32.unpack_from(data, off)
        end = off + 4 + n + DIGEST
        if end > len(data):
            raise StoreCorruptionError(path, off, "truncated record")
        body = data[off + 4:off + 4 + n]
        if hashlib.sha256(body).digest() != data[off + 4 + n:end]:
            raise StoreCorruptionError(path, off, "digest mismatch")
        try:
            rec = WarehouseRecord.decode_body(body)
        except (ValueError, struct.error) as exc:
            raise StoreCorruptionError(path, off, str(exc)) from exc
        yield off, rec
        off = end


def read_device_log(
    store: os.PathLike | str,
    device_id: bytes,
    start: int | None = None,
    stop: int | None = None,
) -> list[str]:
    """Reconstruct the device's original lines; ``start:stop`` slices the result.

    Records are replayed in origin message-id order rather than append order:
    a partially refused group is resent item by item and may land late.
    """
    lines: list[str] = []
    records = sorted(iter_records(store, device_id), key=lambda r: r[1].message_id)
    for off, rec in records:
        try:
            lines.extend(decompress(deserialize_batch(rec.batch)))
        except CorruptBatchError as exc:
            raise StoreCorruptionError(Path(store) / f"{device_id.hex()}.log", off, str(exc)) from exc
    return lines[start:stop]


class Warehouse:
    """Accepts agent sessions and persists every verified batch exactly once."""

    def __init__(self, config: WarehouseConfig, identity=None, ca_cert=None):
        self.config = config
        self.identity = identity or load_identity(config.identity_path)
        if ca_cert is None:
            ca_cert = load_certificate(Path(config.ca_cert).read_bytes())
        self.ca_cert = ca_cert
        self.keyring = Keyring(config.keyring_path)
        self.store = WarehouseStore(config.store_path, fsync=config.fsync)
        self._stop = threading.Event()
        self._sock: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._conns: set[SecureConnection] = set()
        self._lock = threading.Lock()
        self.counters = {"sessions": 0, "rejected_sessions": 0, "records": 0, "duplicates": 0, "naks": 0}

    @property
    def endpoint(self) -> str:
        assert self._sock is not None
        return bound_endpoint(self._sock)

    def start(self) -> "Warehouse":
        self._sock = listen(self.config.listen)
        t = threading.Thread(target=self._accept_loop, name="warehouse-accept", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._sock.accept()
            except OSError:
                return
            t = threading.Thread(target=self._session, args=(sock,), name="warehouse-session", daemon=True)
            t.start()
            self._threads.append(t)

    def _bump(self, key: str, n: int = 1) -> None:
        with self._lock:
            self.counters[key] += n

    def _session(self, sock: socket.socket) -> None:
        conn = SecureConnection(sock, self.identity, self.ca_cert, self.config.crypto, timeout=None)
        with self._lock:
            self._conns.add(conn)
        try:
            try:
                conn.server_handshake(
                    accept_peer=lambda pid: certificate_role(conn.peer_cert) == Role.AGENT.value
                )
            except (ch.ChannelError, IdentityError, OSError, EOFError, ValueError) as exc:
                log.info("warehouse: rejected session: %s", exc)
                self._bump("rejected_sessions")
                return
            self._bump("sessions")
            self.keyring.add(conn.peer_cert)
            conn.serve(lambda pt, msg: self._handle(conn, pt, msg), self._stop)
        finally:
            with self._lock:
                self._conns.discard(conn)
            conn.close()

    def _handle(self, conn: SecureConnection, plaintext: bytes, msg: WireMessage) -> int:
        origin = msg.ext(Ext.ORIGIN)
        try:
            batch, cbe = unpack_forward_payload(plaintext)
            device_id, origin_id = unpack_origin(origin) if origin else (conn.peer_id, msg.message_id)
            deserialize_batch(batch)
        except (ValueError, struct.error):
            self._bump("naks")
            return ACK_RETRANSMIT
        record = WarehouseRecord(device_id, conn.peer_id, origin_id, time.time(), batch, cbe)
        try:
            stored = self.store.append(record)
        except OSError as exc:
            if exc.errno in (errno.ENOSPC, errno.EDQUOT):
                self._bump("naks")
                return ACK_RETRY_LATER
            raise
        self._bump("records" if stored else "duplicates")
        return ACK_OK

    def stop(self) -> None:
        if self._stop.is_set():
            return
        self._stop.set()
        if self._sock is not None:
            close_listener(self._sock)
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            c.close()
        for t in self._threads:
            t.join(timeout=5)
        self.store.close()


def run_warehouse(config: WarehouseConfig, stop: threading.Event | None = None) -> Warehouse:
    """Start the server; block until ``stop`` is set when one is given."""
    wh = Warehouse(config).start()
    log.info("warehouse listening on %s", wh.endpoint)
    if stop is not None:
        stop.wait()
        wh.stop()
    return wh
