import errno
import hashlib
import os
import struct
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loghive.config import WarehouseConfig
from loghive.identity import Role
from loghive.pipeline import compress, learn_templates, serialize_batch
from loghive.transport import ACK_OK, ACK_RETRANSMIT, ACK_RETRY_LATER, CryptoParams, HandshakeRejected, connect
from loghive.warehouse import (
    StoreCorruptionError,
    Warehouse,
    WarehouseRecord,
    WarehouseStore,
    iter_records,
    pack_forward_payload,
    pack_origin,
    read_device_log,
    unpack_forward_payload,
    unpack_origin,
)
from loghive.wire import Ext

DEV = bytes([1]) * 20
AGENT = bytes([2]) * 20


def batch_of(lines, first=1):
    return serialize_batch(compress(lines, learn_templates(lines), first))


def rec(mid, lines=("hello world",), dev=DEV, agent=AGENT):
    return WarehouseRecord(dev, agent, mid, 1000.5, batch_of(list(lines)), b"<CommonBaseEvents/>")


def test_record_body_layout():
    r = rec(7)
    body = r.encode_body()
    assert body[:20] == DEV and body[20:40] == AGENT
    assert struct.unpack_from("!QQ", body, 40) == (7, 1000500)
    (n,) = struct.unpack_from("!I", body, 56)
    assert body[60:60 + n] == r.batch
    assert WarehouseRecord.decode_body(body) == r


def test_log_file_layout(tmp_path):
    store = WarehouseStore(tmp_path, fsync=False)
    store.append(rec(1))
    store.close()
    data = (tmp_path / f"{DEV.hex()}.log").read_bytes()
    (n,) = struct.unpack_from("!I", data, 0)
    assert len(data) == 4 + n + 32
    assert data[4 + n:] == hashlib.sha256(data[4:4 + n]).digest()
    assert (tmp_path / f"{DEV.hex()}.idx").read_bytes() == AGENT + struct.pack("!QQ", 1, 0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([AGENT, bytes(20)]), st.integers(0, 20)), max_size=30))
def test_exactly_once_per_agent_and_message(tmp_path_factory, keys):
    path = tmp_path_factory.mktemp("s")
    store = WarehouseStore(path, fsync=False)
    stored = [store.append(rec(mid, agent=agent)) for agent, mid in keys]
    assert sum(stored) == len(set(keys))
    store.close()
    reopened = WarehouseStore(path, fsync=False)
    assert [reopened.append(rec(mid, agent=agent)) for agent, mid in set(keys)] == [False] * len(set(keys))
    assert reopened.count(DEV) == len(set(keys))
    reopened.close()


def test_torn_tail_truncated_on_open(tmp_path):
    store = WarehouseStore(tmp_path, fsync=False)
    store.append(rec(1))
    store.append(rec(2))
    store.close()
    log = tmp_path / f"{DEV.hex()}.log"
    whole = log.stat().st_size
    with open(log, "ab") as fh:
        fh.write(b"\x00\x00\x01\x00partial")
    store = WarehouseStore(tmp_path, fsync=False)
    assert store.append(rec(3))
    assert not store.append(rec(2))
    store.close()
    assert [r.message_id for _, r in iter_records(tmp_path, DEV)] == [1, 2, 3]
    assert log.stat().st_size > whole


def test_lost_index_is_rebuilt(tmp_path):
    store = WarehouseStore(tmp_path, fsync=False)
    for i in range(3):
        store.append(rec(i))
    store.close()
    idx = tmp_path / f"{DEV.hex()}.idx"
    want = idx.read_bytes()
    idx.unlink()
    store = WarehouseStore(tmp_path, fsync=False)
    assert not store.append(rec(1))
    store.close()
    assert idx.read_bytes() == want


def test_bit_flip_detected(tmp_path):
    store = WarehouseStore(tmp_path, fsync=False)
    store.append(rec(1))
    store.close()
    log = tmp_path / f"{DEV.hex()}.log"
    data = bytearray(log.read_bytes())
    data[30] ^= 0x01
    log.write_bytes(bytes(data))
    with pytest.raises(StoreCorruptionError) as info:
        list(iter_records(tmp_path, DEV))
    assert info.value.offset == 0
    (tmp_path / f"{DEV.hex()}.idx").unlink()
    with pytest.raises(StoreCorruptionError):
        WarehouseStore(tmp_path, fsync=False).append(rec(2))


def test_failed_write_leaves_clean_tail(tmp_path, monkeypatch):
    store = WarehouseStore(tmp_path, fsync=False)
    store.append(rec(1))
    real_write = os.write

    def short_then_full(fd, data):
        monkeypatch.setattr(os, "write", real_write)
        real_write(fd, bytes(data[:10]))
        raise OSError(errno.ENOSPC, "No space left on device")

    monkeypatch.setattr(os, "write", short_then_full)
    with pytest.raises(OSError):
        store.append(rec(2))
    assert store.append(rec(2))
    store.close()
    assert [r.message_id for _, r in iter_records(tmp_path, DEV)] == [1, 2]


def test_read_device_log_slices(tmp_path):
    store = WarehouseStore(tmp_path, fsync=False)
    store.append(rec(1, ["a 1", "a 2"]))
    store.append(rec(2, ["b 3"]))
    store.close()
    assert read_device_log(tmp_path, DEV) == ["a 1", "a 2", "b 3"]
    assert read_device_log(tmp_path, DEV, 1, 2) == ["a 2"]
    assert read_device_log(tmp_path, bytes(20)) == []
    assert WarehouseStore(tmp_path).devices() == [DEV]


def test_read_back_follows_origin_order_not_append_order(tmp_path):
    # a resent item of a partially refused group lands after its successor
    store = WarehouseStore(tmp_path, fsync=False)
    store.append(rec(10, ["first"]))
    store.append(rec(12, ["third"]))
    store.append(rec(11, ["second"]))
    store.close()
    assert read_device_log(tmp_path, DEV) == ["first", "second", "third"]


def test_forward_payload_and_origin():
    assert unpack_forward_payload(pack_forward_payload(b"batch", b"<x/>")) == (b"batch", b"<x/>")
    with pytest.raises(ValueError):
        unpack_forward_payload(b"\x00\x00\x00\x09abc")
    assert unpack_origin(pack_origin(DEV, 99)) == (DEV, 99)


# -- server --------------------------------------------------------------------

@pytest.fixture
def server(pki, tmp_path):
    cfg = WarehouseConfig(listen="127.0.0.1:0", store_path=str(tmp_path / "store"),
                          keyring_path=str(tmp_path / "kr"), fsync=False, crypto=CryptoParams(batch_size=2))
    w = Warehouse(cfg, identity=pki.identity("wh-srv", Role.SERVER), ca_cert=pki.ca_cert).start()
    yield w
    w.stop()


def forward(conn, items):
    return conn.send_group([
        (pack_forward_payload(batch_of(lines, first), b""), ((Ext.ORIGIN, pack_origin(DEV, mid)),))
        for mid, first, lines in items
    ])


def test_server_persists_and_deduplicates(server, pki):
    conn = connect(server.endpoint, pki.identity("wh-agent", Role.AGENT), pki.ca_cert, CryptoParams(batch_size=2))
    try:
        forward(conn, [(1, 1, ["x 1"]), (2, 2, ["x 2"]), (1, 1, ["x 1"])])
    finally:
        conn.close()
    deadline = time.time() + 5
    while server.counters["duplicates"] < 1 and time.time() < deadline:
        time.sleep(0.02)
    assert server.counters["records"] == 2 and server.counters["duplicates"] == 1
    assert read_device_log(server.config.store_path, DEV) == ["x 1", "x 2"]


def test_server_refuses_device_role(server, pki):
    with pytest.raises(HandshakeRejected):
        connect(server.endpoint, pki.identity("wh-device"), pki.ca_cert)
    time.sleep(0.1)
    assert server.counters["rejected_sessions"] == 1


def test_server_refuses_impostor(server, pki):
    with pytest.raises(HandshakeRejected):
        connect(server.endpoint, pki.identity("wh-imp", Role.AGENT, signed=False), pki.ca_cert)
    assert server.store.devices() == []


def test_handle_status_codes(server, pki, monkeypatch):
    class Conn:
        peer_id = AGENT

    class Msg:
        message_id = 5

        @staticmethod
        def ext(t):
            return pack_origin(DEV, 5)

    assert server._handle(Conn, b"junk", Msg) == ACK_RETRANSMIT
    good = pack_forward_payload(batch_of(["a"]), b"")
    assert server._handle(Conn, good, Msg) == ACK_OK

    def full(record):
        raise OSError(errno.ENOSPC, "full")

    monkeypatch.setattr(server.store, "append", full)
    assert server._handle(Conn, good, Msg) == ACK_RETRY_LATER
