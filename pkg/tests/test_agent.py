import socket
import time
import xml.etree.ElementTree as ET

import pytest

from loghive.agent import (
    CONTROL_ERROR,
    CONTROL_OK,
    decode_lines,
    encode_command,
    encode_lines,
    parse_command,
    send_control,
)
from loghive.config import WarehouseConfig
from loghive.device import DeviceProfile, generate_corpus, run_device
from loghive.identity import Role
from loghive.transport import CryptoParams, HandshakeRejected, connect
from loghive.warehouse import Warehouse, iter_records, read_device_log
from loghive.wire import Ext


def wait_for(pred, timeout=10.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        if pred():
            return True
        time.sleep(0.02)
    return pred()


def corpus(tmp_path, name="c.log", lines=300, seed=1):
    path = tmp_path / name
    return str(path), generate_corpus(["Server ::: is down", "Link ::: changed to :::"], lines, seed, path)


def device(pki, path, agent_ep, name="ag-dev", **kw):
    kw.setdefault("chunk_bytes", 2048)
    return run_device(DeviceProfile(pki.identity(name), path, pki.ca_cert, agent=agent_ep, **kw))


def test_command_codec():
    assert parse_command(encode_command("set_warehouse", {"endpoint": "h:1"})) == ("SET_WAREHOUSE", {"endpoint": "h:1"})
    with pytest.raises(ValueError):
        parse_command(b"GET_STATUS\nnoequals")


def test_line_codec():
    assert decode_lines(encode_lines(["a", "", "b c"])) == ["a", "", "b c"]
    assert decode_lines(b"") == []
    with pytest.raises(ValueError):
        decode_lines(b"no newline")


def test_honest_device_round_trip(stack, pki, tmp_path):
    s = stack()
    path, lines = corpus(tmp_path)
    rep = device(pki, path, s.capture)
    assert rep.error == "" and rep.acks == rep.batches > 1
    dev = pki.identity("ag-dev").id
    assert wait_for(lambda: s.agent.status()["forwarded"] == rep.batches)
    assert read_device_log(s.store, dev) == lines
    st = s.agent.status()
    assert st["lines"] == len(lines) and st["sessions"] == 1 and st["queued"] == 0


def test_cbe_metadata_tracks_gaps(stack, pki, tmp_path):
    s = stack(crypto=CryptoParams(batch_size=1))
    dev = pki.identity("ag-gap")
    conn = connect(s.capture, dev, pki.ca_cert, CryptoParams(batch_size=1))
    try:
        seq = lambda n: ((Ext.SEQUENCE, n.to_bytes(8, "big")),)
        conn.send_group([(b"a 1\na 2\n", seq(1)), (b"a 3\n", seq(3)), (b"a 9\n", seq(9)), (b"a 10\n", ())])
    finally:
        conn.close()
    assert wait_for(lambda: s.agent.status()["forwarded"] == 4)
    docs = [ET.fromstring(r.cbe_document) for _, r in iter_records(s.store, dev.id)]
    quality = [d.find(".//extendedDataElement[@name='dataQuality']").get("value") for d in docs]
    assert quality == ["unknown", "unknown", "unknown", "unknown"]  # device not configured
    s2 = stack(crypto=CryptoParams(batch_size=1), devices={dev.hex_id: {"type": "sensor", "geo": "bay"}})
    conn = connect(s2.capture, dev, pki.ca_cert, CryptoParams(batch_size=1))
    try:
        conn.send_group([(b"a 1\na 2\n", seq(1)), (b"a 3\n", seq(3)), (b"a 9\n", seq(9)), (b"a 10\n", ())])
    finally:
        conn.close()
    assert wait_for(lambda: s2.agent.status()["forwarded"] == 4)
    docs = [ET.fromstring(r.cbe_document) for _, r in iter_records(s2.store, dev.id)]
    quality = [d.find(".//extendedDataElement[@name='dataQuality']").get("value") for d in docs]
    assert quality == ["complete", "complete", "gapped", "unknown"]
    assert read_device_log(s2.store, dev.id) == ["a 1", "a 2", "a 3", "a 9", "a 10"]


def test_impostor_refused(stack, pki, tmp_path):
    s = stack()
    path, _ = corpus(tmp_path)
    rep = run_device(DeviceProfile(pki.identity("ag-imp", signed=False), path, pki.ca_cert, agent=s.capture,
                                   mode="impostor"))
    assert rep.handshake_rejected and rep.acks == 0
    assert wait_for(lambda: s.agent.status()["refused_sessions"] == 1)
    assert s.warehouse.store.devices() == []


def test_agent_role_cannot_pose_as_device(stack, pki):
    s = stack()
    with pytest.raises(HandshakeRejected):
        connect(s.capture, pki.identity("ag-other-agent", Role.AGENT), pki.ca_cert)


def test_control_requires_controller_role(stack, pki):
    s = stack()
    ctl = pki.identity("ag-ctl", Role.CONTROLLER)
    status, text = send_control(s.agent.control_endpoint, ctl, pki.ca_cert, "GET_STATUS")
    assert status == CONTROL_OK and "sessions=0" in text.split("\n")
    with pytest.raises(HandshakeRejected):
        send_control(s.agent.control_endpoint, pki.identity("ag-dev"), pki.ca_cert, "GET_STATUS")


def test_controllers_allow_list(stack, pki):
    ctl = pki.identity("ag-ctl", Role.CONTROLLER)
    other = pki.identity("ag-ctl2", Role.CONTROLLER)
    s = stack(controllers=frozenset({other.hex_id}))
    with pytest.raises(HandshakeRejected):
        send_control(s.agent.control_endpoint, ctl, pki.ca_cert, "GET_STATUS")
    assert send_control(s.agent.control_endpoint, other, pki.ca_cert, "GET_STATUS")[0] == CONTROL_OK


def test_set_log_filter_refuses_device(stack, pki, tmp_path):
    s = stack()
    ctl = pki.identity("ag-ctl", Role.CONTROLLER)
    path, _ = corpus(tmp_path)
    allowed = pki.identity("ag-dev")
    assert send_control(s.agent.control_endpoint, ctl, pki.ca_cert, "SET_LOG_FILTER",
                        {"devices": allowed.hex_id}) == (CONTROL_OK, "ok")
    assert device(pki, path, s.capture, "ag-dev-blocked").handshake_rejected
    assert not device(pki, path, s.capture).handshake_rejected


def test_set_crypto_validated_atomically(stack, pki):
    s = stack()
    ctl = pki.identity("ag-ctl", Role.CONTROLLER)
    before = s.agent.config
    status, text = send_control(s.agent.control_endpoint, ctl, pki.ca_cert, "SET_CRYPTO", {"ttl_kilobits": "0"})
    assert status == CONTROL_ERROR and text.startswith("error:")
    assert s.agent.config is before
    status, _ = send_control(s.agent.control_endpoint, ctl, pki.ca_cert, "SET_CRYPTO", {"ttl_kilobits": "16"})
    assert status == CONTROL_OK and s.agent.config.crypto.ttl_kilobits == 16
    assert send_control(s.agent.control_endpoint, ctl, pki.ca_cert, "REBOOT")[0] == CONTROL_ERROR


def test_set_warehouse_redirects_and_retries(stack, pki, tmp_path):
    s = stack()
    ctl = pki.identity("ag-ctl", Role.CONTROLLER)
    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        dead = f"127.0.0.1:{probe.getsockname()[1]}"
    send_control(s.agent.control_endpoint, ctl, pki.ca_cert, "SET_WAREHOUSE", {"endpoint": dead})
    path, lines = corpus(tmp_path)
    rep = device(pki, path, s.capture)
    assert rep.error == ""
    assert wait_for(lambda: s.agent.status()["forward_errors"] >= 1)
    second = Warehouse(
        WarehouseConfig(listen="127.0.0.1:0", store_path=str(tmp_path / "wh2"), keyring_path=str(tmp_path / "k2"),
                        fsync=False, crypto=CryptoParams(batch_size=4)),
        identity=pki.identity("warehouse", Role.SERVER), ca_cert=pki.ca_cert,
    ).start()
    try:
        send_control(s.agent.control_endpoint, ctl, pki.ca_cert, "SET_WAREHOUSE", {"endpoint": second.endpoint})
        assert wait_for(lambda: s.agent.status()["forwarded"] == rep.batches)
        assert read_device_log(tmp_path / "wh2", pki.identity("ag-dev").id) == lines
    finally:
        second.stop()


def test_stop_drains_queue_and_is_idempotent(stack, pki, tmp_path):
    s = stack()
    path, lines = corpus(tmp_path, lines=2000)
    rep = device(pki, path, s.capture)
    s.agent.stop(drain=True)
    s.agent.stop(drain=True)
    assert s.agent.status()["forwarded"] == rep.batches
    assert read_device_log(s.store, pki.identity("ag-dev").id) == lines
