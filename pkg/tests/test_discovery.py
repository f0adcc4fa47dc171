import ipaddress
import random
import socket
import time
from dataclasses import replace

import pytest

from loghive import wire
from loghive.channel import verify_signature
from loghive.discovery import (
    AgentOffer,
    DiscoveryResponder,
    NeedsManualConfiguration,
    SelectionMemory,
    answer_adm,
    build_adm,
    collect_offers,
    discover_agent,
    select_agent,
    verify_adm,
    verify_aom,
)
from loghive.identity import Keyring, Role
from loghive.wire import Ext, MsgType

LOCAL = [ipaddress.ip_network("10.0.0.0/24"), ipaddress.ip_network("fe80::/10")]
A = bytes([0xA]) * 20
B = bytes([0xB]) * 20
C = bytes([0xC]) * 20


def offer(agent_id, source):
    return AgentOffer(agent_id, source, f"{source}:7781" if ":" not in source else f"[{source}]:7781", b"s", 0.0)


@pytest.fixture
def ring(tmp_path, pki):
    r = Keyring(tmp_path / "ring")
    r.add(pki.identity("disc-dev").certificate)
    return r


def free_udp_port():
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# -- ADM / AOM -----------------------------------------------------------------

def test_adm_payload_is_device_id_and_signed(pki):
    dev = pki.identity("disc-dev")
    adm = build_adm(dev)
    assert adm.msg_type == MsgType.ADM and adm.payload == dev.id and len(adm.payload) == 20
    assert verify_signature(dev.public_key, wire.signed_bytes(adm), adm.signature)


def test_valid_adm_gets_aom(pki, ring):
    dev = pki.identity("disc-dev")
    agent = pki.identity("disc-agent", Role.AGENT)
    aom = answer_adm(agent, build_adm(dev), ring, "10.0.0.5:7781")
    assert aom.msg_type == MsgType.AOM and aom.payload == agent.id and aom.receiver_id == dev.id
    assert aom.ext(Ext.ENDPOINT) == b"10.0.0.5:7781"
    got = verify_aom(wire.decode_message(wire.encode_message(aom)), pki.ca_cert, dev.id, "10.0.0.5")
    assert got.agent_id == agent.id and got.endpoint == "10.0.0.5:7781"


def test_tampered_adm_is_ignored(pki, ring):
    adm = build_adm(pki.identity("disc-dev"))
    tampered = replace(adm, validity=adm.validity + 1)
    assert verify_adm(tampered, ring) is None
    assert answer_adm(pki.identity("disc-agent", Role.AGENT), tampered, ring, "10.0.0.5:1") is None


def test_unknown_device_gets_no_aom(pki, ring):
    stranger = pki.identity("disc-stranger")
    assert answer_adm(pki.identity("disc-agent", Role.AGENT), build_adm(stranger), ring, "10.0.0.5:1") is None


def test_aom_from_impostor_agent_rejected(pki, ring):
    dev = pki.identity("disc-dev")
    imp = pki.identity("disc-imp", Role.AGENT, signed=False)
    aom = answer_adm(imp, build_adm(dev), ring, "10.0.0.6:7781")
    assert verify_aom(aom, pki.ca_cert, dev.id, "10.0.0.6") is None


def test_aom_for_someone_else_rejected(pki, ring):
    dev = pki.identity("disc-dev")
    aom = answer_adm(pki.identity("disc-agent", Role.AGENT), build_adm(dev), ring, "10.0.0.5:7781")
    assert verify_aom(aom, pki.ca_cert, bytes(20), "10.0.0.5") is None
    assert verify_aom(replace(aom, signature=bytes(len(aom.signature))), pki.ca_cert, dev.id, "10.0.0.5") is None


# -- selection -----------------------------------------------------------------

def test_memory_wins():
    mem = SelectionMemory()
    mem.remember(A)
    assert select_agent([offer(B, "10.0.0.2"), offer(A, "192.0.2.9")], mem, LOCAL, random.Random(0)).agent_id == A


def test_single_local_beats_remote():
    got = select_agent([offer(A, "10.0.0.1"), offer(B, "198.51.100.1")], SelectionMemory(), LOCAL, random.Random(0))
    assert got.agent_id == A


def test_stale_memory_falls_through_to_locality():
    mem = SelectionMemory()
    mem.remember(C)
    got = select_agent([offer(A, "10.0.0.1"), offer(B, "198.51.100.1")], mem, LOCAL, random.Random(0))
    assert got.agent_id == A and mem.last_agent_id == A


@pytest.mark.parametrize("offers", [[], [offer(B, "198.51.100.1")]])
def test_no_local_offer_needs_manual_configuration(offers):
    with pytest.raises(NeedsManualConfiguration):
        select_agent(offers, SelectionMemory(), LOCAL, random.Random(0))


def test_random_tie_break_over_seeded_trials():
    offers = [offer(A, "10.0.0.1"), offer(B, "fe80::2"), offer(C, "203.0.113.4")]
    seen = [select_agent(offers, SelectionMemory(), LOCAL, random.Random(seed)).agent_id for seed in range(200)]
    assert set(seen) == {A, B}
    assert seen.count(A) >= 1 and seen.count(B) >= 1


def test_selection_is_deterministic_for_a_seed():
    offers = [offer(A, "10.0.0.1"), offer(B, "10.0.0.2")]
    runs = [select_agent(list(o), SelectionMemory(), LOCAL, random.Random(5)).agent_id
            for o in (offers, offers[::-1])]
    assert runs[0] == runs[1]


def test_memory_persists(tmp_path):
    p = tmp_path / "last-agent"
    select_agent([offer(A, "10.0.0.1")], SelectionMemory(p), LOCAL, random.Random(0))
    assert SelectionMemory(p).last_agent_id == A
    p.write_text("garbage")
    assert SelectionMemory(p).last_agent_id is None


# -- multicast on loopback -------------------------------------------------------

def test_two_agents_answer_on_loopback(pki, ring, tmp_path):
    port = free_udp_port()
    group = "239.77.76.80"
    agents = [pki.identity(f"disc-agent{i}", Role.AGENT) for i in range(2)]
    responders = []
    try:
        for i, a in enumerate(agents):
            responders.append(DiscoveryResponder(a, ring, f"127.0.0.1:{9000 + i}", group, port,
                                                 interface="127.0.0.1").start())
        dev = pki.identity("disc-dev")
        offers = collect_offers(dev, pki.ca_cert, group, port, window=0.5, attempts=2, interface="127.0.0.1")
        assert {o.agent_id for o in offers} == {a.id for a in agents}
        mem = SelectionMemory(tmp_path / "m")
        ep = discover_agent(dev, pki.ca_cert, mem, group, port, random.Random(1), 0.5, 2, "127.0.0.1")
        assert ep in {"127.0.0.1:9000", "127.0.0.1:9001"}
        assert mem.last_agent_id in {a.id for a in agents}
        stranger = pki.identity("disc-stranger")
        t0 = time.monotonic()
        assert collect_offers(stranger, pki.ca_cert, group, port, window=0.3, attempts=1, interface="127.0.0.1") == []
        assert time.monotonic() - t0 < 2
        assert sum(r.ignored for r in responders) >= 2
    finally:
        for r in responders:
            r.stop()
