"""Replay and impostor attacks against a live agent and warehouse on loopback.

Builds a throwaway CA and identities in a temp dir, then:
  1. an honest device streams a corpus,
  2. a replayer re-injects captured frames (including across rekeys),
  3. a self-signed impostor tries to connect,
and prints what the agent and warehouse made of it.

    python3 demos/attacks.py [replays]
"""

import sys
import tempfile
import time
from pathlib import Path

from loghive.agent import Agent
from loghive.config import AgentConfig, WarehouseConfig
from loghive.device import DEFAULT_TEMPLATES, DeviceProfile, generate_corpus, run_device
from loghive.identity import CertificateAuthority, Keyring, Role, load_or_create_identity
from loghive.transport import CryptoParams
from loghive.warehouse import Warehouse, read_device_log

replays = int(sys.argv[1]) if len(sys.argv) > 1 else 200
root = Path(tempfile.mkdtemp(prefix="loghive-attacks-"))
ca = CertificateAuthority.create()


def ident(name, mac_byte, role, signer=ca):
    return load_or_create_identity(root / name, f"02:00:00:00:01:{mac_byte:02x}", "127.0.0.1", role, signer)


server, agent_id = ident("server", 1, Role.SERVER), ident("agent", 2, Role.AGENT)
honest, replayer = ident("honest", 3, Role.DEVICE), ident("replayer", 4, Role.DEVICE)
impostor = ident("impostor", 5, Role.DEVICE, signer=None)

Keyring(root / "wkr").add(agent_id.certificate)
ring = Keyring(root / "akr")
for d in (honest, replayer):
    ring.add(d.certificate)

crypto = CryptoParams(batch_size=4, ttl_kilobits=64)
wh = Warehouse(WarehouseConfig(listen="127.0.0.1:0", store_path=str(root / "store"), keyring_path=str(root / "wkr"),
                               crypto=crypto), identity=server, ca_cert=ca.certificate).start()
agent = Agent(AgentConfig(capture_listen="127.0.0.1:0", control_listen="127.0.0.1:0", warehouse_endpoint=wh.endpoint,
                          keyring_path=str(root / "akr"), discovery=None, crypto=crypto),
              identity=agent_id, ca_cert=ca.certificate).start()

corpus = root / "corpus.log"
lines = generate_corpus(DEFAULT_TEMPLATES, 3000, 1, corpus)


def device(who, **kw):
    return run_device(DeviceProfile(who, str(corpus), ca.certificate, agent=agent.capture_endpoint,
                                    crypto=crypto, chunk_bytes=4096, **kw))


r = device(honest)
print(f"honest:   batches={r.batches} acks={r.acks} rekeys={r.rekeys}")
r = device(replayer, mode="replayer", replays=replays, seed=5)
print(f"replayer: batches={r.batches} acks={r.acks} injected={r.injected} rejected={r.rejects} rekeys={r.rekeys}")
r = device(impostor, mode="impostor")
print(f"impostor: handshake_rejected={bool(r.handshake_rejected)} ({r.error})")

time.sleep(0.5)
agent.stop(drain=True)
wh.stop()
st = agent.status()
print(f"\nagent:     sessions={st['sessions']} refused={st['refused_sessions']} replays_dropped={st['replays']}")
print(f"warehouse: records={wh.counters['records']} duplicates={wh.counters['duplicates']}")
for who in (honest, replayer):
    same = read_device_log(root / "store", who.id) == lines
    print(f"readback {who.hex_id[:12]}: {'identical' if same else 'DIFFERS'}")
print(f"\nfiles left in {root}")
