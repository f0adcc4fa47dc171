from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from loghive.agent import Agent
from loghive.config import AgentConfig, WarehouseConfig
from loghive.identity import CertificateAuthority, Role, load_or_create_identity
from loghive.transport import CryptoParams, format_endpoint
from loghive.warehouse import Warehouse


@dataclass
class Pki:
    root: Path
    ca: CertificateAuthority
    _cache: dict = field(default_factory=dict)

    def identity(self, name: str, role: Role = Role.DEVICE, ip: str = "127.0.0.1", signed: bool = True):
        key = (name, role, ip, signed)
        if key not in self._cache:
            n = len(self._cache)
            mac = f"02:00:00:01:{n >> 8:02x}:{n & 0xFF:02x}"
            ca = self.ca if signed else None
            self._cache[key] = load_or_create_identity(self.root / f"{name}-{n}", mac, ip, role, ca)
        return self._cache[key]

    @property
    def ca_cert(self):
        return self.ca.certificate


@pytest.fixture(scope="session")
def pki(tmp_path_factory) -> Pki:
    root = tmp_path_factory.mktemp("pki")
    return Pki(root, CertificateAuthority.create())


@pytest.fixture(scope="session")
def other_ca() -> CertificateAuthority:
    return CertificateAuthority.create(name="untrusted CA")


@dataclass
class Stack:
    agent: Agent
    warehouse: Warehouse
    store: Path

    @property
    def capture(self) -> str:
        return self.agent.capture_endpoint


@pytest.fixture
def stack(pki, tmp_path):
    """Factory for an in-process warehouse + agent pair on loopback."""
    with contextlib.ExitStack() as stack_:
        def make(
            crypto: CryptoParams | None = None,
            host: str = "127.0.0.1",
            wh_crypto: CryptoParams | None = None,
            **agent_kw,
        ) -> Stack:
            crypto = crypto or CryptoParams(batch_size=4)
            run = tmp_path / f"stack{len(stack_._exit_callbacks)}"
            wh = Warehouse(
                WarehouseConfig(listen=format_endpoint(host, 0), store_path=str(run / "store"),
                                keyring_path=str(run / "wkr"), fsync=False, crypto=wh_crypto or crypto),
                identity=pki.identity("warehouse", Role.SERVER), ca_cert=pki.ca_cert,
            ).start()
            stack_.callback(wh.stop)
            cfg = dict(
                capture_listen=format_endpoint(host, 0), control_listen=format_endpoint(host, 0),
                warehouse_endpoint=wh.endpoint, keyring_path=str(run / "akr"), discovery=None, crypto=crypto,
            )
            cfg.update(agent_kw)
            agent = Agent(AgentConfig(**cfg), identity=pki.identity("agent", Role.AGENT), ca_cert=pki.ca_cert)
            agent.start()
            stack_.callback(agent.stop, drain=False, timeout=2)
            return Stack(agent, wh, run / "store")

        yield make
