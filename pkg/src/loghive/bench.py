"""In-process load harness: N simulated devices, one agent, one warehouse."""

from __future__ import annotations

import os
import shutil
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .agent import Agent
from .config import AgentConfig, WarehouseConfig
from .device import DEFAULT_TEMPLATES, DeviceProfile, TransmissionReport, corpus_for_bytes, read_corpus, run_device
from .identity import CertificateAuthority, Role, load_or_create_identity
from .transport import CryptoParams, format_endpoint
from .warehouse import Warehouse, iter_records, read_device_log



@dataclass
class BenchDevice:
    device: str
    bytes: int
    secs: float
    batches: int
    acks: int
    stored: int
    readback_ok: bool
    report: TransmissionReport | None = None

    @property
    def mbps(self) -> float:
        return self.bytes * 8 / 1e6 / self.secs if self.secs > 0 else 0.0

    def line(self) -> str:
        return f"device={self.device} bytes={self.bytes} secs={self.secs:.3f} mbps={self.mbps:.3f}"


@dataclass
class BenchResult:
    ip_version: int
    devices: list[BenchDevice] = field(default_factory=list)
    wall_secs: float = 0.0
    agent_status: dict = field(default_factory=dict)
    warehouse_counters: dict = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return sum(d.bytes for d in self.devices)

    @property
    def total_mbps(self) -> float:
        return self.total_bytes * 8 / 1e6 / self.wall_secs if self.wall_secs > 0 else 0.0

    @property
    def mean_device_mbps(self) -> float:
        return sum(d.mbps for d in self.devices) / len(self.devices) if self.devices else 0.0

    @property
    def lost_batches(self) -> int:
        return sum(max(d.batches - d.stored, 0) + (d.batches - d.acks) for d in self.devices)

    @property
    def readback_ok(self) -> bool:
        return all(d.readback_ok for d in self.devices)

    def lines(self) -> list[str]:
        out = [d.line() for d in self.devices]
        out.append(
            f"total devices={len(self.devices)} ipv={self.ip_version} bytes={self.total_bytes} "
            f"secs={self.wall_secs:.3f} mbps={self.total_mbps:.3f} "
            f"per_device_mbps={self.mean_device_mbps:.3f} lost={self.lost_batches} "
            f"readback={'ok' if self.readback_ok else 'MISMATCH'}"
        )
        return out


@dataclass
class Provision:
    root: Path
    ca: CertificateAuthority
    agent: object
    warehouse: object
    devices: list


def loopback(ip_version: int) -> str:
    return "::1" if ip_version == 6 else "127.0.0.1"


def provision(root: os.PathLike | str, n_devices: int, ip_version: int = 4) -> Provision:
    """CA, agent, warehouse and device identities under ``root`` (reused if present)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ca_dir = root / "ca"
    ca = CertificateAuthority.load(ca_dir) if (ca_dir / "ca.pem").exists() else CertificateAuthority.create()
    ca.save(ca_dir)
    ip = loopback(ip_version)
    agent = load_or_create_identity(root / "agent", "02:00:00:00:ff:01", ip, Role.AGENT, ca)
    warehouse = load_or_create_identity(root / "warehouse", "02:00:00:00:ff:02", ip, Role.SERVER, ca)
    devices = [
        load_or_create_identity(root / f"device{i}", f"02:00:00:00:{i >> 8:02x}:{i & 0xFF:02x}", ip, Role.DEVICE, ca)
        for i in range(n_devices)
    ]
    return Provision(root, ca, agent, warehouse, devices)


def run_bench(
    workdir: os.PathLike | str,
    devices: int = 8,
    bytes_per_device: int = 2_000_000,
    ip_version: int = 4,
    batch_size: int = 32,
    ttl_kilobits: int = 8192,
    seed: int = 42,
    fsync: bool = True,
    emit_cbe: bool = True,
    run_name: str | None = None,
) -> BenchResult:
    """Stream every device corpus through agent and warehouse, then verify read-back."""
    workdir = Path(workdir)
    prov = provision(workdir / "pki", devices, ip_version)
    run_dir = workdir / (run_name or f"run-v{ip_version}-n{devices}")
    shutil.rmtree(run_dir, ignore_errors=True)  # a rerun starts from an empty store
    run_dir.mkdir(parents=True)
    corpora = []
    for i in range(devices):
        path = workdir / "corpora" / f"device{i}-{bytes_per_device}-{seed}.log"
        if not path.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
            corpus_for_bytes(DEFAULT_TEMPLATES, bytes_per_device, seed + i, path)
        corpora.append(path)

    crypto = CryptoParams(ttl_kilobits=ttl_kilobits, batch_size=batch_size)
    host = loopback(ip_version)
    wh = Warehouse(
        WarehouseConfig(listen=format_endpoint(host, 0), store_path=str(run_dir / "store"),
                        keyring_path=str(run_dir / "wh-keyring"), fsync=fsync, crypto=crypto),
        identity=prov.warehouse, ca_cert=prov.ca.certificate,
    ).start()
    agent = Agent(
        AgentConfig(
            capture_listen=format_endpoint(host, 0), control_listen=format_endpoint(host, 0),
            warehouse_endpoint=wh.endpoint, keyring_path=str(run_dir / "agent-keyring"),
            discovery=None, crypto=crypto, emit_cbe=emit_cbe,
            devices={d.hex_id: {"type": "simulated", "geo": "lab"} for d in prov.devices},
        ),
        identity=prov.agent, ca_cert=prov.ca.certificate,
    ).start()

    result = BenchResult(ip_version)
    reports: list[TransmissionReport | None] = [None] * devices
    errors: list[BaseException] = []
    barrier = threading.Barrier(devices)

    def worker(i: int) -> None:
        profile = DeviceProfile(
            identity=prov.devices[i], corpus_path=str(corpora[i]), ca_cert=prov.ca.certificate,
            agent=agent.capture_endpoint, ip_version=ip_version, crypto=crypto, seed=seed + i,
        )
        barrier.wait()
        try:
            reports[i] = run_device(profile)
        except BaseException as exc:  # surfaced after join
            errors.append(exc)

    try:
        threads = [threading.Thread(target=worker, args=(i,), name=f"bench-device{i}") for i in range(devices)]
        t0 = time.perf_counter()
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        agent.stop(drain=True)
        result.wall_secs = time.perf_counter() - t0
        result.agent_status = agent.status()
        result.warehouse_counters = dict(wh.counters)
    finally:
        agent.stop(drain=False, timeout=1)
        wh.stop()
    if errors:
        raise errors[0]

    store = run_dir / "store"
    for i, rep in enumerate(reports):
        dev_id = prov.devices[i].id
        stored = sum(1 for _ in iter_records(store, dev_id))
        ok = read_device_log(store, dev_id) == read_corpus(corpora[i])
        result.devices.append(BenchDevice(rep.device, rep.bytes_sent, rep.secs, rep.batches, rep.acks, stored, ok, rep))
    return result


def sweep(workdir, counts=(1, 2, 4, 8), **kw) -> list[BenchResult]:
    """Per-device throughput for each concurrency level."""
    return [run_bench(workdir, devices=n, run_name=f"sweep-v{kw.get('ip_version', 4)}-n{n}", **kw) for n in counts]
