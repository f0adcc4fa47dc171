"""Simulated devices and the synthetic corpus generator.

Modes:

* ``honest`` streams corpus lines as LOG_BATCH messages;
* ``replayer`` does the same and, like an attacker on the wire, re-sends
  verbatim copies of frames that were already delivered;
* ``impostor`` presents a certificate the CA never signed.
"""

from __future__ import annotations

import json
import logging
import os
import random
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from cryptography import x509

from . import channel as ch
from .agent import encode_lines
from .discovery import NeedsManualConfiguration, SelectionMemory, discover_agent
from .identity import EndpointIdentity, IdentityError
from .pipeline import VAR
from .transport import CryptoParams, TransportError, connect, parse_endpoint
from .wire import Ext, WireError

log = logging.getLogger(__name__)

MODES = ("honest", "replayer", "impostor")
DEFAULT_CHUNK_BYTES = 32 * 1024
_U64 = struct.Struct("!Q")


class DeviceError(Exception):
    pass


@dataclass
class DeviceProfile:
    identity: EndpointIdentity
    corpus_path: str
    ca_cert: x509.Certificate
    agent: str | None = None  # None: discover over multicast
    mode: str = "honest"
    rate: float = 0.0  # lines per second, 0 = unthrottled
    total_bytes: int | None = None  # None: whole corpus
    ip_version: int = 4
    replays: int = 0
    chunk_bytes: int = DEFAULT_CHUNK_BYTES
    crypto: CryptoParams = field(default_factory=CryptoParams)
    seed: int = 0
    first_line: int = 1
    memory_path: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.ip_version not in (4, 6):
            raise ValueError("ip_version must be 4 or 6")
        if self.chunk_bytes < 1:
            raise ValueError("chunk_bytes must be positive")


@dataclass
class TransmissionReport:
    device: str
    mode: str
    bytes_sent: int = 0
    wire_bytes: int = 0
    batches: int = 0
    acks: int = 0
    rejects: int = 0
    injected: int = 0
    rekeys: int = 0
    secs: float = 0.0
    handshake_rejected: bool = False
    error: str = ""

    @property
    def mbps(self) -> float:
        return self.bytes_sent * 8 / 1e6 / self.secs if self.secs > 0 else 0.0

    def to_text(self) -> str:
        out = []
        for k, v in asdict(self).items():
            if isinstance(v, bool):
                v = int(v)
            elif isinstance(v, float):
                v = f"{v:.3f}"
            out.append(f"{k}={v}")
        out.append(f"mbps={self.mbps:.3f}")
        return "\n".join(out)


def chunk_lines(lines: Sequence[str], chunk_bytes: int, budget: int | None = None):
    """Yield ``(first_index, lines)`` chunks of roughly ``chunk_bytes`` each.

    Stops once the cumulative size (with newlines) reaches ``budget``.
    """
    sent = 0
    start = 0
    cur: list[str] = []
    size = 0
    for i, line in enumerate(lines):
        if budget is not None and sent >= budget:
            break
        n = len(line.encode()) + 1
        cur.append(line)
        size += n
        sent += n
        if size >= chunk_bytes:
            yield start, cur
            start, cur, size = i + 1, [], 0
    if cur:
        yield start, cur


def read_corpus(path: os.PathLike | str) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    if text.endswith("\n"):
        text = text[:-1]
    return text.split("\n") if text else []


def _resolve_agent(profile: DeviceProfile) -> str:
    if profile.agent:
        host, _ = parse_endpoint(profile.agent)
        if (":" in host) != (profile.ip_version == 6):
            raise DeviceError(f"agent endpoint {profile.agent} is not IPv{profile.ip_version}")
        return profile.agent
    group = "ff02::4c48:5031" if profile.ip_version == 6 else "239.77.76.80"
    try:
        return discover_agent(profile.identity, profile.ca_cert, SelectionMemory(profile.memory_path),
                              group, rng=random.Random(profile.seed))
    except NeedsManualConfiguration as exc:
        raise DeviceError(f"no agent reachable: {exc}") from exc


def run_device(profile: DeviceProfile) -> TransmissionReport:
    report = TransmissionReport(profile.identity.hex_id, profile.mode)
    endpoint = _resolve_agent(profile)
    lines = read_corpus(profile.corpus_path)
    chunks = list(chunk_lines(lines, profile.chunk_bytes, profile.total_bytes))
    t0 = time.perf_counter()
    try:
        conn = connect(endpoint, profile.identity, profile.ca_cert, profile.crypto)
    except (ch.AuthError, IdentityError) as exc:
        report.handshake_rejected = True
        report.error = str(exc)
        report.secs = time.perf_counter() - t0
        if profile.mode != "impostor":
            log.warning("device %s handshake rejected: %s", report.device, exc)
        return report
    except OSError as exc:
        raise DeviceError(f"cannot reach agent at {endpoint}: {exc}") from exc

    rng = random.Random(profile.seed)
    captured: list[bytes] = []
    replayer = profile.mode == "replayer" and profile.replays > 0
    step = max(1, profile.crypto.batch_size)
    groups = [chunks[i:i + step] for i in range(0, len(chunks), step)]

    def inject(upto: int) -> None:
        while captured and report.injected < upto:
            conn.send_raw(rng.choice(captured))
            report.injected += 1

    try:
        for n, group in enumerate(groups):
            if replayer and n:
                # spread injections evenly over the gaps between groups
                inject(profile.replays * n // (len(groups) - 1))
            items = [
                (encode_lines(chunk), ((Ext.SEQUENCE, _U64.pack(profile.first_line + start)),))
                for start, chunk in group
            ]
            report.acks += conn.send_group(items, on_frame=captured.append if replayer else None)
            report.batches += len(items)
            report.bytes_sent += sum(len(p) for p, _ in items)
            if profile.rate > 0:
                target = (group[-1][0] + len(group[-1][1])) / profile.rate
                lag = target - (time.perf_counter() - t0)
                if lag > 0:
                    time.sleep(lag)
        if replayer:
            inject(profile.replays)
    except (OSError, EOFError, ch.ChannelError, TransportError, WireError) as exc:
        report.error = str(exc)
    finally:
        report.secs = time.perf_counter() - t0
        report.wire_bytes = conn.stats.bytes_sent
        report.rekeys = conn.state.rekeys
        # the agent never acknowledges a rejected frame
        report.rejects = report.injected - conn.stats.stray_acks
        conn.close()
    return report


# -- corpus generation ---------------------------------------------------------

_WORDS = ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet")



@dataclass(frozen=True)
class TemplateSpec:
    """A generating template: literal words plus ``:::`` slots, each with a slot kind."""

    pattern: str
    slots: tuple[str, ...] = ()

    @property
    def slot_count(self) -> int:
        return self.pattern.split(" ").count(VAR)


DEFAULT_TEMPLATES = (
    TemplateSpec("Server ::: is down", ("host",)),
    TemplateSpec("%LINK-3-UPDOWN: Interface ::: changed state to down", ("iface",)),
    TemplateSpec("sshd: Accepted publickey for ::: from ::: port ::: ssh2", ("user", "ipv4", "port")),
    TemplateSpec("kernel: TCP connection reset by peer on local port :::", ("port",)),
    TemplateSpec("CRON: job ::: finished with exit status 0 after ::: seconds", ("hexid", "number")),
)


def _default_slots(pattern: str) -> tuple[str, ...]:
    return ("word",) * pattern.split(" ").count(VAR)


def _fill(kind: str, rng: random.Random, line_no: int) -> str:
    # value pools are large enough that no single value reaches a 10% share
    if kind == "word":
        return f"{rng.choice(_WORDS)}{line_no}"
    if kind == "host":
        return f"{rng.choice(_WORDS)}{rng.randrange(100)}"
    if kind == "iface":
        return f"Gi{rng.randrange(4)}/{rng.randrange(48)}"
    if kind == "user":
        return f"{rng.choice(_WORDS)}{rng.randrange(10)}"
    if kind == "ipv4":
        return f"10.{rng.randrange(4)}.{rng.randrange(256)}.{rng.randrange(1, 255)}"
    if kind == "port":
        return str(rng.randrange(1024, 65536))
    if kind == "number":
        return f"{rng.randrange(1000) / 10:.1f}"
    if kind == "hexid":
        return f"{rng.getrandbits(24):06x}"
    if kind.startswith("choice:"):
        return rng.choice(kind[7:].split("|"))
    raise ValueError(f"unknown slot kind {kind!r}")


def generate_corpus(
    templates: Sequence[str | TemplateSpec],
    lines: int,
    seed: int,
    path: os.PathLike | str | None = None,
) -> list[str]:
    """Seeded synthetic corpus; writes ``path`` and ``path.templates.json`` when given."""
    if not templates:
        raise ValueError("at least one template is required")
    specs = [t if isinstance(t, TemplateSpec) else TemplateSpec(t, _default_slots(t)) for t in templates]
    for s in specs:
        if len(s.slots) != s.slot_count:
            raise ValueError(f"template {s.pattern!r} declares {len(s.slots)} slots for {s.slot_count} placeholders")
    rng = random.Random(seed)
    out = []
    for n in range(1, lines + 1):
        spec = specs[rng.randrange(len(specs))]
        values = iter(_fill(kind, rng, n) for kind in spec.slots)
        out.append(" ".join(next(values) if tok == VAR else tok for tok in spec.pattern.split(" ")))
    if path is not None:
        p = Path(path)
        p.write_text("".join(line + "\n" for line in out), encoding="utf-8")
        Path(str(p) + ".templates.json").write_text(
            json.dumps([{"pattern": s.pattern, "slots": list(s.slots)} for s in specs], indent=1)
        )
    return out


def corpus_for_bytes(templates, budget: int, seed: int, path) -> list[str]:
    """A corpus just large enough to reach ``budget`` bytes."""
    approx = max(1, budget // 30)
    while True:
        lines = generate_corpus(templates, approx, seed)
        total = sum(len(line.encode()) + 1 for line in lines)
        if total >= budget:
            break
        approx = int(approx * budget / total) + 16
    keep, size = [], 0
    for line in lines:
        if size >= budget:
            break
        keep.append(line)
        size += len(line.encode()) + 1
    return generate_corpus(templates, len(keep), seed, path)
