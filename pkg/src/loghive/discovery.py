"""Multicast agent discovery (ADM/AOM) and agent selection.

A device multicasts a signed ADM whose payload is its 20-byte id. Agents
that know the device (its certificate is in their keyring) unicast back a
signed AOM whose payload is the agent id; the agent's transport endpoint
travels in an ENDPOINT extension and its certificate in a CERT extension,
so the device can check the offer against the CA.
"""

from __future__ import annotations

import ipaddress
import logging
import os
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from cryptography import x509

from . import channel as ch
from . import wire
from .identity import (
    ID_SIZE,
    EndpointIdentity,
    IdentityError,
    Keyring,
    certificate_der,
    certificate_id,
    load_certificate,
    verify_certificate,
)
from .transport import ZERO_ID, format_endpoint, parse_endpoint
from .wire import Ext, MsgType, WireMessage

log = logging.getLogger(__name__)

DEFAULT_GROUP_V4 = "239.77.76.80"
DEFAULT_GROUP_V6 = "ff02::4c48:5031"
DEFAULT_PORT = 7780
COLLECT_WINDOW_S = 2.0
ADM_ATTEMPTS = 3
VALIDITY_S = 30
MAX_DATAGRAM = 65507


class DiscoveryError(Exception):
    pass


class NeedsManualConfiguration(DiscoveryError):
    """No eligible agent; the operator must configure ``agent_endpoint``."""


@dataclass(frozen=True)
class AgentOffer:
    agent_id: bytes
    source: str  # address the AOM arrived from
    endpoint: str
    signature: bytes
    received_at: float

    def on_network(self, networks: Iterable) -> bool:
        try:
            addr = ipaddress.ip_address(self.source.split("%", 1)[0])
        except ValueError:
            return False
        return any(addr.version == n.version and addr in n for n in networks)


def _signed(identity: EndpointIdentity, msg_type: int, payload: bytes, exts=(), receiver=ZERO_ID) -> WireMessage:
    msg = WireMessage(
        msg_type=int(msg_type),
        sender_id=identity.id,
        receiver_id=receiver,
        message_id=time.time_ns() // 1000,
        validity=int(time.time()) + VALIDITY_S,
        sig_proto=wire.SIG_SHA256_RSA,
        extensions=tuple(exts),
        payload=payload,
    )
    return msg.with_signature(ch.sign_message(identity, wire.signed_bytes(msg)))


def build_adm(identity: EndpointIdentity) -> WireMessage:
    return _signed(identity, MsgType.ADM, identity.id)


def _family(group: str) -> int:
    return socket.AF_INET6 if ":" in group else socket.AF_INET


def _sender_socket(group: str, interface: str | None = None) -> socket.socket:
    fam = _family(group)
    sock = socket.socket(fam, socket.SOCK_DGRAM)
    if fam == socket.AF_INET:
        sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_TTL, 1)
        sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_LOOP, 1)
        if interface:
            sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_IF, socket.inet_aton(interface))
        sock.bind(("0.0.0.0", 0))
    else:
        sock.setsockopt(socket.IPPROTO_IPV6, socket.IPV6_MULTICAST_HOPS, 1)
        sock.setsockopt(socket.IPPROTO_IPV6, socket.IPV6_MULTICAST_LOOP, 1)
        if interface:
            sock.setsockopt(socket.IPPROTO_IPV6, socket.IPV6_MULTICAST_IF, socket.if_nametoindex(interface))
        sock.bind(("::", 0))
    return sock


def broadcast_adm(
    identity: EndpointIdentity,
    group: str = DEFAULT_GROUP_V4,
    port: int = DEFAULT_PORT,
    sock: socket.socket | None = None,
    interface: str | None = None,
) -> WireMessage:
    """Send one ADM to the multicast group; replies arrive on ``sock``."""
    adm = build_adm(identity)
    own = sock is None
    if own:
        sock = _sender_socket(group, interface)
    try:
        sock.sendto(wire.encode_message(adm), (group, port))
    except OSError as exc:
        raise DiscoveryError(f"multicast send failed: {exc}") from exc
    finally:
        if own:
            sock.close()
    return adm


def verify_adm(adm: WireMessage, keyring: Keyring) -> x509.Certificate | None:
    """The device certificate when ``adm`` is a valid ADM from a known device."""
    if adm.msg_type != MsgType.ADM or adm.payload != adm.sender_id or len(adm.payload) != ID_SIZE:
        return None
    if wire.is_expired(adm, time.time()):
        return None
    cert = keyring.get(adm.sender_id)
    if cert is None:
        return None
    if not ch.verify_signature(cert.public_key(), wire.signed_bytes(adm), adm.signature):
        return None
    return cert


def answer_adm(identity: EndpointIdentity, adm: WireMessage, keyring: Keyring, endpoint: str) -> WireMessage | None:
    """The signed AOM for a valid ADM, or None (silently) otherwise."""
    if verify_adm(adm, keyring) is None:
        return None
    exts = ((Ext.ENDPOINT, endpoint.encode()), (Ext.CERT, certificate_der(identity.certificate)))
    return _signed(identity, MsgType.AOM, identity.id, exts, receiver=adm.sender_id)


def verify_aom(
    aom: WireMessage,
    ca_cert: x509.Certificate,
    device_id: bytes,
    source: str,
    received_at: float | None = None,
) -> AgentOffer | None:
    if aom.msg_type != MsgType.AOM or aom.receiver_id != device_id:
        return None
    if aom.payload != aom.sender_id or len(aom.payload) != ID_SIZE:
        return None
    if wire.is_expired(aom, time.time()):
        return None
    der = aom.ext(Ext.CERT)
    raw_endpoint = aom.ext(Ext.ENDPOINT)
    if der is None or raw_endpoint is None:
        return None
    try:
        cert = load_certificate(der)
        verify_certificate(cert, ca_cert)
        if certificate_id(cert) != aom.sender_id:
            return None
        endpoint = raw_endpoint.decode()
        parse_endpoint(endpoint)
    except (IdentityError, ValueError):
        return None
    if not ch.verify_signature(cert.public_key(), wire.signed_bytes(aom), aom.signature):
        return None
    return AgentOffer(aom.sender_id, source, endpoint, aom.signature,
                      time.time() if received_at is None else received_at)


def collect_offers(
    identity: EndpointIdentity,
    ca_cert: x509.Certificate,
    group: str = DEFAULT_GROUP_V4,
    port: int = DEFAULT_PORT,
    window: float = COLLECT_WINDOW_S,
    attempts: int = ADM_ATTEMPTS,
    interface: str | None = None,
) -> list[AgentOffer]:
    """Send ADMs until at least one verified AOM arrives within a window."""
    sock = _sender_socket(group, interface)
    try:
        for _ in range(attempts):
            broadcast_adm(identity, group, port, sock)
            offers: dict[bytes, AgentOffer] = {}
            deadline = time.monotonic() + window
            while (left := deadline - time.monotonic()) > 0:
                sock.settimeout(left)
                try:
                    data, addr = sock.recvfrom(MAX_DATAGRAM)
                except socket.timeout:
                    break
                try:
                    aom = wire.decode_message(data)
                except wire.WireError:
                    continue
                offer = verify_aom(aom, ca_cert, identity.id, addr[0])
                if offer is not None:
                    offers.setdefault(offer.agent_id, offer)
            if offers:
                return list(offers.values())
        return []
    finally:
        sock.close()


class DiscoveryResponder:
    """Background thread answering ADMs on a multicast group."""

    def __init__(
        self,
        identity: EndpointIdentity,
        keyring: Keyring,
        endpoint: str | Callable[[str], str],
        group: str = DEFAULT_GROUP_V4,
        port: int = DEFAULT_PORT,
        interface: str | None = None,
    ):
        self.identity = identity
        self.keyring = keyring
        self.endpoint = endpoint
        self.group = group
        self.port = port
        self.answered = 0
        self.ignored = 0
        self._stop = threading.Event()
        self._sock = self._open(interface)
        self._thread = threading.Thread(target=self._run, name="discovery", daemon=True)

    def _open(self, interface: str | None) -> socket.socket:
        fam = _family(self.group)
        sock = socket.socket(fam, socket.SOCK_DGRAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        if hasattr(socket, "SO_REUSEPORT"):
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
        if fam == socket.AF_INET:
            sock.bind(("", self.port))
            iface = socket.inet_aton(interface or "0.0.0.0")
            sock.setsockopt(socket.IPPROTO_IP, socket.IP_ADD_MEMBERSHIP, socket.inet_aton(self.group) + iface)
        else:
            sock.bind(("::", self.port))
            idx = socket.if_nametoindex(interface) if interface else 0
            mreq = socket.inet_pton(socket.AF_INET6, self.group) + struct.pack("@I", idx)
            sock.setsockopt(socket.IPPROTO_IPV6, socket.IPV6_JOIN_GROUP, mreq)
        sock.settimeout(0.2)
        return sock

    def start(self) -> "DiscoveryResponder":
        self._thread.start()
        return self

    def _advertised(self, peer: str) -> str:
        ep = self.endpoint(peer) if callable(self.endpoint) else self.endpoint
        host, port = parse_endpoint(ep)
        if host in ("", "0.0.0.0", "::"):
            host = local_address_for(peer)
        return format_endpoint(host, port)

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                data, addr = self._sock.recvfrom(MAX_DATAGRAM)
            except socket.timeout:
                continue
            except OSError:
                return
            try:
                adm = wire.decode_message(data)
                aom = answer_adm(self.identity, adm, self.keyring, self._advertised(addr[0]))
            except (wire.WireError, ValueError, OSError):
                aom = None
            if aom is None:
                self.ignored += 1
                continue
            try:
                self._sock.sendto(wire.encode_message(aom), addr)
                self.answered += 1
            except OSError as exc:
                log.debug("AOM send to %s failed: %s", addr, exc)

    def stop(self) -> None:
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join(timeout=2)
        self._sock.close()


def local_address_for(peer: str) -> str:
    """Local source address the kernel would use to reach ``peer``."""
    fam = socket.AF_INET6 if ":" in peer else socket.AF_INET
    with socket.socket(fam, socket.SOCK_DGRAM) as s:
        s.connect((peer, 9))
        return s.getsockname()[0]


def default_local_networks() -> list:
    """Loopback, link-local and the /24 (v4) around the primary address."""
    nets = [
        ipaddress.ip_network("127.0.0.0/8"),
        ipaddress.ip_network("::1/128"),
        ipaddress.ip_network("169.254.0.0/16"),
        ipaddress.ip_network("fe80::/10"),
    ]
    try:
        primary = local_address_for("192.0.2.1")
        nets.append(ipaddress.ip_network(f"{primary}/24", strict=False))
    except OSError:
        pass
    return nets


class SelectionMemory:
    """The last agent a device used, persisted as 40 hex characters."""

    def __init__(self, path: os.PathLike | str | None = None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self.last_agent_id: bytes | None = None
        if self.path is not None and self.path.exists():
            try:
                raw = bytes.fromhex(self.path.read_text().strip())
            except ValueError:
                raw = b""
            self.last_agent_id = raw if len(raw) == ID_SIZE else None

    def remember(self, agent_id: bytes) -> None:
        with self._lock:
            self.last_agent_id = agent_id
            if self.path is not None:
                tmp = self.path.with_suffix(".tmp")
                tmp.write_text(agent_id.hex() + "\n")
                os.replace(tmp, self.path)


def select_agent(
    offers: Sequence[AgentOffer],
    memory: SelectionMemory,
    local_networks: Iterable,
    rng: random.Random,
) -> AgentOffer:
    """Previously used agent, else the single local one, else a random local one."""
    chosen = None
    if memory.last_agent_id is not None:
        chosen = next((o for o in offers if o.agent_id == memory.last_agent_id), None)
    if chosen is None:
        nets = list(local_networks)
        local = sorted((o for o in offers if o.on_network(nets)), key=lambda o: o.agent_id)
        if not local:
            raise NeedsManualConfiguration("no agent offer from a local network; set agent_endpoint")
        chosen = local[0] if len(local) == 1 else rng.choice(local)
    memory.remember(chosen.agent_id)
    return chosen


def discover_agent(
    identity: EndpointIdentity,
    ca_cert: x509.Certificate,
    memory: SelectionMemory,
    group: str = DEFAULT_GROUP_V4,
    port: int = DEFAULT_PORT,
    rng: random.Random | None = None,
    window: float = COLLECT_WINDOW_S,
    attempts: int = ADM_ATTEMPTS,
    interface: str | None = None,
) -> str:
    """Endpoint of the selected agent; raises NeedsManualConfiguration."""
    try:
        offers = collect_offers(identity, ca_cert, group, port, window, attempts, interface)
    except (OSError, DiscoveryError) as exc:
        raise NeedsManualConfiguration(f"discovery unavailable: {exc}") from exc
    return select_agent(offers, memory, default_local_networks(), rng or random.Random()).endpoint
