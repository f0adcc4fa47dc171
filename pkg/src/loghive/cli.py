"""``loghive`` command line: one entry point, one subcommand per role.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from .identity import CertificateAuthority, Keyring, Role, load_certificate, load_identity, load_or_create_identity
from .transport import CryptoParams

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _crypto(args) -> CryptoParams:
    return CryptoParams(ttl_kilobits=args.ttl_kilobits, batch_size=args.batch_size)


def _add_crypto(p) -> None:
    p.add_argument("--ttl-kilobits", type=int, default=8192, help="session key budget in kilobits")
    p.add_argument("--batch-size", type=int, default=1, help="messages per group signature (1 = sign each)")


def _wait_for_signal() -> None:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    while not stop.wait(0.5):
        pass


def cmd_keygen(args) -> int:
    ca = CertificateAuthority.load(args.ca) if args.ca else None
    ident = load_or_create_identity(args.store, args.mac, args.ip, Role(args.role), ca)
    if args.keyring:
        Keyring(args.keyring).add(ident.certificate)
    print(f"id={ident.hex_id} role={args.role} store={args.store}")
    return EXIT_OK


def cmd_ca(args) -> int:
    if args.action == "init":
        if (Path(args.ca) / "ca.pem").exists() and not args.force:
            raise UsageError(f"{args.ca} already holds a CA (use --force to replace it)")
        CertificateAuthority.create(days=args.days).save(args.ca)
        print(f"ca={Path(args.ca) / 'ca.pem'}")
        return EXIT_OK
    from .identity import reissue_identity

    ca = CertificateAuthority.load(args.ca)
    ident = reissue_identity(args.store, ca)
    if args.keyring:
        Keyring(args.keyring).add(ident.certificate)
    print(f"id={ident.hex_id} issuer=ca store={args.store}")
    return EXIT_OK


def cmd_agent(args) -> int:
    from .agent import Agent
    from .config import AgentConfig

    agent = Agent(AgentConfig.load(args.config)).start()
    print(f"agent id={agent.identity.hex_id} capture={agent.capture_endpoint} control={agent.control_endpoint}",
          flush=True)
    try:
        _wait_for_signal()
    finally:
        agent.stop(drain=True)
    return EXIT_OK


def cmd_server(args) -> int:
    from .config import WarehouseConfig
    from .warehouse import Warehouse

    wh = Warehouse(WarehouseConfig.load(args.config)).start()
    print(f"server id={wh.identity.hex_id} listen={wh.endpoint} store={wh.config.store_path}", flush=True)
    try:
        _wait_for_signal()
    finally:
        wh.stop()
    return EXIT_OK


def cmd_device(args) -> int:
    from .device import DeviceProfile, run_device

    profile = DeviceProfile(
        identity=load_identity(args.identity),
        corpus_path=args.corpus,
        ca_cert=load_certificate(Path(args.ca_cert).read_bytes()),
        agent=args.agent,
        mode=args.mode,
        rate=args.rate,
        total_bytes=args.bytes,
        ip_version=args.ip,
        replays=args.replays,
        crypto=_crypto(args),
        seed=args.seed,
        memory_path=args.memory,
    )
    report = run_device(profile)
    print(report.to_text())
    if report.handshake_rejected and args.mode != "impostor":
        return EXIT_RUNTIME
    if report.error and not report.handshake_rejected:
        return EXIT_RUNTIME
    return EXIT_OK


def _load_templates(path):
    from .device import DEFAULT_TEMPLATES, TemplateSpec

    if path is None:
        return list(DEFAULT_TEMPLATES)
    text = Path(path).read_text()
    if path.endswith(".json"):
        return [TemplateSpec(t["pattern"], tuple(t["slots"])) for t in json.loads(text)]
    return [line for line in text.splitlines() if line.strip()]


def cmd_corpus(args) -> int:
    from .device import generate_corpus

    lines = generate_corpus(_load_templates(args.templates), args.lines, args.seed, args.out)
    print(f"lines={len(lines)} out={args.out} templates={args.out}.templates.json")
    return EXIT_OK


def cmd_readback(args) -> int:
    from .warehouse import read_device_log

    try:
        device = bytes.fromhex(args.device)
    except ValueError:
        raise UsageError("--device must be a hex id") from None
    out = sys.stdout
    for line in read_device_log(args.store, device, args.start, args.stop):
        out.write(line + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench, sweep

    kw = dict(bytes_per_device=args.bytes, ip_version=args.ip, batch_size=args.batch_size,
              ttl_kilobits=args.ttl_kilobits, seed=args.seed, fsync=not args.no_fsync)
    results = sweep(args.workdir, **kw) if args.sweep else [run_bench(args.workdir, devices=args.devices, **kw)]
    ok = True
    for r in results:
        for line in r.lines():
            print(line)
        ok = ok and r.lost_batches == 0 and r.readback_ok
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_control(args) -> int:
    from .agent import send_control

    kv = {}
    for item in args.args:
        k, sep, v = item.partition("=")
        if not sep:
            raise UsageError(f"argument {item!r} is not key=value")
        kv[k] = v
    status, text = send_control(
        args.agent, load_identity(args.identity), load_certificate(Path(args.ca_cert).read_bytes()),
        args.verb.upper(), kv,
    )
    print(text)
    return EXIT_OK if status == 0 else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="loghive", description="Secure log harvesting: devices, agents and a warehouse.")
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    s = sub.add_parser("keygen", help="create (or load) an endpoint identity")
    s.add_argument("--store", required=True, help="identity directory")
    s.add_argument("--mac", required=True)
    s.add_argument("--ip", required=True)
    s.add_argument("--role", choices=[r.value for r in Role if r is not Role.CA], default="device")
    s.add_argument("--ca", help="CA directory; without it the certificate is self-signed")
    s.add_argument("--keyring", help="also add the certificate to this keyring directory")
    s.set_defaults(func=cmd_keygen)

    s = sub.add_parser("ca", help="development CA: create it or issue certificates")
    s.add_argument("action", choices=["init", "issue"])
    s.add_argument("--ca", required=True, help="CA directory")
    s.add_argument("--store", help="identity directory to (re)issue a certificate for")
    s.add_argument("--keyring", help="add the issued certificate to this keyring")
    s.add_argument("--days", type=int, default=3650)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_ca)

    s = sub.add_parser("agent", help="run an agent until SIGINT/SIGTERM")
    s.add_argument("--config", help="agent config file (LOGHIVE_CONFIG overrides)")
    s.set_defaults(func=cmd_agent)

    s = sub.add_parser("server", help="run the warehouse server until SIGINT/SIGTERM")
    s.add_argument("--config", help="server config file (LOGHIVE_CONFIG overrides)")
    s.set_defaults(func=cmd_server)

    s = sub.add_parser("device", help="run a simulated device and print its report")
    s.add_argument("--mode", choices=["honest", "replayer", "impostor"], default="honest")
    s.add_argument("--corpus", required=True)
    s.add_argument("--bytes", type=int, help="send budget in bytes (default: whole corpus)")
    s.add_argument("--rate", type=float, default=0.0, help="lines per second, 0 = unthrottled")
    s.add_argument("--ip", type=int, choices=[4, 6], default=4)
    s.add_argument("--agent", help="agent endpoint host:port or [v6]:port; omit to discover")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--identity", required=True, help="device identity directory")
    s.add_argument("--ca-cert", required=True, help="trusted CA certificate (PEM)")
    s.add_argument("--replays", type=int, default=0, help="frames to re-inject in replayer mode")
    s.add_argument("--memory", help="file remembering the last selected agent")
    _add_crypto(s)
    s.set_defaults(func=cmd_device)

    s = sub.add_parser("corpus", help="generate a seeded synthetic log corpus")
    s.add_argument("--templates", help="template file (.json with slots, or one pattern per line)")
    s.add_argument("--lines", type=int, required=True)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_corpus)

    s = sub.add_parser("readback", help="print a device's reconstructed lines from the store")
    s.add_argument("--store", required=True)
    s.add_argument("--device", required=True, help="device id (hex)")
    s.add_argument("--start", type=int)
    s.add_argument("--stop", type=int)
    s.set_defaults(func=cmd_readback)

    s = sub.add_parser("bench", help="in-process load test; prints per-device throughput")
    s.add_argument("--workdir", required=True)
    s.add_argument("--devices", type=int, default=8)
    s.add_argument("--bytes", type=int, default=2_000_000, help="bytes per device")
    s.add_argument("--ip", type=int, choices=[4, 6], default=4)
    s.add_argument("--sweep", action="store_true", help="run 1, 2, 4 and 8 devices")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--no-fsync", action="store_true")
    s.add_argument("--ttl-kilobits", type=int, default=8192)
    s.add_argument("--batch-size", type=int, default=32)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("control", help="send a control command to an agent")
    s.add_argument("verb", choices=["SET_WAREHOUSE", "SET_LOG_FILTER", "SET_CRYPTO", "GET_STATUS"],
                   type=str.upper)
    s.add_argument("args", nargs="*", help="key=value arguments")
    s.add_argument("--agent", required=True, help="agent control endpoint")
    s.add_argument("--identity", required=True, help="controller identity directory")
    s.add_argument("--ca-cert", required=True)
    s.set_defaults(func=cmd_control)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    try:
        if not argv:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if args.command == "ca" and args.action == "issue" and not args.store:
            raise UsageError("ca issue: --store is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_OK
    except Exception as exc:
        print(f"loghive: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
