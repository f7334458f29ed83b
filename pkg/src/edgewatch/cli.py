"""Command-line front door: ``edgewatch {run,compare,metrics,vault,serve,generate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import metrics, simcore, vault
from .errors import ConsentWithheld, EdgewatchError


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_run(args) -> int:
    scenario = simcore.load_scenario(args.scenario)
    strategy = (scenario.offload_strategy() if args.strategy == "offload"
                else simcore.Strategy.onload())
    device = simcore.DEVICE_PRESETS[args.device]
    out = Path(args.out)
    try:
        report = simcore.run_session(scenario, strategy, device)
    except ConsentWithheld as exc:
        _write_json(out / "session_report.json", exc.report.to_dict())
        raise
    _write_json(out / "session_report.json", report.to_dict())
    (out / "session_report.csv").write_text(metrics.to_csv([report.summary()]))
    (out / "session.log").write_text("".join(f"{line}\n" for line in report.warn_log + report.sms_log))
    print(json.dumps({
        "strategy": strategy.label,
        "device": device.name,
        "mean_latency_ms": report.mean_latency_ms,
        "warnings": report.warnings,
        "incidents_recorded": report.incidents_recorded,
        "incidents_delivered": report.incidents_delivered,
        "bytes_off_device": report.bytes_off_device,
    }))
    return 0


def cmd_compare(args) -> int:
    scenario = simcore.load_scenario(args.scenario)
    pairs = [(simcore.Strategy.onload(), simcore.DEVICE_PRESETS[name]) for name in args.devices]
    pairs.append((scenario.offload_strategy(), simcore.DEVICE_PRESETS["default"]))
    comparison = simcore.compare_strategies(scenario, pairs)
    out = Path(args.out)
    _write_json(out / "comparison.json", comparison.to_dict())
    (out / "comparison.csv").write_text(metrics.to_csv([asdict(r) for r in comparison.rows]))
    (out / "references.csv").write_text(metrics.to_csv(comparison.references))
    for row in comparison.rows:
        print(f"{row.label:24s} mean={row.mean_latency_ms:9.1f} ms  "
              f"off-device={row.bytes_off_device} B  raw-frames={row.raw_frame_bytes} B")
    return 0


def cmd_metrics(args) -> int:
    matrix = metrics.ConfusionMatrix.from_pairs(metrics.read_labels(args.labels))
    result = {"confusion": matrix.to_dict(), "scores": asdict(metrics.scores(matrix))}
    print(json.dumps(result, indent=2))
    if args.out:
        metrics.write_report(result, args.out, "metrics")
    return 0


def _key(args) -> vault.EncryptionKey:
    return vault.EncryptionKey.from_hex(args.key, args.key_id)


def cmd_vault_seal(args) -> int:
    payload = Path(args.input).read_bytes()
    meta = vault.IncidentMeta(
        session_id=simcore._session_bytes(args.session),
        timestamp_ms=args.timestamp,
        cls=args.cls,
        confidence=args.confidence,
    )
    envelope = vault.seal_incident(payload, meta, _key(args))
    Path(args.output).write_bytes(envelope)
    print(json.dumps({"bytes": len(envelope), "payload_len": len(payload)}))
    return 0


def cmd_vault_open(args) -> int:
    meta, payload = vault.open_incident(Path(args.input).read_bytes(), _key(args))
    if args.output:
        Path(args.output).write_bytes(payload)
    print(json.dumps({
        "session_id": meta.session_id.hex(),
        "timestamp_ms": meta.timestamp_ms,
        "class": meta.cls.label,
        "confidence_x1e4": meta.confidence_x1e4,
        "payload_len": len(payload),
    }))
    return 0


def cmd_serve(args) -> int:
    from .agent import AgentService, make_server

    service = AgentService([_key(args)], log_path=args.log)
    server = make_server(service, args.host, args.port)
    host, port = server.server_address[:2]
    print(f"agent listening on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_generate(args) -> int:
    episodes = [tuple(int(x) for x in e.split(":")) for e in args.episode] or [(20, 3)]
    scenario = simcore.synthetic_scenario(seed=args.seed, n_frames=args.frames, episodes=episodes)
    simcore.save_scenario(scenario, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgewatch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one session and write a SessionReport")
    p.add_argument("--scenario", required=True)
    p.add_argument("--strategy", choices=["onload", "offload"], default="onload")
    p.add_argument("--device", choices=sorted(simcore.DEVICE_PRESETS), default="default")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="compare onload and offload on one scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--devices", nargs="+", default=["default"],
                   choices=sorted(simcore.DEVICE_PRESETS))
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("metrics", help="replay labeled (predicted, actual) pairs")
    p.add_argument("--labels", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("vault", help="seal or open incident envelopes")
    vsub = p.add_subparsers(dest="vault_command", required=True)
    for name, func in (("seal", cmd_vault_seal), ("open", cmd_vault_open)):
        v = vsub.add_parser(name)
        v.add_argument("--key", required=True, help="key bytes as hex")
        v.add_argument("--key-id", type=int, default=0)
        v.add_argument("--in", dest="input", required=True)
        v.add_argument("--out", dest="output", required=(name == "seal"))
        if name == "seal":
            v.add_argument("--session", required=True)
            v.add_argument("--timestamp", type=int, required=True)
            v.add_argument("--class", dest="cls", default="Violation")
            v.add_argument("--confidence", type=float, required=True)
        v.set_defaults(func=func)

    p = sub.add_parser("serve", help="run the agent HTTP service")
    p.add_argument("--key", required=True)
    p.add_argument("--key-id", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--log", help="append-only incident log path")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("generate", help="write a synthetic scenario file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--episode", action="append", default=[], metavar="START:LEN")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (EdgewatchError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
