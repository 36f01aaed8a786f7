"""Command-line entry points.

Every failure prints one line ``error: <code>: <message>`` to stderr and
exits nonzero.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from .config import ExperimentConfig
from .continual import fresh_backbone, run_experiment
from .dataset import PreparedDataset, RoundSchedule, prepare_dataset
from .errors import ConfigError, ConnectionFailed, EdgeLoraError, InputError
from .model import Backbone
from .pretrain import pretrain

log = logging.getLogger("edgelora")

ADDR_ENV = "LECC_ADDR"
DEFAULT_ADDR = "127.0.0.1:7878"


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------- #
# Shared plumbing
# --------------------------------------------------------------------------- #
def _write(path: Path, data: str | bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data, encoding="utf-8", newline="")


def load_data(cfg: ExperimentConfig) -> PreparedDataset:
    return prepare_dataset(cfg.csv, cfg.few_shot, cfg.seed, cfg.round_schedule(),
                           cfg.holdout_per_class, cfg.max_len)


def obtain_backbone(cfg: ExperimentConfig, data: PreparedDataset) -> Backbone:
    """Load ``backbone_path`` or pretrain a fresh backbone on the training texts."""
    if cfg.backbone_path is not None:
        backbone = Backbone.load(cfg.backbone_path)
        if backbone.config.vocab_size < len(data.vocab) or backbone.config.max_len < data.max_len:
            raise ConfigError("backbone checkpoint does not fit this dataset's vocabulary/length")
        return backbone
    backbone = fresh_backbone(data, cfg.backbone_config(len(data.vocab)))
    if cfg.pretrain_epochs:
        from .continual import trim
        pretrain(backbone, data.tokens(data.train), cfg.pretrain_spec(), trim=trim)
    return backbone.freeze()


def trend_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "model", "mode", "f1"])
    for r, model, mode, f1 in rows:
        w.writerow([r, model, mode, f"{f1:.6f}"])
    return buf.getvalue()


def _config(args, **overrides) -> ExperimentConfig:
    return ExperimentConfig.load(args.config, **overrides)


def _out(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out) if getattr(args, "out", None) else cfg.out


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #
def cmd_synth(args):
    from .synth import write_synthetic
    paths = write_synthetic(args.out, seed=args.seed, edge_rows=args.edge_rows, ton_rows=args.ton_rows)
    for p in paths:
        print(p)


def cmd_prepare_data(args):
    schedule = RoundSchedule.parse(args.schedule) if args.schedule != "default" else None
    data = prepare_dataset(args.csv, args.preset, args.seed, schedule)
    out = Path(args.out)
    _write(out / "dataset.json", data.to_json())
    cleaning = json.dumps([r.to_dict() for r in data.reports], indent=1, sort_keys=True) + "\n"
    _write(out / "cleaning.json", cleaning)
    for rep in data.reports:
        print(f"{rep.source}: {rep.rows} rows, {rep.kept} features kept, dropped {list(rep.dropped)}")
    print(f"train {len(data.train)}, test {len(data.test)}, holdout {len(data.holdout)}, "
          f"vocab {len(data.vocab)}")


def cmd_pretrain(args):
    cfg = _config(args)
    data = load_data(cfg)
    cfg.backbone_path = None
    backbone = obtain_backbone(cfg, data)
    out = Path(args.out) if args.out else cfg.out / "backbone.bin"
    _write(out, backbone.to_bytes())
    print(f"{out} fingerprint {backbone.fingerprint():08x}")


def cmd_run_local(args):
    cfg = _config(args, mode=args.mode)
    out = _out(args, cfg)
    data = load_data(cfg)
    backbone = obtain_backbone(cfg, data)
    _write(out / "backbone.bin", backbone.to_bytes())
    reports, trend = {}, []
    for mode in cfg.modes():
        spec = cfg.train_spec(mode)
        res = run_experiment(data, spec, backbone, cfg.lora_config(), cfg.backbone,
                             progress=lambda r, e, m=mode: log.info("%s round %d f1 %.4f", m, r, e.metrics.f1))
        rep = res.report
        for rnd in rep.rounds:
            _write(out / mode / f"metrics_round{rnd.round_id}.csv", rep.metrics_csv(rnd.round_id))
        reports[mode] = rep.to_dict()
        trend.extend(rep.trend_rows())
        if res.bundle is not None:
            _write(out / "bundle.bin", res.bundle.to_bytes())
    _write(out / "trend.csv", trend_csv(trend))
    _write(out / "report.json", json.dumps(reports, indent=1, sort_keys=True) + "\n")
    for r, model, mode, f1 in trend:
        print(f"{mode} round {r} f1 {f1:.4f}")


def _global_outputs(out: Path, report, model: str, bundle_bytes: bytes | None):
    _write(out / "global.json", report.to_json())
    _write(out / "global.csv", report.to_csv())
    rows = [(r.round, model, f"lora-node{r.node}", r.own_f1) for r in sorted(report.rows, key=lambda r: (r.node, r.round))
            if r.own_f1 is not None]
    _write(out / "trend.csv", trend_csv(rows))
    if bundle_bytes is not None:
        _write(out / "bundle.bin", bundle_bytes)


def cmd_run_global(args):
    from .federation import cross_device_summary, run_global
    cfg = _config(args, devices=args.devices)
    out = _out(args, cfg)
    data = load_data(cfg)
    backbone = obtain_backbone(cfg, data)
    report, coordinator = run_global(data, cfg.train_spec("lora"), backbone, cfg.lora_config(),
                                     cfg.devices, cfg.epsilon)
    _global_outputs(out, report, cfg.backbone, coordinator.bundle.to_bytes())
    for s in cross_device_summary(report, len(data.codec)):
        print(f"node {s['node']} round {s['round']}: cross-domain accuracy "
              f"{s['before']:.4f} -> {s['after']:.4f} (chance {s['chance']:.4f})")


def _addr(args) -> str:
    return args.addr or os.environ.get(ADDR_ENV) or DEFAULT_ADDR


def cmd_serve(args):
    from .coordinator.service import Coordinator, serve
    from .federation import device_schedules, holdout_gate
    cfg = _config(args, devices=args.devices)
    out = _out(args, cfg)
    data = load_data(cfg)
    backbone = obtain_backbone(cfg, data)
    coordinator = Coordinator(backbone, holdout_gate(data, cfg.epsilon), cfg.devices)
    addr = _addr(args)
    try:
        server = serve(addr, coordinator)
    except (OSError, ValueError) as exc:
        raise CliError("bind-error", f"cannot bind {addr}: {exc}") from None
    print(f"listening on {server.address}", flush=True)
    total = len(device_schedules(data.schedule.rounds, cfg.devices)[0])
    stop = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stop.set())

    def done():
        with coordinator._cond:
            return (coordinator.closed_round >= total - 1
                    and len(coordinator.deliveries) >= cfg.devices
                    and all(r >= total - 1 for r in coordinator.deliveries.values()))

    while not stop.wait(0.2):
        if args.exit_when_done and done():
            break
    server.shutdown()
    server.server_close()
    _write(out / "bundle.bin", coordinator.bundle.to_bytes())
    _write(out / "coordinator.json", json.dumps(coordinator.summary(), indent=1, sort_keys=True) + "\n")
    print(f"bundle with {len(coordinator.bundle)} adapters saved to {out / 'bundle.bin'}")


def cmd_edge(args):
    from .coordinator.client import SocketTransport
    from .federation import GlobalReport, run_node
    cfg = _config(args, devices=args.devices)
    out = _out(args, cfg)
    if not 0 <= args.node < cfg.devices:
        raise ConfigError(f"node id {args.node} outside [0, {cfg.devices})")
    data = load_data(cfg)
    backbone = obtain_backbone(cfg, data)
    transport = SocketTransport(_addr(args), retries=args.retries)
    try:
        rows = run_node(args.node, cfg.devices, data, cfg.train_spec("lora"), backbone, cfg.lora_config(),
                        transport)
    finally:
        transport.close()
    report = GlobalReport(cfg.devices, rows)
    _write(out / f"node{args.node}.json", report.to_json())
    for r in rows:
        print(f"round {r.round} own_f1 {r.own_f1} cross {r.cross_before} -> {r.cross_after}")


def render_report(in_dir: Path, fmt: str) -> str:
    """Trend rows (round, model, mode, f1) from stored outputs, as CSV or JSON."""
    in_dir = Path(in_dir)
    trend = in_dir / "trend.csv"
    if not trend.is_file():
        raise FileNotFoundError(f"no trend.csv under {in_dir}")
    with open(trend, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if fmt == "csv":
        return trend_csv([(int(r["round"]), r["model"], r["mode"], float(r["f1"])) for r in rows])
    payload = {"trend": [{"round": int(r["round"]), "model": r["model"], "mode": r["mode"],
                          "f1": float(r["f1"])} for r in rows]}
    local = in_dir / "report.json"
    if local.is_file():
        full = json.loads(local.read_text(encoding="utf-8"))
        payload["tables"] = {
            mode: [{"round": rnd["round"], "epoch": e["epoch"], "loss": e["loss"],
                    "accuracy": e["accuracy"], "precision": e["precision"], "recall": e["recall"],
                    "f1": e["f1"]} for rnd in rep["rounds"] for e in rnd["epochs"]]
            for mode, rep in sorted(full.items())
        }
    glob = in_dir / "global.json"
    if glob.is_file():
        payload["global"] = json.loads(glob.read_text(encoding="utf-8"))["rows"]
    return json.dumps(payload, indent=1, sort_keys=True) + "\n"


def cmd_report(args):
    text = render_report(Path(args.input), args.format)
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------- #
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgelora", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic Edge-IIoT-like and TON-IoT-like CSVs")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--edge-rows", type=int, default=300)
    s.add_argument("--ton-rows", type=int, default=200)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare-data", help="clean, merge and split CSVs into a dataset bundle")
    s.add_argument("--csv", action="append", required=True)
    s.add_argument("--preset", default="fewshot", choices=["all", "fewshot"])
    s.add_argument("--schedule", default="default")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare_data)

    s = sub.add_parser("pretrain", help="pretrain a backbone on the training texts (no labels)")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("run-local", help="multi-round training with and without LoRA")
    s.add_argument("--config", required=True)
    s.add_argument("--mode", choices=["lora", "full", "both"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_run_local)

    s = sub.add_parser("run-global", help="in-process edge nodes exchanging adapters")
    s.add_argument("--config", required=True)
    s.add_argument("--devices", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_run_global)

    s = sub.add_parser("serve", help="run the networked coordinator")
    s.add_argument("--config", required=True)
    s.add_argument("--addr")
    s.add_argument("--devices", type=int)
    s.add_argument("--out")
    s.add_argument("--exit-when-done", action="store_true",
                   help="shut down once every round closed and every node fetched it")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("edge", help="run one edge node against a coordinator")
    s.add_argument("--config", required=True)
    s.add_argument("--node", type=int, required=True)
    s.add_argument("--devices", type=int)
    s.add_argument("--addr")
    s.add_argument("--retries", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_edge)

    s = sub.add_parser("report", help="re-render stored experiment outputs")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--format", choices=["csv", "json"], default="csv")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except ConnectionFailed as exc:
        code, msg = "connection-error", str(exc)
    except EdgeLoraError as exc:
        code, msg = exc.code, str(exc)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        code, msg = "io-error", str(exc)
    except OSError as exc:
        code, msg = "io-error", str(exc)
    else:
        return 0
    print(f"error: {code}: {' '.join(msg.split())}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
