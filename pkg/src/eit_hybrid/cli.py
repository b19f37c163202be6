"""Command-line pipeline: gen -> train-stage1 -> reconstruct -> evaluate -> plot."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

log = logging.getLogger("eit_hybrid")


class CliError(Exception):
    """Reported on stderr with exit code 1."""


def _threads():
    n = os.environ.get("EIT_HYBRID_THREADS")
    if n:
        import torch

        torch.set_num_threads(max(1, int(n)))


def _json_arg(value):
    """Inline JSON or a path to a JSON file."""
    if value is None:
        return {}
    if isinstance(value, dict):
        return value
    p = Path(value)
    if p.exists():
        return json.loads(p.read_text())
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        raise CliError(f"file not found or invalid JSON: {value}")


def _require(path, what="file"):
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def cmd_gen(a):
    from .dataset import DatasetConfig, generate_dataset

    cfg = DatasetConfig(
        n=a.n, seed=a.seed, N=a.N, target_h=a.target_h, noise=a.noise,
        contact_impedance=a.contact_impedance, coverage=a.coverage,
    )
    if a.families:
        cfg.families = _json_arg(a.families)
    try:
        m = generate_dataset(cfg, a.out, subtract_reference=a.subtract_reference)
    except ValueError as exc:
        raise CliError(str(exc))
    print(f"wrote {cfg.n} samples to {a.out} (splits {m['splits']})")


def cmd_train(a):
    from .dataset import load_dataset
    from .stage1 import Stage1Config, save_stage1, train_stage1

    _require(Path(a.data) / "manifest.json", "dataset manifest")
    ds = load_dataset(a.data)
    cfg = Stage1Config(
        epochs=a.epochs, batch=a.batch, lr=a.lr, seed=a.seed,
        patience=a.patience, embedding=a.embedding, grad_weight=a.grad_weight,
    )
    model, report = train_stage1(ds, cfg)
    save_stage1(model, a.out, report)
    print(
        f"best epoch {report.best_epoch}: val {report.val_loss[report.best_epoch]:.3e} "
        f"({len(report.val_loss)} epochs, {report.seconds:.0f}s) -> {a.out}"
    )


def _write_history(history: np.ndarray, path: Path):
    from .pinn import TERMS

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *TERMS, "total"])
        for k, row in enumerate(history):
            w.writerow([k, *(repr(float(v)) for v in row)])


def read_history(path) -> np.ndarray:
    with open(path) as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r[1:]] for r in rows])


def cmd_reconstruct(a):
    from .dataset import load_dataset
    from .pinn import LossWeights, TrainConfig, reconstruct
    from .stage1 import CheckpointMismatch, load_stage1, predict_potential

    _require(Path(a.data) / "manifest.json", "dataset manifest")
    ds = load_dataset(a.data)
    try:
        case = int(a.case)
    except ValueError:
        raise CliError(f"case {a.case!r} not found in {a.data}")
    if not 0 <= case < len(ds):
        raise CliError(f"case {case} not found in {a.data} ({len(ds)} samples)")
    sample = ds.sample(case)
    if a.oracle_u:
        U, source = sample.u_grid, "oracle"
    else:
        if not a.ckpt:
            raise CliError("--ckpt is required unless --oracle-u is given")
        _require(a.ckpt, "checkpoint")
        try:
            model = load_stage1(a.ckpt, ds)
        except (CheckpointMismatch, FileNotFoundError) as exc:
            raise CliError(str(exc))
        U, source = predict_potential(model, sample.dv), "stage1"
    try:
        weights = LossWeights.from_dict(_json_arg(a.weights))
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad loss weights: {exc}")
    cfg = TrainConfig(steps=a.steps, lr=a.lr, seed=a.seed, output=a.output)
    rec = reconstruct(U, ds.grid, weights, cfg)

    out = Path(a.out) / f"case_{case}"
    out.mkdir(parents=True, exist_ok=True)
    rec.sigma.astype("<f4").tofile(out / "sigma.bin")
    np.asarray(U).astype("<f4").tofile(out / "u_input.bin")
    _write_history(rec.history, out / "loss_history.csv")
    echo = {
        "case": case,
        "family": ds.family(case),
        "data": str(Path(a.data).resolve()),
        "ckpt": None if a.oracle_u else str(Path(a.ckpt).resolve()),
        "potential_source": source,
        "N": ds.grid.N,
        "weights": weights.to_dict(),
        "train": asdict(cfg),
        "runtime_seconds": rec.seconds,
        "final_loss": rec.final(),
    }
    (out / "config.json").write_text(json.dumps(echo, indent=1))
    print(f"case {case}: final loss {rec.history[-1, -1]:.4e} in {rec.seconds:.0f}s -> {out}")


def _case_dirs(results: Path):
    dirs = sorted(
        (p for p in results.glob("case_*") if (p / "config.json").exists()),
        key=lambda p: int(p.name.split("_", 1)[1]),
    )
    if not dirs:
        raise CliError(f"no reconstructions found in {results}")
    return dirs


def _load_sigma(path: Path, N: int) -> np.ndarray:
    return np.fromfile(_require(path), dtype="<f4").astype(float).reshape(N, N)


def cmd_evaluate(a):
    from .dataset import load_dataset
    from .metrics import compute_metrics

    _require(Path(a.data) / "manifest.json", "dataset manifest")
    ds = load_dataset(a.data)
    results = _require(a.results, "results directory")
    report = {"data": ds.manifest["config"], "cases": {}}
    for d in _case_dirs(results):
        echo = json.loads((d / "config.json").read_text())
        k = int(echo["case"])
        if not 0 <= k < len(ds):
            raise CliError(f"case {k} from {d} not found in {a.data}")
        s = ds.sample(k)
        rec = _load_sigma(d / "sigma.bin", ds.grid.N)
        m = compute_metrics(rec, s.sigma_grid, ds.grid, s.phantom, echo.get("runtime_seconds"))
        report["cases"][str(k)] = {
            "family": ds.family(k),
            "potential_source": echo.get("potential_source"),
            **m.to_dict(),
        }
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1, sort_keys=True))
    print(f"evaluated {len(report['cases'])} case(s) -> {out}")


def cmd_plot(a):
    from .dataset import load_dataset
    from .report import render_report, render_train_curves

    results = _require(a.results, "results directory")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    seen_ckpt = set()
    for d in _case_dirs(results):
        echo = json.loads((d / "config.json").read_text())
        data = a.data or echo["data"]
        _require(Path(data) / "manifest.json", "dataset manifest")
        ds = load_dataset(data)
        k = int(echo["case"])
        rec = _load_sigma(d / "sigma.bin", ds.grid.N)
        hist = read_history(_require(d / "loss_history.csv"))
        render_report(ds.sample(k).sigma_grid, rec, ds.grid, hist, out, str(k))
        ck = echo.get("ckpt")
        if ck and ck not in seen_ckpt and Path(ck + ".json").exists():
            seen_ckpt.add(ck)
            side = json.loads(Path(ck + ".json").read_text())
            if "report" in side:
                r = side["report"]
                render_train_curves(r["train_loss"], r["val_loss"], out / "stage1_loss.png")
    print(f"figures -> {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eit-hybrid", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON file of option defaults; flags override")
        sp.set_defaults(func=fn)
        return sp

    g = add("gen", cmd_gen, "simulate a dataset")
    g.add_argument("--n", type=int, default=300)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--N", type=int, default=64)
    g.add_argument("--target-h", type=float, default=0.03)
    g.add_argument("--coverage", type=float, default=0.5)
    g.add_argument("--contact-impedance", type=float, default=0.01)
    g.add_argument("--families", help='JSON weights, e.g. \'{"one_circle": 1}\'')
    g.add_argument("--subtract-reference", action="store_true")

    t = add("train-stage1", cmd_train, "train the voltage-to-potential network")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--patience", type=int, default=30)
    t.add_argument("--embedding", choices=["resize", "dense"], default="resize")
    t.add_argument("--grad-weight", type=float, default=0.0, help="weight of the derivative-matching term")

    r = add("reconstruct", cmd_reconstruct, "recover sigma for one case")
    r.add_argument("--data", required=True)
    r.add_argument("--ckpt")
    r.add_argument("--case", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--weights", help="loss weights as JSON or a JSON file")
    r.add_argument("--oracle-u", action="store_true", help="use the stored ground-truth potential")
    r.add_argument("--steps", type=int, default=20000)
    r.add_argument("--lr", type=float, default=1e-3)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--output", choices=["linear", "softplus"], default="linear")

    e = add("evaluate", cmd_evaluate, "metrics for all reconstructions")
    e.add_argument("--data", required=True)
    e.add_argument("--results", required=True)
    e.add_argument("--out", required=True)

    f = add("plot", cmd_plot, "panel figures and loss curves")
    f.add_argument("--results", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--data")
    return p


def _apply_config(parser: argparse.ArgumentParser, argv):
    """Load ``--config`` JSON into the chosen subcommand's defaults, then parse."""
    argv = list(sys.argv[1:] if argv is None else argv)
    conf_path = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            conf_path = argv[i + 1]
        elif tok.startswith("--config="):
            conf_path = tok.split("=", 1)[1]
    command = next((t for t in argv if t in _subparsers(parser)), None)
    if conf_path and command:
        path = Path(conf_path)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        conf = {k.replace("-", "_"): v for k, v in json.loads(path.read_text()).items()}
        sub = _subparsers(parser)[command]
        known = {a.dest for a in sub._actions}
        unknown = set(conf) - known
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        sub.set_defaults(**conf)
        for act in sub._actions:
            if act.dest in conf:
                act.required = False
    return parser.parse_args(argv)


def _subparsers(parser):
    for act in parser._actions:
        if isinstance(act, argparse._SubParsersAction):
            return act.choices
    return {}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    _threads()
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
