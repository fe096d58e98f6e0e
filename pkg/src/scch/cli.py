"""Command-line entry point: ``scch <command> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
4 numerical check failure (gradient check, divergence).
"""

from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import plotting
from .config import ConfigError
from .gradcheck import run_all
from .heatmap import decode
from .metrics import evaluate, format_icc, write_report
from .network import (
    HeatmapNet,
    ModelConfig,
    dump_channel_response,
    dump_pattern_weights,
    dump_predicted_heatmaps,
    encode_location_index,
    load_checkpoint,
)
from .scc import write_graph_trace
from .synthetic import Dataset, RosterError, default_roster, generate_dataset, load_dataset, parse_roster, read_pgm, roster_hash
from .tensor import Tensor, no_grad
from .trainer import (
    DivergenceError,
    TrainConfig,
    ablation_deltas,
    parse_grid,
    run_ablation,
    train,
    write_ablation,
    write_deltas,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "run_manifest.txt"

log = logging.getLogger("scch")


class UsageError(Exception):
    pass


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args, started: float, config_lines=(), artifacts=()) -> None:
    config_lines = list(dict.fromkeys(config_lines))  # seed is shared by model and training configs
    lines = [
        f"command={args.command}",
        f"argv={' '.join(sys.argv[1:])}",
        f"config_path={getattr(args, 'config', '') or getattr(args, 'grid', '') or getattr(args, 'spec', '') or ''}",
        f"seed={getattr(args, 'seed', '')}",
    ]
    lines += [f"config.{line}" for line in config_lines]
    lines.append(f"artifacts={','.join(sorted(str(Path(a).relative_to(out)) for a in artifacts))}")
    lines.append(f"duration_seconds={time.perf_counter() - started:.3f}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")


def _model_config_for(dataset, values: dict[str, str]) -> ModelConfig:
    roster = dataset.roster
    derived = {
        "input_size": str(roster.image_size),
        "num_maps": str(roster.num_maps),
        "au_maps": encode_location_index(roster.location_index()),
    }
    for key, val in derived.items():
        if key in values and values[key] != val:
            raise ConfigError(f"{key}={values[key]} disagrees with the dataset ({val})")
    return cfgmod.from_kv(ModelConfig, {**derived, **values})


def _split_config(values: dict[str, str]) -> tuple[dict[str, str], dict[str, str]]:
    """Route keys to ModelConfig / TrainConfig; ``seed`` feeds both; unknown keys fail."""
    model_keys, rest = cfgmod.split_known(ModelConfig, values)
    train_keys, unknown = cfgmod.split_known(TrainConfig, rest)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "seed" in values:
        train_keys["seed"] = values["seed"]
    return model_keys, train_keys


# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    started = time.perf_counter()
    if args.spec:
        roster = parse_roster(Path(args.spec).read_text(), args.spec)
        source = args.spec
    else:
        roster = default_roster()
        source = "default"
    out = _prepare_out(args.out, args.force)
    manifest = generate_dataset(out, args.n_train, args.n_test, roster, args.seed, spec_source=source)
    print(f"wrote {args.n_train} train + {args.n_test} test samples to {out} (spec {manifest['spec_hash']})")
    _write_manifest(out, args, started, [f"spec_hash={roster_hash(roster)}", f"spec_source={source}"], [out / "manifest.txt", out / "annotations.csv", out / "roster.txt"])
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.perf_counter()
    values = cfgmod.read_kv(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = str(args.seed)
    model_keys, train_keys = _split_config(values)
    train_data, test_data = load_dataset(args.data)
    mc = _model_config_for(train_data, model_keys)
    tc = cfgmod.from_kv(TrainConfig, train_keys)
    args.seed = tc.seed
    out = _prepare_out(args.out, args.force)
    model = HeatmapNet(mc)

    def progress(row):
        scored = row["eval_mae_avg"] is not None
        icc = format_icc(row["eval_icc_avg"]) if scored else "-"
        err = f"{row['eval_mae_avg']:.3f}" if scored else "-"
        print(f"epoch {row['epoch']:3d}  loss {row['train_loss']:.5g}  icc {icc}  mae {err}")

    try:
        res = train(model, train_data, tc, eval_data=test_data if len(test_data) else None, out_dir=out, progress=progress)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    plotting.loss_curve(res.curve, out / "loss_curve.png")
    artifacts = [out / "loss_curve.csv", out / "loss_curve.png", out / "model.scch"]
    if len(test_data):
        rows = evaluate(model, test_data)
        artifacts += list(write_report(rows, out / "eval"))
    _write_manifest(out, args, started, cfgmod.to_lines(mc) + cfgmod.to_lines(tc), artifacts)
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.perf_counter()
    model = load_checkpoint(args.checkpoint)
    train_data, test_data = load_dataset(args.data)
    data = {"train": train_data, "test": test_data}.get(args.split)
    if data is None:
        data = Dataset(
            train_data.roster,
            np.concatenate([train_data.images, test_data.images]),
            train_data.annotations + test_data.annotations,
            train_data.ids + test_data.ids,
        )
    if len(data) == 0:
        raise UsageError(f"split {args.split!r} of {args.data} is empty")
    rows = evaluate(model, data)
    for r in rows:
        print(f"AU {r.au_id:>4}  ICC {format_icc(r.icc)}  MAE {r.mae:.3f}  n={r.n}")
    if args.out:
        out = _prepare_out(args.out, args.force)
        artifacts = list(write_report(rows, out / "eval"))
        plotting.au_scores(rows, out / "eval.png")
        artifacts.append(out / "eval.png")
        _write_manifest(out, args, started, cfgmod.to_lines(model.config), artifacts)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    started = time.perf_counter()
    results = run_all(args.scope, args.tol, args.seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:34s} rel_err={r.rel_error:.3e} tol={r.tol:g} ({r.seconds:.2f}s)")
    if args.out:
        out = _prepare_out(args.out, args.force)
        with open(out / "gradcheck.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["op", "rel_error", "tol", "passed", "seconds"])
            for r in results:
                w.writerow([r.name, repr(r.rel_error), r.tol, r.passed, f"{r.seconds:.3f}"])
        _write_manifest(out, args, started, [f"scope={args.scope}", f"tol={args.tol}"], [out / "gradcheck.csv"])
    if failed:
        for r in failed:
            print(f"failing op {r.name}: max relative error {r.rel_error:.3e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_ablate(args) -> int:
    started = time.perf_counter()
    values = cfgmod.read_kv(args.grid)
    cells, rest = parse_grid(values)
    model_keys, train_keys = _split_config(rest)
    train_data, test_data = load_dataset(args.data)
    if len(test_data) == 0:
        raise UsageError("ablation needs a non-empty test split")
    mc = _model_config_for(train_data, model_keys)
    tc = cfgmod.from_kv(TrainConfig, train_keys)
    out = _prepare_out(args.out, args.force)
    results = run_ablation(train_data, test_data, cells, mc, tc)
    write_ablation(results, out / "ablation.csv")
    deltas = ablation_deltas(results)
    write_deltas(deltas, out / "ablation_deltas.csv")
    plotting.ablation(results, out / "ablation.png")
    artifacts = [out / "ablation.csv", out / "ablation_deltas.csv", out / "ablation.png"]
    if plotting.k_sweep(results, out / "k_sweep.png"):
        artifacts.append(out / "k_sweep.png")
    for r in results:
        c = r.cell
        print(
            f"scc={'on ' if c.scc else 'off'} DL={c.deconv_layers} ef={c.edge_variant:10s} k={c.k} seed={c.seed}  "
            f"{r.status:6s} icc={format_icc(r.avg_icc)} mae={'-' if r.avg_mae is None else f'{r.avg_mae:.3f}'}"
        )
    _write_manifest(out, args, started, cfgmod.to_lines(mc) + cfgmod.to_lines(tc), artifacts)
    return EXIT_OK


def _load_input(path, model: HeatmapNet) -> np.ndarray:
    if path is None:
        raise UsageError("--input is required for this dump")
    img = read_pgm(path)
    size = model.config.input_size
    if img.shape != (size, size):
        raise UsageError(f"{path}: image is {img.shape[1]}x{img.shape[0]}, model expects {size}x{size}")
    return img[None]


def cmd_dump(args) -> int:
    started = time.perf_counter()
    model = load_checkpoint(args.checkpoint)
    image = None if args.what == "weights" else _load_input(args.input, model)
    out = _prepare_out(args.out, args.force)
    artifacts = []
    if args.what == "weights":
        rows = dump_pattern_weights(model, out / "pattern_weights.csv")
        plotting.pattern_weights(rows, out / "pattern_weights.png")
        artifacts += [out / "pattern_weights.csv", out / "pattern_weights.png"]
    elif args.what == "heatmaps":
        hs = dump_predicted_heatmaps(model, image, out)
        with open(out / "decoded.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["au_id", "intensity", "locations"])
            for d in decode(hs, calibrate=model.config.calibrate_peaks):
                w.writerow([d.au_id, repr(d.intensity), " ".join(f"{x},{y}" for x, y in d.locations)])
        plotting.map_grid(hs.maps, out / "heatmaps.png", [f"map {i}" for i in range(hs.num_maps)])
        artifacts += sorted(out.iterdir())
    elif args.what == "responses":
        resp = dump_channel_response(model, image, out)
        plotting.map_grid(resp, out / "responses.png", [f"ch {j}" for j in range(len(resp))])
        artifacts += sorted(out.iterdir())
    elif args.what == "graph":
        if not model.config.scc_enabled:
            raise UsageError("model has no SCC layers; nothing to trace")
        with no_grad():
            model(Tensor(image[None]))
        count = write_graph_trace(out / "graph_trace.csv", model.last_graphs)
        print(f"{count} neighbour rows over {len(model.last_graphs)} SCC layers")
        artifacts.append(out / "graph_trace.csv")
    _write_manifest(out, args, started, cfgmod.to_lines(model.config), artifacts)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scch", description="Heatmap regression with semantic correspondence convolution")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic AU dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=2000)
    g.add_argument("--n-test", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--spec", help="roster file (default: built-in 6-AU roster)")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key=value model/training config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint (ICC(3,1), MAE)")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "test", "all"), default="test")
    e.add_argument("--out")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--scope", choices=("ops", "model", "all"), default="ops")
    c.add_argument("--tol", type=float, default=1e-3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train/evaluate a grid of model variants")
    a.add_argument("--data", required=True)
    a.add_argument("--grid", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("dump", help="write heatmaps, pattern weights, responses or graph traces")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--what", choices=("heatmaps", "weights", "responses", "graph"), required=True)
    d.add_argument("--input", help="PGM image (all but weights)")
    d.add_argument("--out", required=True)
    d.add_argument("--force", action="store_true")
    d.set_defaults(func=cmd_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, RosterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, KeyError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
