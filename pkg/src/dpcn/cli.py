"""``dpcn`` command line: train, eval, gradcheck, cam, report."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys

import numpy as np

from .errors import ConfigError, DataError, NumericError

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _overrides(extra: list[str]) -> dict[str, str]:
    """``--key value`` / ``--key=value`` pairs left over after the fixed options."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"{tok} needs a value")
            key, value = tok[2:], extra[i + 1]
            i += 2
        out[key] = value
    return out


def _config(args, extra):
    from .config import load_config
    return load_config(args.config, _overrides(extra))


# ---- subcommands ------------------------------------------------------------------

def cmd_train(args, extra) -> int:
    from .experiment import run, save_run

    cfg = _config(args, extra)
    if args.out:
        cfg.output_dir = args.out
    result = run(cfg)
    out = save_run(cfg, result)
    print(format_table(result.rows()))
    if result.divergence is not None:
        d = result.divergence
        print(f"discriminator separation {d.separation_accuracy:.4f}, score JSD {d.score_jsd:.4f}")
    print(f"outputs written to {out}")
    return 0


def _load_model(cfg, path):
    from .experiment import build_model
    from .persist import load_checkpoint

    model = build_model(cfg)
    state = load_checkpoint(path)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise DataError(f"checkpoint does not fit the configured model: {exc}") from None
    return model


def cmd_eval(args, extra) -> int:
    from .experiment import build_data
    from .training import evaluate

    cfg = _config(args, extra)
    model = _load_model(cfg, args.checkpoint)
    train, test = build_data(cfg)
    data = test if args.split == "test" else train
    ev = evaluate(model, data)
    print(f"{args.split} split, {len(data)} images")
    for name, acc in ev.items():
        label = "separation" if name == "separation" else f"{name} accuracy"
        print(f"  {label:22s} {acc:.4f}")
    return 0


def cmd_gradcheck(args, extra) -> int:
    from .model import PRESETS
    from .oracles import TOLERANCE, run_suite

    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    presets = args.preset or list(PRESETS)
    for p in presets:
        if p not in PRESETS:
            raise ConfigError(f"unknown preset {p!r}")

    def show(r):
        print(f"{'ok ' if r.ok else 'BAD'} {r.name:40s} {r.error:.3e}  ({r.seconds:.1f}s)", flush=True)

    results = run_suite(presets, coords=args.coords, seed=args.seed,
                        composite_coords=min(args.coords, args.composite_coords), report=show)
    worst = max(r.error for r in results)
    print(f"max relative error {worst:.3e} over {len(results)} checks (tolerance {TOLERANCE:g})")
    if not worst < TOLERANCE:
        raise NumericError(f"gradient check failed: {worst:.3e} >= {TOLERANCE:g}")
    return 0


def cmd_cam(args, extra) -> int:
    from .analysis import grad_cam, heatmap_overlap
    from .experiment import build_data
    from .persist import write_pgm, write_ppm_overlay

    cfg = _config(args, extra)
    model = _load_model(cfg, args.checkpoint)
    train, test = build_data(cfg)
    data = test if args.split == "test" else train
    if not 0 <= args.index < len(data):
        raise DataError(f"image index {args.index} outside [0, {len(data)})")
    x = data.images[args.index]
    cls = int(data.labels[args.index]) if args.cls is None else args.cls
    if not 0 <= cls < data.classes:
        raise ConfigError(f"class {cls} outside [0, {data.classes})")
    out = args.out or os.path.join(cfg.output_dir, "cam")
    os.makedirs(out, exist_ok=True)
    maps = []
    for i, sub in enumerate(model.subnets):
        h = grad_cam(sub, x, cls, source_tag=f"subnet{i + 1}")
        maps.append(h)
        stem = os.path.join(out, f"img{args.index}_class{cls}_{h.source_tag}")
        write_pgm(stem + ".pgm", h.upsampled)
        write_ppm_overlay(stem + ".ppm", x, h.upsampled)
        note = " (all-zero map)" if h.empty else ""
        peak = tuple(int(v) for v in np.unravel_index(h.values.argmax(), h.values.shape))
        print(f"{h.source_tag}: peak at {peak}{note}")
    for a in range(len(maps)):
        for b in range(a + 1, len(maps)):
            print(f"overlap {maps[a].source_tag} vs {maps[b].source_tag}: "
                  f"{heatmap_overlap(maps[a], maps[b]):.4f}")
    print(f"heatmaps written to {out}")
    return 0


def format_table(rows) -> str:
    lines = [f"{'classifier':14s} {'params':>10s} {'train acc':>10s} {'test acc':>10s}"]
    for name, tr, te, params in rows:
        p = "-" if params is None else str(params)
        lines.append(f"{name:14s} {p:>10s} {tr * 100:9.2f}% {te * 100:9.2f}%")
    return "\n".join(lines)


def _read_results(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [(r["name"], float(r["train_acc"]), float(r["test_acc"]), int(r["params"]))
                for r in csv.DictReader(fh)]


def summarize(metrics_path, results_path=None) -> str:
    """Text comparison of the extra classifier against subnets and baselines."""
    from .persist import read_metrics_csv

    records = read_metrics_csv(metrics_path)
    if not records:
        return "no epochs recorded"
    last = records[-1]
    if results_path and os.path.exists(results_path):
        rows = _read_results(results_path)
    else:
        rows = []
        for name in ("subnet1", "subnet2", "subnet3", "extra"):
            tr, te = last.get(f"train_acc_{name}"), last.get(f"test_acc_{name}")
            if isinstance(te, float) and not math.isnan(te):
                rows.append((name, tr, te, None))
    steps = {}
    for r in records:
        steps[r["step"]] = steps.get(r["step"], 0) + 1
    lines = [f"{len(records)} epochs (" + ", ".join(f"step {s}: {n}" for s, n in sorted(steps.items())) + ")",
             format_table(rows)]
    test = {name: te for name, _, te, _ in rows}
    subs = [v for k, v in test.items() if k.startswith("subnet")]
    if "extra" in test and subs:
        lines.append(f"extra - best subnet: {(test['extra'] - max(subs)) * 100:+.2f} pp")
    for b in ("single", "ensemble2", "doubleWidth"):
        if "extra" in test and b in test:
            lines.append(f"extra - {b}: {(test['extra'] - test[b]) * 100:+.2f} pp")
    sep = last.get("sep_acc")
    if isinstance(sep, float) and not math.isnan(sep):
        lines.append(f"final discriminator separation (train): {sep:.4f}")
    return "\n".join(lines)


def cmd_report(args, extra) -> int:
    if extra:
        raise ConfigError(f"unexpected arguments {extra}")
    results = args.results or os.path.join(os.path.dirname(args.metrics), "results.csv")
    print(summarize(args.metrics, results))
    return 0


# ---- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dpcn", allow_abbrev=False, description="Discriminator-driven parallel CNN experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", allow_abbrev=False, help="three-step training plus requested baselines")
    t.add_argument("--config")
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", allow_abbrev=False, help="accuracy of every classifier from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", allow_abbrev=False, help="finite-difference oracle suite")
    g.add_argument("--preset", action="append")
    g.add_argument("--coords", type=int, default=64, help="sampled coordinates per parameter")
    g.add_argument("--composite-coords", type=int, default=16,
                   help="coordinates per parameter for whole-model objectives")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gradcheck)

    c = sub.add_parser("cam", allow_abbrev=False, help="Grad-CAM heatmaps per subnet and their overlap")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--config")
    c.add_argument("--index", type=int, default=0)
    c.add_argument("--class", dest="cls", type=int)
    c.add_argument("--split", choices=("train", "test"), default="test")
    c.add_argument("--out")
    c.set_defaults(fn=cmd_cam)

    r = sub.add_parser("report", allow_abbrev=False, help="summary table from a run's metrics CSV")
    r.add_argument("metrics")
    r.add_argument("--results")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args, extra = build_parser().parse_known_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.fn(args, extra)
    except ConfigError as exc:
        print(f"dpcn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"dpcn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"dpcn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"dpcn: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
