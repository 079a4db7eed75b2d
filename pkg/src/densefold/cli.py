"""Command-line interface: preprocess, train, eval, predict, plot.

Exit codes: 0 success, 1 usage or configuration problems, 2 data or file
format problems, 3 numeric failure (non-finite values) during training.

Configuration is key=value lines ('#' starts a comment); unknown keys are
rejected so typos fail loudly instead of silently training with defaults.
`--set key=value` applies the same keys on top of any config file, and
`--print-config` shows the effective configuration without running.
"""

from __future__ import annotations

import argparse
import os
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields

import numpy as np

from . import data as dta
from . import train as trn
from .errors import (
    ConfigError,
    DensefoldError,
    DimensionError,
    FormatError,
    InputError,
    NumericError,
)
from .eval import (
    confusion_csv,
    confusion_matrix,
    format_comparison,
    format_report,
    misclassified,
    misclassified_csv,
    overall_accuracy,
    summary_kv,
)
from .model import NetworkSpec, forward
from .nn import softmax
from .optim import TrainHyper

RUN_DEFAULTS = {"seed": 1, "fold_count": 10, "checkpoint_every": 10, "augment": True}


# ---------------------------------------------------------------------------
# configuration handling


def default_config() -> dict:
    """Flat effective-config dict: network fields, hyperparameters, run keys.

    init_channels / bottleneck_width stay None ("auto") so they keep tracking
    growth_k unless the user pins them explicitly.
    """
    cfg = {f.name: f.default for f in fields(NetworkSpec)}
    cfg.update({f.name: f.default for f in fields(TrainHyper)})
    cfg.update(RUN_DEFAULTS)
    return cfg


def parse_config_text(text: str, path: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"{path} line {lineno}: expected key=value, got {raw!r}")
        values[key.strip()] = val.strip()
    return values


def coerce_config(cfg: dict, overrides: dict[str, str], source: str) -> dict:
    """Apply string overrides onto typed defaults; unknown keys are errors."""
    out = dict(cfg)
    for key, text in overrides.items():
        if key not in out:
            raise ConfigError(f"{source}: unknown configuration key {key!r}")
        current = out[key]
        try:
            if current is None:  # optional int fields (init_channels, bottleneck_width)
                value = None if text.lower() in ("none", "auto") else int(text)
            elif isinstance(current, bool):
                if text.lower() in ("1", "true", "yes", "on"):
                    value = True
                elif text.lower() in ("0", "false", "no", "off"):
                    value = False
                else:
                    raise ValueError(f"not a boolean: {text!r}")
            elif isinstance(current, int):
                value = int(text)
            elif isinstance(current, float):
                value = float(text)
            else:
                value = text
        except ValueError as err:
            raise ConfigError(f"{source}: bad value for {key!r}: {err}") from None
        out[key] = value
    return out


def load_effective_config(config_path: str | None, sets: list[str]) -> dict:
    cfg = default_config()
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            cfg = coerce_config(cfg, parse_config_text(fh.read(), config_path), config_path)
    if sets:
        cfg = coerce_config(cfg, parse_config_text("\n".join(sets), "--set"), "--set")
    return cfg


def split_config(cfg: dict) -> tuple[NetworkSpec, TrainHyper, dict]:
    spec = NetworkSpec(**{f.name: cfg[f.name] for f in fields(NetworkSpec)})
    hyper = TrainHyper(**{f.name: cfg[f.name] for f in fields(TrainHyper)})
    run = {key: cfg[key] for key in RUN_DEFAULTS}
    return spec, hyper, run


def print_config(cfg: dict, stream=None) -> None:
    stream = stream or sys.stdout
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif value is None:
            value = "auto"
        stream.write(f"{key}={value}\n")


# ---------------------------------------------------------------------------
# subcommands


def worker_count(requested: int | None) -> int:
    workers = requested or min(8, os.cpu_count() or 1)
    cap = os.environ.get("DENSEFOLD_THREADS")
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"DENSEFOLD_THREADS must be an integer, got {cap!r}") from None
    return max(1, workers)


def cmd_preprocess(args) -> int:
    entries = dta.read_manifest_csv(args.manifest)
    base = args.input or os.path.dirname(os.path.abspath(args.manifest))

    def load_one(entry):
        rel, label = entry
        try:
            with open(os.path.join(base, rel), "rb") as fh:
                img = dta.decode_image(fh.read())
            return dta.quantize_u8(dta.preprocess_image(img)), label, None
        except (FormatError, InputError, OSError) as err:
            return None, label, f"{rel}: {err}"

    with ThreadPoolExecutor(max_workers=worker_count(args.threads)) as pool:
        results = list(pool.map(load_one, entries))
    skipped = [msg for _, _, msg in results if msg is not None]
    results = [(img, label) for img, label, msg in results if msg is None]
    if not results:
        raise InputError(f"manifest {args.manifest} lists no decodable samples")
    images = np.stack([img for img, _ in results])
    labels = np.array([label for _, label in results], dtype=np.int64)

    if args.stats_from:
        side = dta.read_sidecar(args.stats_from)
        mean, std = side["norm_mean"], side["norm_std"]
    else:
        mean, std = dta.compute_norm_stats(images)
    blob = dta.pack_dataset_bytes(images, labels)
    with open(args.out, "wb") as fh:
        fh.write(blob)
    manifest = dta.DatasetManifest(
        entries, args.split, mean, std, args.fold_seed, packed_crc32=zlib.crc32(blob)
    )
    dta.write_sidecar(dta.sidecar_path(args.out), manifest)
    counts = dta.class_counts(labels)
    print(f"wrote {len(labels)} samples to {args.out} (class counts: {counts})")
    if skipped:
        for msg in skipped:
            print(f"skipped {msg}", file=sys.stderr)
        print(f"error: skipped {len(skipped)} undecodable file(s)", file=sys.stderr)
        return 2
    return 0


def cmd_train(args) -> int:
    cfg = load_effective_config(args.config, args.set or [])
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
    if args.no_augment:
        cfg["augment"] = False
    if args.print_config:
        print_config(cfg)
        return 0
    spec, hyper, run = split_config(cfg)
    dataset = dta.load_dataset(args.data)
    augment_cfg = dta.AugmentConfig(enabled=run["augment"])
    metrics = trn.fit(
        spec, hyper, dataset, args.out,
        root_seed=run["seed"],
        fold_count=run["fold_count"],
        augment_cfg=augment_cfg,
        checkpoint_every=run["checkpoint_every"],
        log=lambda line: print(line, file=sys.stderr, flush=True),
    )
    best = max(m.val_acc for m in metrics)
    print(f"finished {len(metrics)} epochs; best fold-validation accuracy {best * 100:.2f}%")
    return 0


def _dataset_from_checkpoint(packed_path, meta) -> dta.ArrayDataset:
    images, labels = dta.read_packed(packed_path)
    mean, std = trn.norm_stats_from_meta(meta)
    return dta.ArrayDataset(images, labels, mean, std, int(meta.get("fold_seed", 1)))


def cmd_eval(args) -> int:
    params, _, meta = trn.load_checkpoint(args.checkpoint)
    spec = trn.spec_from_meta(meta)
    dataset = _dataset_from_checkpoint(args.data, meta)
    _, preds = trn.evaluate_split(spec, params, dataset, np.arange(len(dataset)), args.batch_size)
    conf = confusion_matrix(dataset.labels, preds, spec.num_classes)
    report = format_report(conf, title=os.path.basename(str(args.data)))
    if args.comparison:
        report += "\n" + format_comparison(float(overall_accuracy(conf)) * 100)
    print(report, end="")
    if args.report:
        os.makedirs(args.report, exist_ok=True)
        outputs = {
            "confusion.csv": confusion_csv(conf),
            "summary.txt": summary_kv(conf),
            "misclassified.csv": misclassified_csv(misclassified(dataset.labels, preds)),
        }
        for name, text in outputs.items():
            with open(os.path.join(args.report, name), "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
    return 0


def cmd_predict(args) -> int:
    params, _, meta = trn.load_checkpoint(args.checkpoint)
    spec = trn.spec_from_meta(meta)
    mean, std = trn.norm_stats_from_meta(meta)
    tensors = []
    good_paths = []
    failures = 0
    for path in args.images:
        try:
            with open(path, "rb") as fh:
                img = dta.decode_image(fh.read())
            tensors.append(dta.preprocess(img, mean, std))
            good_paths.append(path)
        except (FormatError, InputError, OSError) as err:
            print(f"error: {path}: {err}", file=sys.stderr)
            failures += 1
    if tensors:
        x = np.stack(tensors).astype(np.float32)
        logits, _ = forward(spec, params, x, mode="infer")
        probs = softmax(logits)
        for path, row in zip(good_paths, probs):
            pred = int(np.argmax(row))
            vector = " ".join(f"{p:.8f}" for p in row)
            print(f"{path}\t{pred}\t{vector}")
    return 2 if failures else 0


SVG_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def render_line_svg(xs, series: dict[str, list[float]], title: str,
                    width: int = 720, height: int = 440) -> str:
    """Minimal line chart: axes, ticks, one polyline per series, a legend."""
    if not series or not xs:
        raise InputError("nothing to plot")
    left, right, top, bottom = 60, 20, 36, 40
    plot_w, plot_h = width - left - right, height - top - bottom
    ys_all = [v for vals in series.values() for v in vals]
    y_min, y_max = min(ys_all), max(ys_all)
    if y_max == y_min:
        y_max = y_min + 1.0
    pad = 0.05 * (y_max - y_min)
    y_min, y_max = y_min - pad, y_max + pad
    x_min, x_max = min(xs), max(xs)
    if x_max == x_min:
        x_max = x_min + 1

    def sx(x):
        return left + (x - x_min) / (x_max - x_min) * plot_w

    def sy(y):
        return top + (1 - (y - y_min) / (y_max - y_min)) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
    ]
    for i in range(5):
        y = y_min + (y_max - y_min) * i / 4
        x = x_min + (x_max - x_min) * i / 4
        parts.append(
            f'<text x="{left - 6}" y="{sy(y) + 4:.1f}" text-anchor="end">{y:.4g}</text>'
        )
        parts.append(
            f'<text x="{sx(x):.1f}" y="{top + plot_h + 16}" text-anchor="middle">{x:.4g}</text>'
        )
        parts.append(
            f'<line x1="{left}" y1="{sy(y):.1f}" x2="{left + plot_w}" y2="{sy(y):.1f}" '
            f'stroke="#dddddd"/>'
        )
    for i, (name, vals) in enumerate(series.items()):
        color = SVG_COLORS[i % len(SVG_COLORS)]
        points = " ".join(f"{sx(x):.1f},{sy(v):.1f}" for x, v in zip(xs, vals))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>')
        parts.append(
            f'<text x="{left + plot_w - 8}" y="{top + 14 + 16 * i}" text-anchor="end" '
            f'fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> int:
    with open(args.metrics, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != trn.CSV_HEADER:
        raise FormatError(f"{args.metrics}: expected header {trn.CSV_HEADER!r}")
    columns = trn.CSV_HEADER.split(",")
    wanted = args.series.split(",")
    for name in wanted:
        if name not in columns[1:]:
            raise ConfigError(f"unknown metrics column {name!r} (have {columns[1:]})")
    rows = [line.split(",") for line in lines[1:] if line]
    if not rows:
        raise InputError(f"{args.metrics} holds no epochs")
    xs = [int(r[0]) for r in rows]
    series = {name: [float(r[columns.index(name)]) for r in rows] for name in wanted}
    print("epoch," + ",".join(wanted))
    for i, x in enumerate(xs):
        print(f"{x}," + ",".join(f"{series[name][i]:g}" for name in wanted))
    svg = render_line_svg(xs, series, title=os.path.basename(str(args.metrics)))
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg)
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="densefold",
        description="Dense CNN training stack for 10-class handwritten numerals.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("preprocess", help="decode, normalize, and pack a split", formatter_class=fmt)
    p.add_argument("--manifest", required=True, help="CSV of path,label rows")
    p.add_argument("--input", help="base directory for image paths (default: manifest dir)")
    p.add_argument("--out", required=True, help="output packed dataset path")
    p.add_argument("--split", default="train", choices=("train", "test"))
    p.add_argument("--stats-from", help="sidecar to copy normalization stats from (use the train split's for test data)")
    p.add_argument("--fold-seed", type=int, default=1, help="seed of the cross-validation partition")
    p.add_argument("--threads", type=int, help="worker threads (env DENSEFOLD_THREADS caps)")
    p.set_defaults(run=cmd_preprocess)

    p = sub.add_parser("train", help="train on a packed split", formatter_class=fmt)
    p.add_argument("--data", required=True, help="packed train split")
    p.add_argument("--out", required=True, help="run directory for metrics/checkpoints")
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="root seed (default 1; shorthand for --set seed=N)")
    p.add_argument("--epochs", type=int, help="shorthand for --set epochs=N (default 150)")
    p.add_argument("--no-augment", action="store_true", help="disable augmentation")
    p.add_argument("--print-config", action="store_true", help="show effective config and exit")
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a packed split", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="packed split with labels")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--report", help="directory for confusion.csv / summary.txt / misclassified.csv")
    p.add_argument("--comparison", action="store_true", help="append the static comparison table")
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("predict", help="classify image files with a checkpoint", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+", help="P5/P6 image files")
    p.set_defaults(run=cmd_predict)

    p = sub.add_parser("plot", help="render metrics.csv to an SVG line chart", formatter_class=fmt)
    p.add_argument("--metrics", required=True, help="metrics.csv from a training run")
    p.add_argument("--out", required=True, help="output SVG path")
    p.add_argument("--series", default="train_acc,val_acc", help="comma-separated metric columns")
    p.set_defaults(run=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_request:  # argparse exits 2 on usage errors
        return 0 if exit_request.code in (0, None) else 1
    try:
        return args.run(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (InputError, FormatError, DimensionError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except DensefoldError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
