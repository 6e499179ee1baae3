"""``mstkd`` command line: gen-data, train, eval, check, report.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure,
4 property-check failure.  Configuration resolves as JSON file, then the
``MSTKD_SEED`` environment variable, then explicit flags (flags win).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .autodiff import NumericError
from .autodiff.io import atomic_write, save_checkpoint
from .checks import all_checks, run_checks, summary
from .data import MODALITIES, REGIONS, generate_dataset, modality_combinations, read_dataset, write_dataset
from .metrics import MetricsRow
from .net import Network
from .train import TrainConfig, evaluate, oracle_predictor, train_student, train_teacher

logger = logging.getLogger("mstkd")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    """Bad flags, configuration or missing inputs (exit code 2)."""


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------


def source_revision() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5, check=True,
        ).stdout.strip()
        return f"{__version__}+g{rev}"
    except (OSError, subprocess.SubprocessError):
        return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    revision: str = field(default_factory=source_revision)
    started: str = field(default_factory=_now)
    finished: str = ""
    outputs: List[str] = field(default_factory=list)

    def write(self, directory: Path) -> Path:
        self.finished = _now()
        path = Path(directory) / MANIFEST_NAME
        atomic_write(path, (json.dumps(asdict(self), indent=2, sort_keys=True) + "\n").encode())
        return path


def _write_text(path: Path, text: str, manifest: RunManifest) -> Path:
    atomic_write(path, text.encode())
    manifest.outputs.append(str(path))
    return path


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def env_seed() -> Optional[int]:
    raw = os.environ.get("MSTKD_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"MSTKD_SEED must be an integer, got {raw!r}") from None


def resolve_train_config(args: argparse.Namespace, dims: Optional[Sequence[int]] = None) -> TrainConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
    try:
        cfg = TrainConfig.from_dict(base)
        seed = env_seed()
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        overrides = {k: getattr(args, k) for k in ("lr", "epochs", "seed") if getattr(args, k, None) is not None}
        if getattr(args, "no_augment", False):
            overrides["augment"] = False
        for flag, name in (("no_ms_tkd", "use_ms_tkd"), ("no_gsme", "use_gsme"),
                           ("no_slkd", "use_slkd"), ("no_logit_mse", "use_logit_mse")):
            if getattr(args, flag, False):
                overrides[name] = False
        cfg = replace(cfg, **overrides)
        if getattr(args, "no_distill", False):
            cfg = cfg.without_distillation()
        if dims is not None and tuple(dims) != cfg.net.dims:
            cfg = replace(cfg, net=replace(cfg.net, dims=tuple(dims)))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return cfg


def parse_dims(values: Sequence[int]) -> tuple:
    if len(values) == 1:
        values = list(values) * 3
    if len(values) != 3:
        raise UsageError(f"--dims takes one or three integers, got {len(values)}")
    if any(v <= 0 or v % 8 for v in values):
        raise UsageError(f"--dims {tuple(values)}: every extent must be a positive multiple of 8")
    return tuple(int(v) for v in values)


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


def eval_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["mask_bits", "region", "dice", "hd95"])
    for r in rows:
        if r.mask == "avg":
            continue
        writer.writerow([r.mask, r.region, f"{r.dice:.6f}", "-" if math.isnan(r.hd95) else f"{r.hd95:.6f}"])
    return buf.getvalue()


def read_eval_csv(path: Path) -> List[MetricsRow]:
    with open(path, newline="") as fh:
        return [
            MetricsRow(rec["mask_bits"], rec["region"], float(rec["dice"]),
                       float("nan") if rec["hd95"] == "-" else float(rec["hd95"]))
            for rec in csv.DictReader(fh)
        ]


def _fmt(value: float, digits: int) -> str:
    return "-" if math.isnan(value) else f"{value:.{digits}f}"


def markdown_table(rows: Sequence[MetricsRow], metric: str, digits: int = 2) -> str:
    """Results grid: one column per modality combination plus ``Avg``, with presence marks per modality."""
    combos = modality_combinations()
    lookup = {(r.mask, r.region): getattr(r, metric) for r in rows}
    scale = 100.0 if metric == "dice" else 1.0
    header = ["Modality"] + [str(i + 1) for i in range(len(combos))] + ["Avg"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for mi, name in enumerate(MODALITIES):
        marks = ["•" if m.present[mi] else "◦" for m in combos]
        lines.append("| " + " | ".join([name] + marks + [""]) + " |")
    for region in REGIONS:
        vals = [lookup.get((m.bits, region), float("nan")) * scale for m in combos]
        finite = [v for v in vals if not math.isnan(v)]
        avg = float(np.mean(finite)) if finite else float("nan")
        lines.append("| " + " | ".join([region] + [_fmt(v, digits) for v in vals] + [_fmt(avg, digits)]) + " |")
    return "\n".join(lines) + "\n"


def plot_dice(rows: Sequence[MetricsRow], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    combos = modality_combinations()
    lookup = {(r.mask, r.region): r.dice for r in rows}
    fig, axes = plt.subplots(len(REGIONS), 1, figsize=(9, 6.5), sharex=True)
    for ax, region in zip(axes, REGIONS):
        ax.bar(range(len(combos)), [lookup[(m.bits, region)] for m in combos], color="#4477aa")
        ax.set_ylim(0, 1)
        ax.set_ylabel(f"{region} Dice")
    axes[-1].set_xticks(range(len(combos)))
    axes[-1].set_xticklabels([m.label.replace("+", "\n") for m in combos], fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    dims = parse_dims(args.dims)
    seed = args.seed if args.seed is not None else (env_seed() or 0)
    if args.cases < 2:
        raise UsageError("--cases must be at least 2 so both splits are non-empty")
    out = Path(args.out)
    try:
        ds = generate_dataset(args.cases, dims, seed, args.train_fraction)
        out.mkdir(parents=True, exist_ok=True)
        write_dataset(out, ds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {out}: {exc}") from None
    config = {"cases": args.cases, "dims": list(dims), "train_fraction": args.train_fraction}
    manifest = RunManifest("gen-data", config, seed)
    manifest.outputs = [str(out / "index.jsonl")] + [str(out / f"{c.id}_{k}.bin") for c in ds.cases for k in ("image", "label")]
    manifest.write(out)
    print(f"wrote {len(ds.cases)} cases ({len(ds.train_ids)} train / {len(ds.test_ids)} test) to {out}")
    return EXIT_OK


def _load_dataset(path: str):
    try:
        return read_dataset(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args: argparse.Namespace) -> int:
    if args.dump_config:
        print(json.dumps(resolve_train_config(args).to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if not args.data:
        raise UsageError("train needs --data")
    ds = _load_dataset(args.data)
    cfg = resolve_train_config(args, ds.dims)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(f"train --phase {args.phase}", cfg.to_dict(), cfg.seed)
    _write_text(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", manifest)
    progress = (lambda row: print(f"epoch {row['epoch']:3d}  total {row['total']:.5f}", flush=True)) if args.verbose else None
    if args.phase == "teacher":
        net, log = train_teacher(cfg, ds.train, on_epoch=progress)
        ckpt = out / "teacher.ckpt"
    else:
        if not args.teacher:
            raise UsageError("student training needs --teacher PATH")
        teacher_path = Path(args.teacher)
        if not teacher_path.exists():
            raise UsageError(f"teacher checkpoint not found: {teacher_path}")
        try:
            teacher = Network.load(teacher_path, cfg.net)
        except ValueError as exc:
            raise UsageError(f"teacher checkpoint does not fit the configured network: {exc}") from None
        net, disc, log = train_student(cfg, ds.train, teacher, on_epoch=progress)
        ckpt = out / "student.ckpt"
        save_checkpoint(out / "discriminator.ckpt", disc.params)
        manifest.outputs.append(str(out / "discriminator.ckpt"))
        _write_text(out / "mask_histogram.csv", log.histogram_csv(), manifest)
    net.save(ckpt)
    manifest.outputs.append(str(ckpt))
    _write_text(out / "train_log.csv", log.to_csv(), manifest)
    manifest.write(out)
    print(f"{args.phase}: final total loss {log.totals[-1]:.5f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    ds = _load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.oracle:
        cfg_dict, predictor = {"model": "oracle"}, oracle_predictor
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --oracle")
        ckpt = Path(args.checkpoint)
        if not ckpt.exists():
            raise UsageError(f"checkpoint not found: {ckpt}")
        if args.config is None and (ckpt.parent / "config.json").exists():
            args.config = str(ckpt.parent / "config.json")
        cfg = resolve_train_config(args, ds.dims)
        try:
            predictor = Network.load(ckpt, cfg.net)
        except ValueError as exc:
            raise UsageError(f"checkpoint does not fit the configured network: {exc}") from None
        cfg_dict = {"checkpoint": str(ckpt), "net": cfg.to_dict()["net"]}
    rows = evaluate(predictor, ds.test)
    manifest = RunManifest("eval", cfg_dict, ds.seed)
    _write_text(out / "eval.csv", eval_csv(rows), manifest)
    dice_md = markdown_table(rows, "dice", 2)
    _write_text(out / "dice_table.md", dice_md, manifest)
    _write_text(out / "hd95_table.md", markdown_table(rows, "hd95", 2), manifest)
    if args.plot:
        plot_dice(rows, out / "dice_plot.png")
        manifest.outputs.append(str(out / "dice_plot.png"))
    manifest.write(out)
    print(dice_md, end="")
    return EXIT_OK


def cmd_check(args: argparse.Namespace) -> int:
    known = sorted({c.family for c in all_checks()})
    unknown = set(args.family or ()) - set(known)
    if unknown:
        raise UsageError(f"unknown check family {sorted(unknown)}; choose from {known}")
    results = run_checks(families=args.family or None)
    for r in results:
        print(r.line())
    s = summary(results)
    print(f"{s['checks']} checks in {s['families']} families, {s['failed']} failed")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest("check", {"families": args.family or "all"}, 0)
        _write_text(out / "check_report.txt", "\n".join(r.line() for r in results) + "\n", manifest)
        manifest.write(out)
    return EXIT_OK if s["failed"] == 0 and results else EXIT_CHECK


def _mean_metric(rows: Sequence[MetricsRow], region: str, metric: str) -> float:
    vals = [getattr(r, metric) for r in rows if r.region == region and r.mask != "avg"]
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def cmd_report(args: argparse.Namespace) -> int:
    groups: Dict[str, List[List[MetricsRow]]] = {}
    for spec in args.runs:
        name, sep, path = spec.partition("=")
        if not sep:
            raise UsageError(f"report entries look like NAME=path/to/eval.csv, got {spec!r}")
        p = Path(path)
        if not p.exists():
            raise UsageError(f"eval CSV not found: {p}")
        groups.setdefault(name, []).append(read_eval_csv(p))
    lines = ["| Variant | runs | WT Dice | TC Dice | ET Dice | WT HD95 |", "|---|---|---|---|---|---|"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "runs", "wt_dice", "tc_dice", "et_dice", "wt_hd95"])
    for name, runs in groups.items():
        vals = [float(np.mean([_mean_metric(r, reg, "dice") for r in runs])) for reg in REGIONS]
        hd = float(np.nanmean([_mean_metric(r, "WT", "hd95") for r in runs]))
        lines.append(f"| {name} | {len(runs)} | " + " | ".join(f"{100 * v:.2f}" for v in vals) + f" | {_fmt(hd, 2)} |")
        writer.writerow([name, len(runs)] + [f"{v:.6f}" for v in vals] + [_fmt(hd, 6)])
    table = "\n".join(lines) + "\n"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("report", {"runs": list(args.runs)}, 0)
    _write_text(out / "ablation.md", table, manifest)
    _write_text(out / "ablation.csv", buf.getvalue(), manifest)
    manifest.write(out)
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with a TrainConfig; flags override its values")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mstkd", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--cases", type=int, default=40)
    g.add_argument("--dims", type=int, nargs="+", default=[16])
    g.add_argument("--seed", type=int)
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the teacher or a student")
    t.add_argument("--phase", choices=["teacher", "student"], default="teacher")
    t.add_argument("--data")
    t.add_argument("--teacher", help="teacher checkpoint (student phase)")
    t.add_argument("--out", default="runs/train")
    _add_train_flags(t)
    t.add_argument("--no-ms-tkd", action="store_true", help="drop the attention/token distillation term")
    t.add_argument("--no-gsme", action="store_true", help="drop the global style matching term")
    t.add_argument("--no-slkd", action="store_true", help="drop the standardised-KL part of the logit term")
    t.add_argument("--no-logit-mse", action="store_true", help="drop the MSE part of the logit term")
    t.add_argument("--no-distill", action="store_true", help="Dice only: all distillation terms off")
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--dump-config", action="store_true", help="print the resolved configuration and exit")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on all 15 modality combinations")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
    e.add_argument("--config")
    e.add_argument("--out", default="runs/eval")
    e.add_argument("--plot", action="store_true", help="also write dice_plot.png")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run the property suite")
    c.add_argument("--family", action="append", help="restrict to a check family (repeatable)")
    c.add_argument("--out")
    c.set_defaults(func=cmd_check)

    r = sub.add_parser("report", help="aggregate eval CSVs into an ablation table")
    r.add_argument("runs", nargs="+", metavar="NAME=EVAL_CSV")
    r.add_argument("--out", default="runs/report")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mstkd {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"mstkd {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
