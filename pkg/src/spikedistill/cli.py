"""Command-line entry point.

    spikedistill <verb> [--config FILE] [--out DIR] [key=value ...]

Verbs: gen-data, train-teacher, distill, eval, stm, ablate-pairs, noisy-suite,
grad-check, summary. Overrides address config fields as ``T=3`` or
``optim.lr=0.1``. Exit status: 0 success, 1 invalid input (bad verb, key or
value), 2 runtime failure. Run directories default to ``$SPIKEDISTILL_OUT``
(or ``./runs``) joined with a name derived from the verb, mode and seed.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import trainer
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .data import DatasetFormatError, save_dataset, write_idx
from .gradcheck import run_suite
from .metrics import format_record, read_records, select, stm_epoch_report
from .tensor_io import TensorFormatError

OUT_ENV = "SPIKEDISTILL_OUT"
SUMMARY_COLUMNS = ("run", "mode", "T", "seed", "test_acc", "stm_ln")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spikedistill", description="ANN-to-SNN distillation experiments")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def verb(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="config file (INI sections, see README)")
        sp.add_argument("--out", help="run directory (default: derived under $%s)" % OUT_ENV)
        sp.add_argument("overrides", nargs="*", help="key=value config overrides")
        return sp

    g = verb("gen-data", "write the synthetic train/test splits to files")
    g.add_argument("--format", choices=("raw-tensor", "idx"), default="raw-tensor")
    verb("train-teacher", "train the ANN teacher and save teacher.ckpt")
    d = verb("distill", "distill a spiking student in the configured mode")
    d.add_argument("--teacher", help="teacher checkpoint (overrides teacher.checkpoint)")
    e = verb("eval", "evaluate a saved network")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--steps", type=int, help="override the number of time steps at evaluation")
    s = verb("stm", "recompute the headline STM score from a run's metrics stream")
    s.add_argument("--run", required=True, help="run directory holding metrics.log")
    a = verb("ablate-pairs", "fixed-pair feature distillation for every layer pair")
    a.add_argument("--teacher")
    n = verb("noisy-suite", "distillation under label noise")
    n.add_argument("--fractions", default="0,0.1,0.2,0.3")
    n.add_argument("--modes", default="baseline,kd,sastc")
    n.add_argument("--teacher")
    gc = verb("grad-check", "finite-difference verification of every differentiable op")
    gc.add_argument("--trials", type=int, default=100)
    sm = verb("summary", "tabulate summary records of finished runs")
    sm.add_argument("runs", nargs="*", help="run directories")
    sm.add_argument("--record", help="also write the rows as metrics-format records to this file")
    return p


def _split_overrides(args) -> tuple[list[str], list[str]]:
    items = list(getattr(args, "overrides", []) or [])
    return [i for i in items if "=" in i], [i for i in items if "=" not in i]


def load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    cfg = load_config(path) if path else RunConfig()
    return apply_overrides(cfg, overrides).validate()


def _run_dir(args, cfg: RunConfig, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    return Path(os.environ.get(OUT_ENV, "runs")) / default_name


def emit_summary_table(run_dirs, record_path: str | Path | None = None) -> tuple[str, list[dict]]:
    """Aligned text table (one row per run, absent summaries flagged) and the row records."""
    rows = []
    for d in run_dirs:
        d = Path(d)
        path = d / "summary.log"
        recs = select(read_records(path), kind="summary") if path.exists() else []
        if not recs:
            rows.append({"run": d.name, "mode": "absent", "T": "-", "seed": "-", "test_acc": "-", "stm_ln": "-"})
            continue
        r = recs[-1]
        rows.append({"run": d.name, "mode": r["mode"], "T": r["T"], "seed": r["seed"],
                     "test_acc": r["test_acc"], "stm_ln": r["stm_ln"]})

    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [[cell(r[c]) for c in SUMMARY_COLUMNS] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(SUMMARY_COLUMNS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(SUMMARY_COLUMNS, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    if record_path:
        Path(record_path).write_text("".join(format_record({"kind": "table", **r}) + "\n" for r in rows))
    return "\n".join(lines), rows


def _format_rows(rows: list[dict]) -> str:
    return "\n".join(format_record(r) for r in rows)


def _teacher(cfg: RunConfig, path: str | None, train, test, run_dir: Path):
    if path:
        cfg.teacher.checkpoint = path
    return trainer.obtain_teacher(cfg, train, test, run_dir)


def dispatch(args) -> int:
    overrides, stray = _split_overrides(args)
    if args.verb == "summary":
        table, _ = emit_summary_table(list(args.runs) + stray, args.record)
        print(table)
        return 0
    if stray:
        raise UsageError(f"unexpected arguments {stray}; overrides must look like key=value")
    cfg = load_run_config(args.config, overrides)
    seed_tag = f"s{cfg.seeds.init}"

    if args.verb == "grad-check":
        reports = run_suite(trials=args.trials)
        for r in reports:
            print(r.line())
        return 0 if all(r.passed for r in reports) else 2

    if args.verb == "gen-data":
        out = _run_dir(args, cfg, "data")
        out.mkdir(parents=True, exist_ok=True)
        train, test = trainer.make_datasets(cfg)
        ext = "stns" if args.format == "raw-tensor" else "idx"
        for ds in (train, test):
            images, labels = out / f"{ds.split}-images.{ext}", out / f"{ds.split}-labels.{ext}"
            if args.format == "raw-tensor":
                save_dataset(ds, images, labels)
            else:
                write_idx(images, (ds.images * 255.0).round().astype("uint8"))
                write_idx(labels, ds.labels.astype("uint8"))
            print(f"{ds.split}: {len(ds)} instances -> {images}, {labels}")
        return 0

    if args.verb == "eval":
        net = trainer.load_network(args.checkpoint, args.steps)
        train, test = trainer.make_datasets(cfg)
        ds = train if args.split == "train" else test
        res = trainer.evaluate(net, ds, args.steps, cfg.eval_batch)
        record = {"kind": "eval", "split": args.split, "acc": res.accuracy, "n": res.n}
        record.update({f"rate.{k}": v for k, v in res.spike_rates.items()})
        print(format_record(record))
        return 0

    if args.verb == "stm":
        records = read_records(Path(args.run) / "metrics.log")
        history = [r["stm_raw"] for r in select(records, kind="epoch")]
        report = stm_epoch_report(history, cfg.stm_window)
        print(format_record({"kind": "stm", "window": report.window, "epochs": len(history),
                             "stm_ln": report.headline, "partial": report.partial_window}))
        return 0

    train, test = trainer.make_datasets(cfg)
    if args.verb == "train-teacher":
        run_dir = _run_dir(args, cfg, f"teacher-{seed_tag}")
        run = trainer.train_teacher(cfg, train, test, run_dir)
        print(format_record({"kind": "teacher", "train_acc": run.train_acc, "test_acc": run.test_acc,
                             "checkpoint": str(run_dir / "teacher.ckpt")}))
        return 0

    if args.verb == "distill":
        run_dir = _run_dir(args, cfg, f"distill-{cfg.mode}-T{cfg.T}-{seed_tag}")
        teacher = _teacher(cfg, args.teacher, train, test, run_dir)
        run = trainer.distill(cfg, teacher, train, test, run_dir)
        print(format_record(run.summary))
        return 0

    if args.verb == "ablate-pairs":
        run_dir = _run_dir(args, cfg, f"ablate-{seed_tag}")
        teacher = _teacher(cfg, args.teacher, train, test, run_dir)
        rows = trainer.ablation_fixed_pairs(cfg, teacher, train, test, run_dir)
        (run_dir / "ablation.log").write_text(_format_rows(rows) + "\n")
        print(_format_rows(rows))
        return 0

    if args.verb == "noisy-suite":
        run_dir = _run_dir(args, cfg, f"noisy-{seed_tag}")
        try:
            fractions = [float(x) for x in args.fractions.split(",") if x.strip()]
        except ValueError as exc:
            raise UsageError(f"--fractions: {exc}") from exc
        modes = [m.strip() for m in args.modes.split(",") if m.strip()]
        for m in modes:
            apply_overrides(cfg, [f"mode={m}"]).validate()
        teacher = trainer.load_network(args.teacher) if args.teacher else None
        rows = trainer.noisy_label_suite(cfg, fractions, modes, teacher, run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "noisy.log").write_text(_format_rows(rows) + "\n")
        print(_format_rows(rows))
        return 0
    raise UsageError(f"unknown verb {args.verb!r}")


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = _parser().parse_args(argv)
        return dispatch(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, DatasetFormatError, TensorFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure of the training machinery
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
