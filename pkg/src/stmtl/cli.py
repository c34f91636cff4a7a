"""Command line: ``stmtl gen-data | train | eval | report``.

Exit codes: 0 success, 2 user or configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import RunConfig
from .errors import ConfigError, ContractError, NumericError, ShapeError

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 2, 3
CONFIG_NAME = "config.txt"


class UserError(Exception):
    pass


def _resolve_config(args, base_dir: Optional[Path] = None) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    elif base_dir is not None and (base_dir / CONFIG_NAME).exists():
        cfg = RunConfig.load(base_dir / CONFIG_NAME)
    else:
        cfg = RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    if getattr(args, "no_sc_scse", False):
        changes["use_sc_scse"] = False
    if getattr(args, "no_lstmpp", False):
        changes["use_lstmpp"] = False
    if getattr(args, "no_reg", False):
        changes["use_reg"] = False
    return cfg.update(changes) if changes else cfg.validate()


def _out_dir(path: str) -> Path:
    out = Path(path)
    if not out.parent.exists():
        raise UserError(f"parent of output directory does not exist: {out.parent}")
    out.mkdir(exist_ok=True)
    return out


# -- gen-data ------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .data import gen_sequence, meta_text, save_sequence

    cfg = _resolve_config(args)
    out = _out_dir(args.out)
    synth = cfg.synth()
    digest = hashlib.sha256()
    total = cfg.n_train + cfg.n_val
    for n in range(total):
        seq = gen_sequence(synth, n, "train" if n < cfg.n_train else "val")
        save_sequence(seq, out / f"seq_{n}")
        digest.update(meta_text(seq).encode("utf-8"))
    cfg.save(out / CONFIG_NAME)
    print(f"wrote {total} sequences ({cfg.n_train} train, {cfg.n_val} val) of {cfg.T} frames to {out}")
    print(f"meta sha256 {digest.hexdigest()}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------------------

def _load_data(path: str):
    from .data import load_dataset

    root = Path(path)
    if not root.is_dir() or not any(root.glob("seq_*/meta.txt")):
        raise UserError(f"no dataset found at {root}")
    return load_dataset(root)


def cmd_train(args) -> int:
    from .asto import convergence_report, run_asto
    from .blocks import STMTL

    data_dir = Path(args.data)
    cfg = _resolve_config(args)
    train, val = _load_data(args.data)
    if not val:
        raise UserError(f"dataset at {data_dir} has no validation sequences")
    out = _out_dir(args.out)
    cfg.save(out / CONFIG_NAME)
    model = STMTL(cfg.arch(), seed=cfg.seed)
    records = run_asto(model, train, val, cfg, out_dir=out, resume=args.resume)
    from .tensor import save_archive
    save_archive(out / "model.stmt", model.state_dict())
    (out / "convergence.txt").write_text(convergence_report(records), encoding="utf-8")
    print(convergence_report(records), end="")
    print(f"phases: {','.join(r.phase for r in records)}; checkpoints in {out}")
    return EXIT_OK


# -- eval ------------------------------------------------------------------------------------

def _write_pgm(path: Path, arr: np.ndarray) -> None:
    h, w = arr.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr, np.uint8).tobytes())


def cmd_eval(args) -> int:
    from .blocks import STMTL, predict
    from .metrics import EvalReport, evaluate_sequence, fps_benchmark, hardware_descriptor
    from .tensor import load_archive

    ckpt = Path(args.ckpt) if args.ckpt else None
    if ckpt is not None and not ckpt.exists():
        raise UserError(f"checkpoint not found: {ckpt}")
    cfg = _resolve_config(args, ckpt.parent if ckpt is not None else None)
    train, val = _load_data(args.data)
    seqs = val if args.split == "val" else train + val
    out = _out_dir(args.out)
    started = time.perf_counter()

    model = STMTL(cfg.arch(), seed=cfg.seed)
    if ckpt is not None:
        model.load_state_dict(load_archive(ckpt))
    model.eval()

    report = EvalReport()
    listing = []
    pred_root = out / "predictions"
    for k, seq in enumerate(seqs):
        name = f"seq_{k}"
        if args.gt_passthrough:
            labels, sal = seq.masks.astype(np.int64), seq.heatmaps
        else:
            logits, sal = predict(model, seq.frames)
            labels = logits.argmax(axis=1)
        row, paths = evaluate_sequence(seq, labels, sal, n_splits=cfg.auc_splits, seed=cfg.seed)
        if args.gt_passthrough:
            # the oracle predicts the reference ranking as well
            from .metrics import scanpath_accuracy
            paths = [list(p) for p in seq.scanpaths]
            row["scanpath_top1"], row["scanpath_avg"] = scanpath_accuracy(paths, seq.scanpaths)
        report.rows[name] = row
        folder = pred_root / name
        folder.mkdir(parents=True, exist_ok=True)
        for t in range(seq.T):
            _write_pgm(folder / f"mask_{t}.pgm", labels[t].astype(np.uint8))
            _write_pgm(folder / f"saliency_{t}.pgm", np.round(np.clip(sal[t], 0, 1) * 255).astype(np.uint8))
            listing.append(f"{name} t={t} pred={','.join(map(str, paths[t]))} "
                           f"gt={','.join(map(str, seq.scanpaths[t]))}")

    (out / "eval.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "scanpaths.txt").write_text("\n".join(listing) + "\n", encoding="utf-8")
    cfg.save(out / CONFIG_NAME)
    report.fps = fps_benchmark(model, (3, cfg.H, cfg.W), n_timed=max(cfg.fps_timed, 10))
    report.hardware = hardware_descriptor()
    report.wall_clock_s = time.perf_counter() - started
    (out / "fps.txt").write_text(f"fps={report.fps:.4f}\nhardware={report.hardware}\n", encoding="utf-8")
    (out / "summary.txt").write_text(report.summary(), encoding="utf-8")
    print(report.summary(), end="")
    return EXIT_OK


# -- report ------------------------------------------------------------------------------------

REPORT_COLUMNS = ("ASTO", "SC-scSE", "ConvLSTM++", "Reg.", "Type Dice", "Scan. Top-1", "FPS")


def _mark(flag: bool) -> str:
    return "yes" if flag else "no"


def cmd_report(args) -> int:
    from .metrics import EvalReport

    if not args.runs:
        raise UserError("report needs at least one run directory")
    rows = []
    for run in map(Path, args.runs):
        csv_path = run / "eval.csv"
        if not csv_path.exists():
            print(f"warning: {run} has no eval.csv, skipped", file=sys.stderr)
            continue
        cfg = RunConfig.load(run / CONFIG_NAME) if (run / CONFIG_NAME).exists() else RunConfig()
        mean = EvalReport.read_csv(csv_path.read_text(encoding="utf-8")).get("mean", {})
        fps = float("nan")
        if (run / "fps.txt").exists():
            for line in (run / "fps.txt").read_text(encoding="utf-8").splitlines():
                if line.startswith("fps="):
                    fps = float(line.split("=", 1)[1])
        reg = cfg.use_reg and cfg.mode in ("asto", "joint")
        rows.append((_mark(cfg.mode == "asto"), _mark(cfg.use_sc_scse), _mark(cfg.use_lstmpp), _mark(reg),
                     f"{mean.get('type_dice', float('nan')):.4f}", f"{mean.get('scanpath_top1', float('nan')):.4f}",
                     f"{fps:.2f}"))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    writer.writerows(rows)
    widths = [max(len(c), *(len(r[i]) for r in rows)) if rows else len(c) for i, c in enumerate(REPORT_COLUMNS)]
    text = "\n".join("  ".join(v.ljust(w) for v, w in zip(line, widths)) for line in [REPORT_COLUMNS, *rows]) + "\n"
    if args.out:
        out = _out_dir(args.out)
        (out / "report.csv").write_text(buf.getvalue(), encoding="utf-8")
        (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stmtl", description="Spatio-temporal multi-task learning at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=False):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int)
        if mode:
            p.add_argument("--mode", choices=["asto", "joint", "single-seg", "single-sal"])

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p, mode=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--no-sc-scse", action="store_true", help="plain scSE in the segmentation decoder")
    p.add_argument("--no-lstmpp", action="store_true", help="ConvLSTM on current features only")
    p.add_argument("--no-reg", action="store_true", help="skip the regularize phase")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--ckpt", help="checkpoint archive (omit to evaluate an untrained model)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["val", "all"], default="val")
    p.add_argument("--gt-passthrough", action="store_true", help="score the ground truth as the prediction")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge evaluated runs into an ablation table")
    p.add_argument("runs", nargs="*")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code else EXIT_OK
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UserError, ConfigError, ContractError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
