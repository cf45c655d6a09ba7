"""Command-line experiment runner.

Subcommands: ``gen-data``, ``train``, ``eval``, ``sweep``, ``grad-check`` and
``masks-demo``.  Exit codes are 0 on success, 2 for configuration or usage
errors, 3 for missing or malformed data, 4 when a loss turns non-finite.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import alignment as al
from . import config as cf
from . import gradcheck, metrics, nets, synthdata, trainer
from .config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT = "checkpoint.bin"
ARTIFACTS = ("curves.csv", "metrics.json", CHECKPOINT, "resolved-config.json", "run.json")

log = logging.getLogger("ssdas")


class DataError(RuntimeError):
    pass


# --- helpers ----------------------------------------------------------------------
def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError("--out", f"{path} exists and is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    over = {}
    for name in ("seed", "k", "shift"):
        value = getattr(args, name, None)
        if value is not None:
            over[name] = value
    for flag in cf.ABLATION_FLAGS:
        if getattr(args, f"no_{flag}", False):
            over[flag] = False
    if getattr(args, "data", None):
        over["data_dir"] = str(args.data)
    return replace(cfg, **over).validate()


def load_data(cfg: ExperimentConfig) -> synthdata.DatasetSplit:
    if cfg.data_dir is None:
        return synthdata.build_benchmark(shift=cfg.shift, k=cfg.k, seed=cfg.seed, n_source=cfg.n_source,
                                         n_unlabeled=cfg.n_unlabeled, n_val=cfg.n_val)
    try:
        split = synthdata.read_dataset(cfg.data_dir)
    except (FileNotFoundError, synthdata.FormatError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read dataset {cfg.data_dir}: {exc}") from exc
    if split.k != cfg.k:
        raise ConfigError("k", f"config asks for {cfg.k} shots, dataset {cfg.data_dir} has {split.k}")
    return split


def run_experiment(cfg: ExperimentConfig, out: Path) -> dict:
    """Train once and write every artifact into ``out``; returns the run record."""
    t0 = time.perf_counter()
    split = load_data(cfg)
    data = trainer.TrainData.from_split(split)
    res = trainer.train(cfg, data)
    trainer.write_curves(out / "curves.csv", res.rows)
    metrics.write_metrics_json(out / "metrics.json", res.metrics)
    nets.save_checkpoint(out / CHECKPOINT, res.model)
    cfg.dump(out / "resolved-config.json")
    if cfg.dump_masks and res.state.mask_rows is not None:
        al.write_mask_dump(out / "masks-source.csv", res.state.mask_rows["source"], "cds", "m_rm")
        al.write_mask_dump(out / "masks-target.csv", res.state.mask_rows["target"], "entropy", "m_add")
    record = {
        "config": cfg.to_dict(),
        "pretrain_rows": res.pretrain_rows,
        "rows": res.rows,
        "metrics": res.metrics,
        "wall_clock_s": time.perf_counter() - t0,
        "artifacts": sorted(p.name for p in out.iterdir()) + ["run.json"],
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record


# --- subcommands -------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(Path(args.out), args.force)
    split = synthdata.build_benchmark(shift=cfg.shift, k=cfg.k, seed=cfg.seed, n_source=cfg.n_source,
                                      n_unlabeled=cfg.n_unlabeled, n_val=cfg.n_val)
    synthdata.write_dataset(out, split, extra={"shift": cfg.shift, "seed": cfg.seed})
    print(f"wrote {len(split.source)} source and {len(split.target)} target images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(Path(args.out), args.force)
    cfg = replace(cfg, out_dir=str(out))
    rec = run_experiment(cfg, out)
    m = rec["metrics"]
    print(f"mIoU {m['miou']:.4f}  sigma_w2 {m['sigma_w2']:.4f}  sigma_b2 {m['sigma_b2']:.4f}  "
          f"({rec['wall_clock_s']:.1f}s) -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg_path = run / "resolved-config.json"
    if not cfg_path.exists():
        raise DataError(f"{cfg_path} not found")
    cfg = ExperimentConfig.load(cfg_path)
    if args.data:
        cfg = replace(cfg, data_dir=str(args.data))
    split = load_data(cfg)
    data = trainer.TrainData.from_split(split)
    model = nets.SegModel(data.num_classes)
    ckpt = Path(args.checkpoint) if args.checkpoint else run / CHECKPOINT
    try:
        nets.load_checkpoint(ckpt, model)
    except FileNotFoundError as exc:
        raise DataError(f"{ckpt} not found") from exc
    images, masks = (data.xt, data.yt) if args.split == "labeled" else (data.xval, data.yval)
    doc = metrics.evaluate(model, images, masks, data.num_classes)
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def sweep_cells(cfg: ExperimentConfig, preset: Optional[str], lambdas: Sequence[float],
                Ns: Sequence[int], ks: Sequence[int]) -> List[dict]:
    """Override dictionaries, one per grid cell."""
    if preset == "lambda-n":
        return [{"lambda_j": lam} for lam in cf.LAMBDA_GRID] + [{"N": n} for n in cf.N_GRID]
    if preset == "shots":
        return [{"k": k} for k in cf.K_GRID]
    axes = [("lambda_j", lambdas or [cfg.lambda_j]), ("N", Ns or [cfg.N]), ("k", ks or [cfg.k])]
    cells = [{}]
    for name, values in axes:
        cells = [{**c, name: v} for c in cells for v in values]
    return cells


def _sweep_cell(job) -> dict:
    i, cfg_dict, out = job
    cfg = ExperimentConfig.from_dict(cfg_dict)
    row = {"cell": i, "lambda_j": cfg.lambda_j, "N": cfg.N, "k": cfg.k, "miou": "", "status": "ok",
           "run_dir": str(out)}
    try:
        out.mkdir(parents=True, exist_ok=True)
        row["miou"] = repr(run_experiment(replace(cfg, out_dir=str(out)).validate(), out)["metrics"]["miou"])
    except trainer.NumericalError as exc:
        row["status"] = f"numerical: {exc}"
    except (ConfigError, DataError) as exc:
        row["status"] = f"error: {exc}"
    return row


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(Path(args.out), args.force)
    cells = sweep_cells(cfg, args.preset, _floats(args.lambdas), _ints(args.Ns), _ints(args.ks))
    jobs = [(i, replace(cfg, **over).to_dict(), out / f"cell-{i:02d}") for i, over in enumerate(cells)]
    workers = max(1, int(os.environ.get("SSDAS_THREADS", "1")))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(j) for j in jobs]
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["cell", "lambda_j", "N", "k", "miou", "status", "run_dir"])
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"cell {r['cell']:2d}  lambda_j={r['lambda_j']:<6} N={r['N']:<4} k={r['k']:<3} "
              f"miou={r['miou'] or '-'}  {r['status']}")
    failed = [r for r in rows if r["status"] != "ok"]
    if any(r["status"].startswith("numerical") for r in failed):
        return EXIT_NUMERIC
    return EXIT_CONFIG if failed else EXIT_OK


def cmd_grad_check(args) -> int:
    results = gradcheck.run_suite(seed=args.seed if args.seed is not None else 0, points=args.points)
    print(gradcheck.format_report(results))
    return EXIT_OK if all(r.passed for r in results) else 1


def cmd_masks_demo(args) -> int:
    values = _floats(args.values)
    if not values:
        raise ConfigError("--values", "need at least one number")
    prog = al.EpochProgress(args.epoch, args.max_epoch)
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    cut = al._cut_index(v.size, prog)
    thres = v[order[cut]]
    print(f"values      {values}")
    print(f"sorted      {v[order].tolist()}  (original positions {order.tolist()})")
    print(f"N_idx       min(floor({v.size} * {args.epoch} / {args.max_epoch}), {v.size - 1}) = {cut}")
    print(f"Thres       sorted[{cut}] = {thres!r}")
    if args.kind in ("rm", "both"):
        m = al.compute_m_rm(v, prog)
        print(f"M_rm        keep cds >= Thres -> {m.astype(int).tolist()}  ({int((m == 0).sum())} removed)")
    if args.kind in ("add", "both"):
        m = al.compute_m_add(v, prog)
        print(f"M_add       admit entropy <= Thres -> {m.astype(int).tolist()}  ({int(m.sum())} admitted)")
    return EXIT_OK


def _floats(text: Optional[str]) -> List[float]:
    return [float(x) for x in text.split(",") if x.strip()] if text else []


def _ints(text: Optional[str]) -> List[int]:
    return [int(x) for x in text.split(",") if x.strip()] if text else []


# --- parser -------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssdas", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--out", required=out_required)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--force", action="store_true", help="write into a non-empty --out")
        sp.add_argument("--k", type=int, help="labeled target shots")
        sp.add_argument("--shift", type=float, help="domain shift magnitude")

    g = sub.add_parser("gen-data", help="generate a synthetic benchmark on disk")
    common(g)
    g.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("train", cmd_train, "train one model"),
                                 ("sweep", cmd_sweep, "run a grid of trainings")):
        t = sub.add_parser(name, help=helptext)
        common(t)
        t.add_argument("--data", help="dataset directory written by gen-data")
        for flag in cf.ABLATION_FLAGS:
            t.add_argument(f"--no-{flag.replace('_', '-')}", dest=f"no_{flag}", action="store_true")
        t.set_defaults(func=func)
    sw = sub.choices["sweep"]
    sw.add_argument("--preset", choices=("lambda-n", "shots"),
                    help="lambda-n: five lambda_j and five N cells; shots: k in 1,3,5,10,20")
    sw.add_argument("--lambdas", help="comma-separated lambda_j values")
    sw.add_argument("--Ns", help="comma-separated jigsaw class counts")
    sw.add_argument("--ks", help="comma-separated shot counts")

    e = sub.add_parser("eval", help="evaluate a trained checkpoint")
    e.add_argument("run", help="run directory written by train")
    e.add_argument("--checkpoint", help="defaults to <run>/checkpoint.bin")
    e.add_argument("--data", help="override the dataset directory")
    e.add_argument("--split", choices=("validation", "labeled"), default="validation")
    e.add_argument("--out", help="also write the metrics JSON here")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("grad-check", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int)
    gc.add_argument("--points", type=int, default=100)
    gc.set_defaults(func=cmd_grad_check)

    md = sub.add_parser("masks-demo", help="trace the removal/admission masks for a vector")
    md.add_argument("--values", required=True, help="comma-separated similarity or entropy values")
    md.add_argument("--epoch", type=int, required=True)
    md.add_argument("--max-epoch", type=int, required=True)
    md.add_argument("--kind", choices=("rm", "add", "both"), default="both")
    md.set_defaults(func=cmd_masks_demo)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, nets.FormatError, synthdata.FormatError, synthdata.GenerationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except trainer.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # argument errors raised inside the library (bad epoch, bad lengths)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
