"""Command-line front end.

Exit codes: 0 success, 1 runtime failure (including any failed case in a
batch), 2 argument errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import config as cfgio
from . import gradcheck, nonparam_stats, phantom, predictor, seg_metrics, trainer, unet
from .augment import AugmentConfig
from .errors import VoxelstripError
from .volume_io import BrainMask, read_nifti, write_nifti

log = logging.getLogger("voxelstrip")

NIFTI_SUFFIXES = (".nii.gz", ".nii")


def _threads(value):
    if value is not None:
        return max(1, value)
    env = os.environ.get("VOXELSTRIP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer VOXELSTRIP_THREADS=%r", env)
    return os.cpu_count() or 1


def _nifti_inputs(path: Path):
    if path.is_dir():
        return sorted(p for p in path.iterdir()
                      if p.name.endswith(NIFTI_SUFFIXES) and not p.name.endswith(
                          ("_mask.nii.gz", "_mask.nii", "_prob.nii.gz", "_prob.nii")))
    return [path]


# --------------------------------------------------------------------------- extract

def _extract_one(path, ens, out_dir, tta, save_prob):
    vol = read_nifti(path)
    res = predictor.extract_brain(vol, ens, tta=tta, with_probability=save_prob)
    mask_path, prob_path = predictor.output_paths(path, out_dir)
    write_nifti(res.mask, mask_path)
    if save_prob:
        write_nifti(res.probability, prob_path, dtype="float32")
    return mask_path


def cmd_extract(args) -> int:
    ens = predictor.Ensemble.load(args.model)
    inputs = _nifti_inputs(Path(args.input))
    if not inputs:
        print(f"error: no NIfTI inputs found in {args.input}", file=sys.stderr)
        return 1
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run(path):
        try:
            return path, _extract_one(path, ens, out_dir, not args.no_tta, args.save_prob), None
        except (VoxelstripError, OSError, ValueError) as exc:
            return path, None, exc

    workers = min(_threads(args.threads), len(inputs))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, inputs))
    else:
        results = [run(p) for p in inputs]
    failed = 0
    for path, out, exc in results:
        if exc is None:
            print(f"{path} -> {out}")
        else:
            failed += 1
            print(f"FAILED {path}: {type(exc).__name__}: {exc}", file=sys.stderr)
    return 1 if failed else 0


# --------------------------------------------------------------------------- train

def load_dataset(data_dir: Path):
    """``case_id -> (image path, mask path)`` for every image with a ``_mask`` partner."""
    cases = {}
    for p in sorted(data_dir.iterdir()):
        for suf in NIFTI_SUFFIXES:
            if p.name.endswith("_mask" + suf):
                stem = p.name[: -len("_mask" + suf)]
                img = data_dir / f"{stem}{suf}"
                if img.exists():
                    cases[stem] = (img, p)
    return cases


def _train_config(args):
    base = trainer.DESK_TRAIN if args.profile == "desk" else trainer.TrainConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batches is not None:
        overrides["batches_per_epoch"] = args.batches
    if args.config:
        text = cfgio.dumps(base) + Path(args.config).read_text(encoding="utf-8")
        return cfgio.loads(trainer.TrainConfig, text, **overrides)
    return dataclasses.replace(base, **overrides)


def cmd_train(args) -> int:
    tcfg = _train_config(args)
    if args.net_config:
        ncfg = cfgio.load(unet.NetConfig, args.net_config)
    else:
        ncfg = unet.DESK_NET if args.profile == "desk" else unet.NetConfig()
    acfg = cfgio.load(AugmentConfig, args.aug_config) if args.aug_config else AugmentConfig()
    tcfg.check_net(ncfg)
    cases = load_dataset(Path(args.data))
    ids = sorted(cases)
    if args.holdout:
        if args.holdout >= len(ids):
            print(f"error: holdout {args.holdout} leaves no training cases", file=sys.stderr)
            return 1
        ids = ids[: len(ids) - args.holdout]
    if not ids:
        print(f"error: no training cases in {args.data}", file=sys.stderr)
        return 1
    log.info("loading %d training cases", len(ids))
    prepared = {}
    for cid in ids:
        img, msk = cases[cid]
        prepared[cid] = trainer.prepare_case(read_nifti(img), BrainMask.from_volume(read_nifti(msk)))

    if args.fold == "full":
        runs = [("full", ids)]
    else:
        folds = trainer.kfold_split(ids, tcfg.folds, tcfg.seed)
        which = range(tcfg.folds) if args.fold == "all" else [int(args.fold)]
        for k in which:
            if not 0 <= k < tcfg.folds:
                print(f"error: fold {k} outside 0..{tcfg.folds - 1}", file=sys.stderr)
                return 2
        runs = [(f"fold{k}", [c for c in ids if c not in set(folds[k])]) for k in which]

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    cfgio.save(tcfg, out / "train.cfg")
    cfgio.save(acfg, out / "augment.cfg")
    for name, train_ids in runs:
        t0 = time.perf_counter()
        log.info("%s: training on %d cases", name, len(train_ids))
        ws, history = trainer.train([prepared[c] for c in train_ids], ncfg, tcfg, acfg,
                                    workers=args.workers)
        unet.save_model(ws, ncfg, out / f"{name}.hdbw")
        trainer.write_history(history, out / f"{name}_loss.csv")
        print(f"{name}: final loss {history[-1][1]:.4f} "
              f"({time.perf_counter() - t0:.0f}s) -> {out / (name + '.hdbw')}")
    return 0


# --------------------------------------------------------------------------- evaluate / compare

def cmd_evaluate(args) -> int:
    ev = seg_metrics.evaluate_cases(args.pred, args.gt, args.sequence, args.algorithm)
    seg_metrics.write_metrics_csv(ev.cases, args.output)
    for seq, s in ev.summary().items():
        med, q1, q3 = s["dice"]
        line = f"{seq}: n={s['n']} dice median {med:.2f} (IQR {q1:.2f}-{q3:.2f})"
        if s["hd95"] is not None:
            hm, h1, h3 = s["hd95"]
            line += f", hd95 median {hm:.2f} mm (IQR {h1:.2f}-{h3:.2f})"
        print(line)
    for cid, msg in ev.errors:
        print(f"error {cid}: {msg}", file=sys.stderr)
    return 1 if ev.errors else 0


def _metric_map(cases, metric):
    if metric == "dice":
        return {c.case_id: c.dice_pct for c in cases}
    return {c.case_id: c.hd95_mm for c in cases if c.hd95_mm is not None}


def cmd_compare(args) -> int:
    tables = {}
    for path in args.csv:
        label = Path(path).stem
        if label in tables:
            label = str(path)
        tables[label] = _metric_map(seg_metrics.read_metrics_csv(path), args.metric)
    alternative = args.alternative
    if alternative == "auto":
        alternative = "greater" if args.metric == "dice" else "less"
    ref_label, ref = next(iter(tables.items()))
    others = {f"{ref_label}_vs_{k}": v for k, v in list(tables.items())[1:]}
    reports, errors = nonparam_stats.compare(ref, others, args.metric, alternative)
    nonparam_stats.write_report_csv(reports, args.output)
    for r in reports:
        flag = f" ({r.n_zero} zero differences dropped)" if r.n_zero else ""
        print(f"{r.comparison}: |Z|={r.abs_z:.3f} p={r.p_raw:.3g} "
              f"p_bonf={r.p_bonferroni:.3g} r={r.effect_r:.2f} n={r.n}{flag}")
    if len(tables) >= 3:
        common = sorted(set.intersection(*(set(t) for t in tables.values())))
        if len(common) >= 2:
            chi2, p = nonparam_stats.friedman([[t[c] for t in tables.values()] for c in common])
            print(f"friedman: chi2={chi2:.3f} p={p:.3g} n={len(common)} k={len(tables)}")
    for label, msg in errors:
        print(f"error {label}: {msg}", file=sys.stderr)
    return 1 if errors else 0


# --------------------------------------------------------------------------- phantom / gradcheck

def cmd_phantom(args) -> int:
    cfg = cfgio.load(phantom.PhantomConfig, args.config) if args.config else phantom.PhantomConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.contrast:
        overrides["contrast"] = args.contrast
    if args.symmetric:
        overrides["symmetric"] = True
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    written = phantom.generate_set(cfg, args.n, args.output, args.start)
    cfgio.save(cfg, Path(args.output) / "phantom.cfg")
    print(f"wrote {len(written)} phantom pairs to {args.output}")
    return 0


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for r in gradcheck.suite(args.seed or 0):
        print(f"{r.op:22s} max rel err {r.max_rel_err:.3e}")
        worst = max(worst, r.max_rel_err)
    ok = worst <= args.tol
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tolerance {args.tol:g})")
    return 0 if ok else 1


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxelstrip", description="Brain extraction for head MRI.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("extract", help="predict brain masks")
    e.add_argument("-i", "--input", required=True, help="NIfTI file or directory")
    e.add_argument("-o", "--output", required=True, help="output directory")
    e.add_argument("-m", "--model", required=True, nargs="+", help="1-5 HDBW weight files")
    e.add_argument("--no-tta", action="store_true", help="disable mirror averaging")
    e.add_argument("--save-prob", action="store_true", help="also write <stem>_prob.nii.gz")
    e.add_argument("--threads", type=int, help="cases processed in parallel")
    e.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", help="train one fold, all folds or on every case")
    t.add_argument("-d", "--data", required=True, help="directory of <case>.nii.gz + <case>_mask.nii.gz")
    t.add_argument("-o", "--output", required=True, help="output directory")
    t.add_argument("--profile", choices=("desk", "paper"), default="desk")
    t.add_argument("--fold", default="full", help="fold index, 'all' or 'full' (no split)")
    t.add_argument("--holdout", type=int, default=0, help="exclude the last N cases (sorted by id)")
    t.add_argument("--config", help="TrainConfig key=value file")
    t.add_argument("--net-config", help="NetConfig key=value file")
    t.add_argument("--aug-config", help="AugmentConfig key=value file")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batches", type=int, help="batches per epoch")
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int, default=1, help="augmentation threads")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("evaluate", help="DICE and HD95 of predictions against ground truth")
    v.add_argument("--pred", required=True)
    v.add_argument("--gt", required=True)
    v.add_argument("-o", "--output", required=True, help="metrics CSV")
    v.add_argument("--sequence", default="other", choices=seg_metrics.SEQUENCES)
    v.add_argument("--algorithm", default="voxelstrip")
    v.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="Wilcoxon tests of the first metrics CSV against the rest")
    c.add_argument("csv", nargs="+")
    c.add_argument("-o", "--output", required=True, help="comparison CSV")
    c.add_argument("--metric", choices=("dice", "hd95"), default="dice")
    c.add_argument("--alternative", choices=("auto",) + nonparam_stats.ALTERNATIVES, default="auto")
    c.set_defaults(func=cmd_compare)

    ph = sub.add_parser("phantom", help="write a synthetic phantom dataset")
    ph.add_argument("-o", "--output", required=True)
    ph.add_argument("--n", type=int, default=50)
    ph.add_argument("--start", type=int, default=0, help="first case index")
    ph.add_argument("--config", help="PhantomConfig key=value file")
    ph.add_argument("--seed", type=int)
    ph.add_argument("--contrast", choices=("t1", "t2", "mixed"))
    ph.add_argument("--symmetric", action="store_true")
    ph.set_defaults(func=cmd_phantom)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)
    return p


def _validate(parser, args):
    if args.command == "extract":
        if len(args.model) > 5:
            parser.error("at most 5 models may be ensembled")
        for m in args.model:
            if not Path(m).is_file():
                parser.error(f"model not found: {m}")
        if not Path(args.input).exists():
            parser.error(f"input not found: {args.input}")
    elif args.command == "train" and not Path(args.data).is_dir():
        parser.error(f"data directory not found: {args.data}")
    elif args.command == "evaluate":
        for d in (args.pred, args.gt):
            if not Path(d).is_dir():
                parser.error(f"directory not found: {d}")
    elif args.command == "compare":
        if len(args.csv) < 2:
            parser.error("compare needs at least two metrics CSVs")
        for f in args.csv:
            if not Path(f).is_file():
                parser.error(f"metrics CSV not found: {f}")
    elif args.command == "phantom" and args.n < 1:
        parser.error("--n must be >= 1")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate(parser, args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (VoxelstripError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
