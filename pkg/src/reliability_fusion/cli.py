"""Command-line entry point: generate, train, evaluate, ablate, analyze, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import itertools
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import analysis, data, synth
from .losses import VARIANTS, Hyperparams, reliability_signal, stage2_loss
from .metrics import evaluate
from .model import STAGE_I, STAGE_II, init_params, load_checkpoint, save_checkpoint, score_triplets
from .optim import NumericalError, backward, finite_diff_check
from .train import run_variant

log = logging.getLogger("reliability_fusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "alpha": "0.1",
    "beta": "0.01",
    "tau": "1.0",
    "embed_dim": "64",
    "lr": "1e-4",
    "batch_size": "2048",
    "max_epochs": "100",
    "patience": "10",
    "k_list": "10,20",
    "variant": "full",
    "seed": "0",
    "normalize_joint_weights": "false",
    "eval_every": "1",
    "interactions": "",
    "features": "",
    "ground_truth": "",
}
GRID_KEYS = ("alpha", "beta", "tau")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def read_config(path) -> dict:
    """Flat ``key = value`` file; blank lines and ``#`` comments ignored."""
    cfg = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise data.DataError(f"{path}: line {lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in DEFAULTS:
                raise data.DataError(f"{path}: line {lineno}: unknown key {key!r}")
            cfg[key] = value
    return cfg


def write_config(path, cfg: dict):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(cfg):
            fh.write(f"{key} = {cfg[key]}\n")


def effective_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(read_config(args.config))
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = str(val)
    return cfg


def _bool(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "on")


def hyper_from_config(cfg: dict, **override) -> Hyperparams:
    typed = {
        "alpha": float(cfg["alpha"]), "beta": float(cfg["beta"]), "tau": float(cfg["tau"]),
        "embed_dim": int(cfg["embed_dim"]), "lr": float(cfg["lr"]), "batch_size": int(cfg["batch_size"]),
        "max_epochs": int(cfg["max_epochs"]), "patience": int(cfg["patience"]),
        "k_list": tuple(int(k) for k in cfg["k_list"].split(",")), "variant": cfg["variant"],
        "seed": int(cfg["seed"]), "normalize_joint_weights": _bool(cfg["normalize_joint_weights"]),
    }
    typed.update(override)
    try:
        return Hyperparams(**typed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def grid_points(cfg: dict):
    """Expand comma lists of alpha/beta/tau into a grid of scalar configs."""
    lists = [cfg[k].split(",") for k in GRID_KEYS]
    for combo in itertools.product(*lists):
        point = dict(cfg)
        point.update({k: v.strip() for k, v in zip(GRID_KEYS, combo)})
        yield point


def load_data(cfg: dict):
    if not cfg["interactions"] or not cfg["features"]:
        raise data.DataError("config needs 'interactions' and 'features' paths")
    ds = data.load_interactions(cfg["interactions"])
    tables = []
    for m, path in enumerate(p.strip() for p in cfg["features"].split(",")):
        if path.endswith(".bin"):
            tables.append(data.read_feature_cache(path, m))
            if tables[-1].matrix.shape[0] != ds.item_count:
                raise data.DataError(f"{path}: incomplete modality {m}: row count != item count")
        else:
            tables.append(data.load_modality_features(path, m, ds))
    ds = data.split_dataset(ds, seed=int(cfg["seed"]))
    return ds, tables


def _eval_stage(cfg) -> str:
    return STAGE_I if cfg["variant"] == "no_weight" else STAGE_II


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands -------------------------------------------------------------

def cmd_generate(args) -> int:
    spec = synth.SyntheticSpec(
        user_count=args.users, item_count=args.items, latent_dim=args.latent_dim,
        modality_dims=tuple(int(d) for d in args.modality_dims.split(",")),
        interactions_per_user=args.interactions_per_user, corrupted_modality=args.corrupted_modality,
        corruption_fraction=args.corruption_fraction, noise_scale=args.noise_scale, seed=args.seed)
    try:
        ds, tables, truth = synth.generate(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args.out)
    data.write_interactions(out / "interactions.tsv", ds)
    paths = []
    for t in tables:
        p = out / f"features_{t.modality_id}.tsv"
        data.write_modality_features(p, t, ds.item_ids)
        paths.append(str(p))
    synth.write_ground_truth(out / "ground_truth.tsv", truth, ds)
    cfg = dict(DEFAULTS)
    cfg.update(interactions=str(out / "interactions.tsv"), features=",".join(paths),
               ground_truth=str(out / "ground_truth.tsv"), seed=str(args.seed))
    write_config(out / "effective_config.txt", cfg)
    print(f"wrote {ds.user_count} users, {ds.item_count} items, {ds.n_interactions} interactions, "
          f"{len(truth.corrupted_items)} corrupted items to {out}")
    return EXIT_OK


def _train_one(cfg, ds, tables):
    hyper = hyper_from_config(cfg)
    params, tlog = run_variant(hyper.variant, hyper, ds, tables, eval_every=int(cfg["eval_every"]))
    report = evaluate(params, tables, ds, "val", tuple(sorted(set(hyper.k_list) | {20})), tlog.final_stage)
    return params, tlog, report


def cmd_train(args) -> int:
    cfg = effective_config(args)
    ds, tables = load_data(cfg)
    out = _out_dir(args.out)
    points = list(grid_points(cfg))
    best = None
    grid_rows = []
    for point in points:
        params, tlog, report = _train_one(point, ds, tables)
        grid_rows.append((point, report.recall[20]))
        if best is None or report.recall[20] > best[3].recall[20]:
            best = (point, params, tlog, report)
    point, params, tlog, report = best
    if len(points) > 1:
        with open(out / "grid.tsv", "w", encoding="utf-8") as fh:
            fh.write("alpha\tbeta\ttau\tval_recall20\n")
            for p, r in grid_rows:
                fh.write(f"{p['alpha']}\t{p['beta']}\t{p['tau']}\t{r:.6f}\n")
    save_checkpoint(out / "checkpoint.bin", params)
    (out / "train_log.tsv").write_text(tlog.to_tsv(), encoding="utf-8")
    if tlog.stage1_params is not None:
        save_checkpoint(out / "stage1_checkpoint.bin", tlog.stage1_params)
    (out / "handoff.tsv").write_text(
        "stage1_best_digest\tstage2_start_digest\n"
        f"{tlog.stage1_digest or '-'}\t{tlog.stage2_start_digest or '-'}\n", encoding="utf-8")
    write_config(out / "effective_config.txt", point)
    print(f"trained variant={point['variant']} epochs={tlog.last_epoch} "
          f"stages={'+'.join(sorted(set(tlog.stages())))} val Recall@20={report.recall[20]:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = effective_config(args)
    ds, tables = load_data(cfg)
    params = load_checkpoint(args.checkpoint)
    stage = args.stage or _eval_stage(cfg)
    hyper = hyper_from_config(cfg)
    report = evaluate(params, tables, ds, args.split, hyper.k_list, stage, workers=args.workers)
    print(report.table())
    if args.out:
        out = _out_dir(args.out)
        (out / f"eval_{args.split}.tsv").write_text(report.to_tsv(), encoding="utf-8")
        write_config(out / "effective_config.txt", cfg)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = effective_config(args)
    ds, tables = load_data(cfg)
    out = _out_dir(args.out)
    hyper = hyper_from_config(cfg)
    reports = {}
    for variant in VARIANTS:
        params, tlog = run_variant(variant, hyper, ds, tables, eval_every=int(cfg["eval_every"]))
        reports[variant] = evaluate(params, tables, ds, args.split, hyper.k_list, tlog.final_stage)
        (out / f"train_log_{variant}.tsv").write_text(tlog.to_tsv(), encoding="utf-8")
        save_checkpoint(out / f"checkpoint_{variant}.bin", params)
        print(f"{variant}: Recall@{hyper.k_list[-1]}={reports[variant].recall[hyper.k_list[-1]]:.4f}")
    table = analysis.compare_variants(reports, reference="full")
    (out / "comparison.tsv").write_text(table.to_tsv(), encoding="utf-8")
    write_config(out / "effective_config.txt", cfg)
    print(table.to_tsv(), end="")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = effective_config(args)
    ds, tables = load_data(cfg)
    params = load_checkpoint(args.checkpoint)
    hyper = hyper_from_config(cfg)
    out = _out_dir(args.out)
    with open(out / "weight_histogram.tsv", "w", encoding="utf-8") as fh:
        for m in range(params.n_modalities):
            text = analysis.weight_histogram(params, m, args.bins).to_tsv()
            fh.write(text if m == 0 else text.split("\n", 1)[1])
    triplets = data.sample_triplets(ds, seed=hyper.seed)
    rows = ["batch\tinner_product\tviolation\tprecondition_held\tfull_inner_product\tlogit_inner_product"]
    violations = []
    for b, start in enumerate(range(0, len(triplets), hyper.batch_size)):
        pr = analysis.conflict_probe(triplets[start:start + hyper.batch_size], params, tables, hyper)
        violations.append(pr.violation)
        rows.append(f"{b}\t{pr.inner_product!r}\t{int(pr.violation)}\t{int(pr.precondition_held)}\t"
                    f"{pr.full_inner_product!r}\t{pr.logit_inner_product!r}")
    (out / "conflict_probe.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"conflict probe: violation rate {np.mean(violations):.3f} over {len(violations)} batches")
    gt_path = args.ground_truth or cfg["ground_truth"]
    if gt_path:
        flags = synth.read_ground_truth(gt_path, ds)
        score = analysis.reliability_recovery_score(params, flags, args.corrupted_modality)
        (out / "recovery.tsv").write_text(
            "mean_w_corrupted\tmean_w_clean\tauc\n"
            f"{score.mean_w_corrupted:.6f}\t{score.mean_w_clean:.6f}\t{score.auc:.6f}\n", encoding="utf-8")
        print(f"recovery: mean_w_corrupted={score.mean_w_corrupted:.4f} "
              f"mean_w_clean={score.mean_w_clean:.4f} auc={score.auc:.4f}")
    write_config(out / "effective_config.txt", cfg)
    return EXIT_OK


def gradcheck_report(ds, tables, hyper: Hyperparams, params, sample_count=200, seed=0, h=1e-5) -> dict:
    batch = data.sample_triplets(ds, seed=seed)[:hyper.batch_size]
    results = {}
    _, g1 = backward(batch, params, tables, STAGE_I, hyper)
    results["stage_I"] = finite_diff_check(lambda p: backward(batch, p, tables, STAGE_I, hyper)[0], params, h,
                                           sample_count, seed, grads=g1)
    sig = reliability_signal(score_triplets(params, tables, batch, STAGE_II), hyper.tau)
    _, g2 = backward(batch, params, tables, STAGE_II, hyper)
    results["stage_II"] = finite_diff_check(
        lambda p: stage2_loss(batch, p, tables, hyper.alpha, hyper.beta, hyper.tau,
                              hyper.normalize_joint_weights, signal=sig), params, h, sample_count, seed, grads=g2)
    return results


def cmd_gradcheck(args) -> int:
    cfg = effective_config(args)
    if cfg["interactions"]:
        ds, tables = load_data(cfg)
    else:
        ds, tables, _ = synth.generate(synth.SyntheticSpec(seed=int(cfg["seed"])))
        ds = data.split_dataset(ds, seed=int(cfg["seed"]))
    hyper = hyper_from_config(cfg, batch_size=min(int(cfg["batch_size"]), args.batch))
    dims = [t.matrix.shape[1] for t in tables]
    params = init_params(ds.user_count, ds.item_count, len(tables), hyper.embed_dim, dims, seed=hyper.seed,
                         std=args.init_std)
    res = gradcheck_report(ds, tables, hyper, params, args.samples, hyper.seed, args.h)
    worst = max(res.values())
    for name, err in res.items():
        print(f"{name}\tmax_relative_error\t{err:.3e}")
    print(f"gradcheck {'PASS' if worst < args.tolerance else 'FAIL'} (tolerance {args.tolerance:g})")
    return EXIT_OK if worst < args.tolerance else EXIT_NUMERIC


def _add_hyper_flags(p):
    p.add_argument("--config")
    for key in ("alpha", "beta", "tau"):
        p.add_argument(f"--{key}", help="comma list enables grid mode" if key in GRID_KEYS else None)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--k-list", dest="k_list")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seed", type=int)
    p.add_argument("--normalize-joint-weights", dest="normalize_joint_weights", choices=("true", "false"))
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--interactions")
    p.add_argument("--features", help="comma-separated feature files, one per modality")
    p.add_argument("--ground-truth", dest="ground_truth")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reliability-fusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--users", type=int, default=300)
    g.add_argument("--items", type=int, default=200)
    g.add_argument("--latent-dim", type=int, default=8)
    g.add_argument("--modality-dims", default="32,32")
    g.add_argument("--interactions-per-user", type=int, default=20)
    g.add_argument("--corrupted-modality", type=int, default=1)
    g.add_argument("--corruption-fraction", type=float, default=0.4)
    g.add_argument("--noise-scale", type=float, default=synth.SyntheticSpec.noise_scale)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one variant (grid over comma lists)")
    _add_hyper_flags(t)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="Recall/NDCG of a checkpoint")
    _add_hyper_flags(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("val", "test"), default="test")
    e.add_argument("--stage", choices=(STAGE_I, STAGE_II))
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train every variant and compare")
    _add_hyper_flags(a)
    a.add_argument("--out", required=True)
    a.add_argument("--split", choices=("val", "test"), default="test")
    a.set_defaults(func=cmd_ablate)

    z = sub.add_parser("analyze", help="weight histograms, conflict probe, recovery score")
    _add_hyper_flags(z)
    z.add_argument("--checkpoint", required=True)
    z.add_argument("--out", required=True)
    z.add_argument("--bins", type=int, default=10)
    z.add_argument("--corrupted-modality", type=int, default=1)
    z.set_defaults(func=cmd_analyze)

    c = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_hyper_flags(c)
    c.add_argument("--samples", type=int, default=200)
    # full-size losses are O(100); a 1e-5 step drowns O(1e-6) gradients in roundoff
    c.add_argument("--h", type=float, default=1e-3)
    c.add_argument("--batch", type=int, default=64)
    c.add_argument("--init-std", dest="init_std", type=float, default=0.3)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
