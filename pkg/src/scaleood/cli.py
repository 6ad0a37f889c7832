from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import load_config
from .errors import ConfigError, DegenerateSampleError, ScaleOodError, TrainingError
from .ingest import (
    FeatureSet,
    atomic_write_text,
    load_manifest,
    load_manifest_preacts,
    load_manifest_sets,
    write_features,
    write_head,
)
from .ish import IshTrainConfig, PRETRAIN_CONFIG, compare_modes, evaluate_model, load_model, pretrain, save_model, train
from .metrics import EvalReport, EvalRow, activation_stats, chi_square_gaussian_p, evaluate, sweep_percentile
from .scoring import SCORES, ScoringConfig, pipeline_scores
from .shaping import METHODS, ShapingConfig, react_threshold
from .synth import BlobSpec, DEFAULT_ID_PARAMS, DEFAULT_OOD_PARAMS, SynthSpec, gen_blob_dataset, gen_linear_head, gen_rectified_features
from .theory import GaussianParams, theory_table

logger = logging.getLogger("scaleood")

DEFAULT_P_GRID = "0.65,0.70,0.75,0.80,0.85"
THEORY_P_GRID = "0.5,0.65,0.75,0.85,0.95"


def _emit(text: str, out: Optional[str]) -> None:
    if out and out != "-":
        atomic_write_text(out, text)
        logger.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v: Optional[float]) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return f"{v:.10g}"


def _floats(value, flag: str) -> List[float]:
    """Accept '0.5,0.6' from the command line or a list from a config file."""
    if isinstance(value, (int, float)):
        return [float(value)]
    items = value if isinstance(value, (list, tuple)) else str(value).split(",")
    try:
        out = [float(v) for v in items if str(v).strip()]
    except ValueError:
        raise ConfigError(f"{flag}: expected comma-separated numbers, got '{value}'.")
    if not out:
        raise ConfigError(f"{flag}: empty list.")
    return out


def _gaussian(value, flag: str) -> GaussianParams:
    vals = _floats(value, flag)
    if len(vals) != 2:
        raise ConfigError(f"{flag}: expected 'mu,sigma', got '{value}'.")
    return GaussianParams(vals[0], vals[1])


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required.")
    return value


def parse_method(
    spec: str, p: float, temperature: float = 1.0, clip: Optional[float] = None
) -> Tuple[str, ShapingConfig, ScoringConfig]:
    """'scale+ebo' -> (name, shaping, scoring). A bare score means identity shaping; a bare method scores with ebo."""
    parts = [s.strip() for s in spec.split("+") if s.strip()]
    if len(parts) == 1:
        if parts[0] in SCORES:
            parts = ["identity", parts[0]]
        else:
            parts = [parts[0], "ebo"]
    if len(parts) != 2:
        raise ConfigError(f"cannot parse method '{spec}'; use SHAPING+SCORE, e.g. scale+ebo.")
    method, score = parts
    if method not in METHODS:
        raise ConfigError(f"Unknown shaping method '{method}'. Supported: {', '.join(METHODS)}.")
    name = score if method == "identity" else f"{method}+{score}"
    return name, ShapingConfig(method, p, clip if method == "react" else None), ScoringConfig(score, temperature)


def _react_clip(sets: Dict[str, FeatureSet], percentile: float) -> float:
    pool = [fs.data for fs in sets.values() if fs.split == "validation"]
    if not pool:
        logger.warning("no validation split in the manifest; ReAct threshold taken from the id split")
        pool = [fs.data for fs in sets.values() if fs.split == "id"]
    c = react_threshold(np.concatenate(pool, axis=0), percentile)
    logger.info("ReAct clip threshold at percentile %g: %g", percentile, c)
    return c


def _needs_react(specs: Sequence[str]) -> bool:
    return any(s.split("+")[0].strip() == "react" for s in specs)


def _load(args: argparse.Namespace) -> Tuple[Any, Dict[str, FeatureSet]]:
    manifest = load_manifest(_require(args.manifest, "--manifest"))
    return load_manifest_sets(manifest, args.threads)


def _id_and_ood(sets: Dict[str, FeatureSet]) -> Tuple[FeatureSet, List[FeatureSet]]:
    id_set = next(fs for fs in sets.values() if fs.split == "id")
    ood = [fs for fs in sets.values() if fs.split in ("ood-near", "ood-far")]
    if not ood:
        raise ConfigError("manifest needs at least one ood-near or ood-far entry.")
    return id_set, ood


def _report_text(report: EvalReport, fmt: str) -> str:
    return report.to_json() if fmt == "json" else report.to_csv()


# ---------------------------------------------------------------------------
# commands


def cmd_score(args: argparse.Namespace) -> int:
    """Per-sample scores for every manifest entry."""
    head, sets = _load(args)
    clip = _react_clip(sets, args.clip_percentile) if args.method == "react" else None
    shaping = ShapingConfig(args.method, args.percentile, clip)
    scoring = ScoringConfig(args.score, args.temperature)

    def _one(fs: FeatureSet):
        return fs, pipeline_scores(fs, head, shaping, scoring)

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        results = list(pool.map(_one, sets.values()))

    rows: List[Dict[str, Any]] = []
    for fs, (scores, factors, degenerate) in results:
        bad = np.flatnonzero(degenerate)
        if bad.size:
            if args.strict:
                raise DegenerateSampleError(f"'{fs.tag}': Q_p = 0 or exp(r) overflows", int(bad[0]))
            logger.warning("%s: %d degenerate samples (indices %s)", fs.tag, bad.size, bad[:10].tolist())
        for i in range(fs.n_samples):
            # identity/prune/react never flag rows, but r is still undefined when Q_p = 0
            rows.append({
                "tag": fs.tag,
                "split": fs.split,
                "index": i,
                "score": None if degenerate[i] or not np.isfinite(scores[i]) else float(scores[i]),
                "r": None if degenerate[i] or not np.isfinite(factors[i]) else float(factors[i]),
                "degenerate": bool(degenerate[i]),
            })
    if args.format == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        text = _csv_text(
            ["tag", "split", "index", "score", "r", "degenerate"],
            [[r["tag"], r["split"], r["index"], _num(r["score"]), _num(r["r"]), int(r["degenerate"])] for r in rows],
        )
    _emit(text, args.out)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    """FPR@95 and AUROC per (method, OOD dataset); one row per p with --p-grid."""
    head, sets = _load(args)
    id_set, ood_sets = _id_and_ood(sets)
    specs = [s.strip() for s in (args.methods if isinstance(args.methods, list) else args.methods.split(",")) if s.strip()]
    if not specs:
        raise ConfigError("--methods is empty.")
    clip = _react_clip(sets, args.clip_percentile) if _needs_react(specs) else None
    grid = _floats(args.p_grid, "--p-grid") if args.p_grid is not None else None
    rows: List[EvalRow] = []
    for spec in specs:
        for p in grid or [args.percentile]:
            name, shaping, scoring = parse_method(spec, p, args.temperature, clip)
            rows.extend(evaluate(
                name, id_set, ood_sets, head, shaping, scoring,
                threads=args.threads, percentile=float(p) if grid else None,
            ))
    report = EvalReport(rows, {
        "manifest": str(args.manifest),
        "methods": specs,
        "p": None if grid else args.percentile,
        "p_grid": grid,
        "temperature": args.temperature,
        "react_clip": clip,
    })
    _emit(_report_text(report, args.format), args.out)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    """Percentile sweep of one shaping method."""
    head, sets = _load(args)
    id_set, ood_sets = _id_and_ood(sets)
    if args.method not in ("scale", "ash_s", "prune"):
        raise ConfigError(f"sweep needs a percentile-based method (scale, ash_s, prune), got '{args.method}'.")
    report = sweep_percentile(
        id_set, ood_sets, head, args.method, _floats(args.p_grid, "--p-grid"),
        ScoringConfig(args.score, args.temperature), threads=args.threads,
    )
    _emit(_report_text(report, args.format), args.out)
    return 0


THEORY_COLUMNS = ("p", "C", "beta_id", "beta_ood", "beta_approx_id", "beta_approx_ood", "mc_qp_ratio_id", "mc_qp_ratio_ood")


def cmd_theory(args: argparse.Namespace) -> int:
    """C(p), beta and Monte Carlo Q_p/Q curves over a p grid."""
    rows = theory_table(
        _floats(args.p_grid, "--p-grid"),
        _gaussian(args.id_params, "--id-params"),
        _gaussian(args.ood_params, "--ood-params"),
        D=args.dim, n_samples=args.n_samples, seed=args.seed, threads=args.threads,
        monte_carlo=not args.no_mc,
    )
    if args.format == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        text = _csv_text(THEORY_COLUMNS, [[_num(r[c]) for c in THEORY_COLUMNS] for r in rows])
    _emit(text, args.out)
    return 0


STATS_COLUMNS = (
    "tag", "n_samples", "dim", "mean_mu", "mean_var", "mean_ratio", "ratio_se", "n_flagged",
    "chi2_mean_p", "chi2_reject_rate",
)


def cmd_stats(args: argparse.Namespace) -> int:
    """Pre-activation mean/std aggregates and chi-square normality per dataset."""
    manifest = load_manifest(_require(args.manifest, "--manifest"))
    if not manifest.preacts:
        raise ConfigError("manifest has no 'preacts' entries.")
    preacts = load_manifest_preacts(manifest, args.threads)

    def _one(pre):
        st = activation_stats(pre)
        pvals = np.array([chi_square_gaussian_p(row, args.n_bins) for row in pre.data])
        return {
            "tag": pre.tag,
            "n_samples": pre.n_samples,
            "dim": pre.dim,
            "mean_mu": st.mean_mu,
            "mean_var": st.mean_var,
            "mean_ratio": st.mean_ratio,
            "ratio_se": st.ratio_se,
            "n_flagged": st.n_flagged,
            "chi2_mean_p": float(pvals.mean()),
            "chi2_reject_rate": float(np.mean(pvals < args.alpha)),
        }

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        rows = list(pool.map(_one, preacts.values()))
    if args.format == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        text = _csv_text(STATS_COLUMNS, [[r[c] if isinstance(r[c], (int, str)) else _num(r[c]) for c in STATS_COLUMNS] for r in rows])
    _emit(text, args.out)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    """Write a synthetic rectified-Gaussian ID/OOD benchmark with a random head and manifest."""
    out = Path(_require(args.out, "--out"))
    id_params = _gaussian(args.id_params, "--id-params")
    ood_params = _gaussian(args.ood_params, "--ood-params")
    seed = args.seed
    parts = [
        ("id", "synthetic-id", id_params, args.n_samples, seed),
        ("ood-near", "synthetic-ood", ood_params, args.n_samples, seed + 1),
    ]
    if args.n_validation > 0:
        parts.append(("validation", "synthetic-val", id_params, args.n_validation, seed + 2))
    entries, preacts = [], []
    generated = []
    for split, tag, params, n, s in parts:
        post, pre = gen_rectified_features(SynthSpec(params, True, n, args.dim, s), tag=tag, split=split, threads=args.threads)
        generated.append((post, pre))
    head = gen_linear_head(args.classes, args.dim, seed + 3, bias_scale=args.bias_scale)

    for post, pre in generated:
        write_features(post, out / f"{post.tag}.oodf")
        entries.append({"path": f"{post.tag}.oodf", "tag": post.tag, "split": post.split})
        if post.split != "validation":
            write_features(pre, out / f"{post.tag}.pre.oodf")
            preacts.append({"path": f"{post.tag}.pre.oodf", "tag": post.tag, "split": post.split})
    write_head(head, out / "head.oodh")
    manifest = {"entries": entries, "head": "head.oodh", "preacts": preacts}
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    logger.info("wrote synthetic benchmark to %s", out)
    return 0


def _blob_spec(args: argparse.Namespace, seed: int) -> BlobSpec:
    return BlobSpec(
        n_classes=args.n_classes,
        id_classes=tuple(range(args.id_classes)),
        dim=args.input_dim,
        samples_per_class=args.samples_per_class,
        seed=seed,
    )


def _finetune_config(args: argparse.Namespace, seed: int) -> IshTrainConfig:
    return IshTrainConfig(
        percentile=args.percentile,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        weight_decay=args.weight_decay,
        momentum=args.momentum,
        seed=seed,
    )


def _pretrain_config(args: argparse.Namespace, seed: int) -> IshTrainConfig:
    return IshTrainConfig(**{
        **asdict(PRETRAIN_CONFIG),
        "lr": args.pretrain_lr,
        "epochs": args.pretrain_epochs,
        "batch_size": args.batch_size,
        "seed": seed,
    })


def cmd_ish(args: argparse.Namespace) -> int:
    """Fine-tune the blob toy model in plain or ISH mode (or compare both over seeds)."""
    out = Path(_require(args.out, "--out"))
    if args.compare:
        seeds = [int(s) for s in _floats(args.seeds, "--seeds")]
        result = compare_modes(
            _blob_spec(args, args.seed), _finetune_config(args, args.seed), seeds,
            hidden=args.hidden, pretrain_config=_pretrain_config(args, args.seed),
        )
        atomic_write_text(out / "compare.json", json.dumps(result, indent=2) + "\n")
        logger.info("wrote %s", out / "compare.json")
        return 0

    data = gen_blob_dataset(_blob_spec(args, args.seed))
    pre_log = None
    if args.init_extractor or args.init_head:
        model = load_model(_require(args.init_extractor, "--init-extractor"), _require(args.init_head, "--init-head"))
    else:
        model, log = pretrain(
            data.train, args.id_classes,
            hidden=args.hidden, config=_pretrain_config(args, args.seed), eval_set=data.id_test,
        )
        pre_log = log.to_dict()
    try:
        model, log = train(model, data.train, _finetune_config(args, args.seed), args.mode, eval_set=data.id_test)
    except TrainingError as e:
        atomic_write_text(out / "training_log.json", json.dumps({"mode": args.mode, "error": str(e), "epochs": e.log}, indent=2) + "\n")
        raise
    save_model(model, out / "extractor.oodm", out / "head.oodh")
    record = {
        **log.to_dict(),
        "pretrain": pre_log,
        "evaluation": evaluate_model(model, data.id_test, data.ood_test, args.percentile),
    }
    atomic_write_text(out / "training_log.json", json.dumps(record, indent=2) + "\n")
    logger.info("wrote checkpoint and training log to %s", out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _common() -> argparse.ArgumentParser:
    c = argparse.ArgumentParser(add_help=False)
    c.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")
    c.add_argument("--threads", type=int, default=1, help="Worker threads (default: 1)")
    c.add_argument("-o", "--out", help="Output path ('-' or omitted for stdout); a directory for synth/ish")
    c.add_argument("--format", choices=["csv", "json"], default="csv", help="Output format (default: csv)")
    c.add_argument("--config", help="YAML/JSON file supplying flag defaults")
    c.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    c.add_argument("-q", "--quiet", action="store_true", help="Warnings only")
    return c


def _shaping_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("-p", "--percentile", type=float, default=0.85, help="Pruning percentile p (default: 0.85)")
    sp.add_argument("--clip-percentile", type=float, default=0.90,
                    help="Percentile of pooled validation activations used as the ReAct clip (default: 0.90)")
    sp.add_argument("-T", "--temperature", type=float, default=1.0, help="Score temperature (default: 1)")


def build_parser() -> Tuple[argparse.ArgumentParser, Any]:
    p = argparse.ArgumentParser(prog="scaleood", description="Post-hoc OOD detection by activation scaling")
    sub = p.add_subparsers(dest="cmd", required=True)
    common = _common()

    # score
    sc = sub.add_parser("score", parents=[common], help="Per-sample OOD scores for a manifest")
    sc.add_argument("-m", "--manifest", help="Dataset manifest (JSON)")
    sc.add_argument("--method", choices=list(METHODS), default="scale", help="Shaping method (default: scale)")
    sc.add_argument("--score", choices=list(SCORES), default="ebo", help="Score (default: ebo)")
    _shaping_flags(sc)
    sc.add_argument("--strict", action="store_true", help="Fail on the first degenerate sample")
    sc.set_defaults(func=cmd_score)

    # eval
    ev = sub.add_parser("eval", parents=[common], help="FPR@95 / AUROC report")
    ev.add_argument("-m", "--manifest", help="Dataset manifest (JSON)")
    ev.add_argument("--methods", default="ebo,scale+ebo", help="Comma-separated SHAPING+SCORE list (default: ebo,scale+ebo)")
    ev.add_argument("--p-grid", help="Comma-separated percentiles; one row per p")
    _shaping_flags(ev)
    ev.set_defaults(func=cmd_eval)

    # sweep
    sw = sub.add_parser("sweep", parents=[common], help="Percentile sweep of one method")
    sw.add_argument("-m", "--manifest", help="Dataset manifest (JSON)")
    sw.add_argument("--method", choices=["scale", "ash_s", "prune"], default="scale", help="Shaping method (default: scale)")
    sw.add_argument("--score", choices=list(SCORES), default="ebo", help="Score (default: ebo)")
    sw.add_argument("--p-grid", default=DEFAULT_P_GRID, help=f"Percentiles (default: {DEFAULT_P_GRID})")
    sw.add_argument("-T", "--temperature", type=float, default=1.0, help="Score temperature (default: 1)")
    sw.set_defaults(func=cmd_sweep)

    # theory
    th = sub.add_parser("theory", parents=[common], help="Rectified-Gaussian curves over p")
    th.add_argument("--p-grid", default=THEORY_P_GRID, help=f"Percentiles (default: {THEORY_P_GRID})")
    th.add_argument("--id-params", default=f"{DEFAULT_ID_PARAMS.mu},{DEFAULT_ID_PARAMS.sigma}", help="ID 'mu,sigma'")
    th.add_argument("--ood-params", default=f"{DEFAULT_OOD_PARAMS.mu},{DEFAULT_OOD_PARAMS.sigma}", help="OOD 'mu,sigma'")
    th.add_argument("--dim", type=int, default=2048, help="Feature dimension for Monte Carlo (default: 2048)")
    th.add_argument("--n-samples", type=int, default=1000, help="Monte Carlo samples per p (default: 1000)")
    th.add_argument("--no-mc", action="store_true", help="Closed forms only")
    th.set_defaults(func=cmd_theory)

    # stats
    st = sub.add_parser("stats", parents=[common], help="Pre-activation statistics and chi-square normality")
    st.add_argument("-m", "--manifest", help="Dataset manifest with 'preacts' entries")
    st.add_argument("--n-bins", type=int, default=10, help="Chi-square bins (default: 10)")
    st.add_argument("--alpha", type=float, default=0.05, help="Rejection level for the reject rate (default: 0.05)")
    st.set_defaults(func=cmd_stats)

    # synth
    sy = sub.add_parser("synth", parents=[common], help="Write a synthetic benchmark directory")
    sy.add_argument("--n-samples", type=int, default=1000, help="Samples per ID/OOD set (default: 1000)")
    sy.add_argument("--n-validation", type=int, default=500, help="Validation ID samples (default: 500, 0 to skip)")
    sy.add_argument("--dim", type=int, default=2048, help="Feature dimension (default: 2048)")
    sy.add_argument("--classes", type=int, default=100, help="Head classes K (default: 100)")
    sy.add_argument("--bias-scale", type=float, default=0.0, help="Std of random head bias (default: 0)")
    sy.add_argument("--id-params", default=f"{DEFAULT_ID_PARAMS.mu},{DEFAULT_ID_PARAMS.sigma}", help="ID 'mu,sigma'")
    sy.add_argument("--ood-params", default=f"{DEFAULT_OOD_PARAMS.mu},{DEFAULT_OOD_PARAMS.sigma}", help="OOD 'mu,sigma'")
    sy.set_defaults(func=cmd_synth)

    # ish
    ish = sub.add_parser("ish", parents=[common], help="Toy plain/ISH fine-tuning on Gaussian blobs")
    ish.add_argument("--mode", choices=["plain", "ish"], default="ish", help="Fine-tuning mode (default: ish)")
    ish.add_argument("-p", "--percentile", type=float, default=0.85, help="ISH percentile (default: 0.85)")
    ish.add_argument("--lr", type=float, default=0.003, help="Fine-tune learning rate (default: 0.003)")
    ish.add_argument("--epochs", type=int, default=10, help="Fine-tune epochs (default: 10)")
    ish.add_argument("--batch-size", type=int, default=64, help="Batch size (default: 64)")
    ish.add_argument("--weight-decay", type=float, default=5e-6, help="Weight decay (default: 5e-6)")
    ish.add_argument("--momentum", type=float, default=0.9, help="SGD momentum (default: 0.9)")
    ish.add_argument("--hidden", type=int, default=128, help="Penultimate width (default: 128)")
    ish.add_argument("--pretrain-lr", type=float, default=PRETRAIN_CONFIG.lr, help="Pretraining learning rate")
    ish.add_argument("--pretrain-epochs", type=int, default=PRETRAIN_CONFIG.epochs, help="Pretraining epochs")
    ish.add_argument("--n-classes", type=int, default=10, help="Blob classes (default: 10)")
    ish.add_argument("--id-classes", type=int, default=7, help="First N classes are ID (default: 7)")
    ish.add_argument("--input-dim", type=int, default=32, help="Blob dimension (default: 32)")
    ish.add_argument("--samples-per-class", type=int, default=500, help="Blob samples per class (default: 500)")
    ish.add_argument("--init-extractor", help="Start from this extractor checkpoint instead of pretraining")
    ish.add_argument("--init-head", help="Start from this head checkpoint instead of pretraining")
    ish.add_argument("--compare", action="store_true", help="Fine-tune both modes over --seeds and write compare.json")
    ish.add_argument("--seeds", default="0,1,2,3,4", help="Seeds for --compare (default: 0,1,2,3,4)")
    ish.set_defaults(func=cmd_ish)

    return p, sub


def apply_config(sp: argparse.ArgumentParser, cfg: Dict[str, Any]) -> None:
    """Install config values as defaults of subparser `sp`; explicit flags still win."""
    dests = {a.dest for a in sp._actions} - {"help", "config", "func"}
    unknown = sorted(set(cfg) - dests)
    if unknown:
        raise ConfigError(f"unknown config key(s) for '{sp.prog}': {', '.join(unknown)}")
    sp.set_defaults(**cfg)


def _setup_logging(verbose: bool, quiet: bool) -> None:
    root = logging.getLogger("scaleood")
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("[scaleood] %(levelname)s %(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO)


def main(argv: list[str] | None = None) -> int:
    p, sub = build_parser()
    args = p.parse_args(argv)
    try:
        if args.config:
            apply_config(sub.choices[args.cmd], load_config(args.config))
            args = p.parse_args(argv)
        _setup_logging(args.verbose, args.quiet)
        return args.func(args)
    except ScaleOodError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
