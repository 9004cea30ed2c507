"""Batch pipeline CLI: data generation, the three training phases,
evaluation, and diagnostic suites.

Every run writes a manifest.json (resolved flags, seeds, input hashes)
before any work starts, then its artifacts under --out with fixed names:
train_log.csv, ratios.csv, metrics.csv, *.ckpt. Exit codes: 0 ok, 2 usage,
3 I/O, 4 validation, 5 numerical failure; failures print one
machine-parseable line `error: <kind>: <message>` to stderr.

Flag defaults reproduce the best-reported recipe in miniature: lambda=0.5,
c=0.95 (c=0.96 is the strongest alternative), beta=0.05, alpha=0.5,
batch 20, lr 4e-4 for MLE and 4e-5 for RL.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import dataio as dio
from . import diagnostics
from . import trainer as tr
from .estimators import EstimatorConfig, EstimatorError
from .numkit import NumkitError
from .policies import PolicyError, TransformerPolicy
from .rewards import RewardError
from .oracle import OracleError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
EXIT_NUMERIC = 5

GRADCHECK_TOL = 1e-4


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _hash_inputs(paths: dict[str, Path | None]) -> dict:
    out = {}
    for name, p in paths.items():
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            out[name] = {f.name: _sha256(f) for f in sorted(p.glob("*.jsonl"))}
        elif p.exists():
            out[name] = _sha256(p)
        else:
            raise FileNotFoundError(f"input not found: {p}")
    return out


def write_manifest(args: argparse.Namespace, inputs: dict[str, Path | None],
                   out_dir: Path) -> Path:
    """Resolved config + seeds + input hashes; enough to rerun exactly."""
    resolved = {k: v for k, v in vars(args).items()
                if k not in ("func",) and not k.startswith("_")}
    manifest = {
        "command": args.command,
        "package_version": __version__,
        "args": {k: (str(v) if isinstance(v, Path) else v)
                 for k, v in resolved.items()},
        "inputs": _hash_inputs(inputs),
        "out_dir": str(out_dir),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _write_metrics(out_dir: Path, metrics: dict) -> None:
    dio.write_csv(out_dir / "metrics.csv", ["metric", "value"],
                  sorted(metrics.items()))


def _write_log(out_dir: Path, result: tr.TrainResult) -> None:
    dio.write_csv(out_dir / "train_log.csv", tr.RUN_LOG_HEADER,
                  result.log_rows)


def _train_config(args, **extra) -> tr.TrainConfig:
    kw = dict(seed=args.seed)
    if getattr(args, "batch", None) is not None:
        kw["batch_size"] = args.batch
    kw.update(extra)
    return tr.TrainConfig(**kw).validated()


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise dio.DataError("--n must be >= 1")
    out = Path(args.out)
    write_manifest(args, {}, out)
    n_val = args.n_val if args.n_val is not None else max(1, args.n // 10)
    n_test = args.n_test if args.n_test is not None else max(1, args.n // 10)
    paths = dio.write_dataset(out, args.n, n_val, n_test, args.seed)
    for split, p in paths.items():
        print(f"wrote {split}: {p}")
    return EXIT_OK


def cmd_train_behaviour(args) -> int:
    out = Path(args.out)
    write_manifest(args, {"corpus": Path(args.corpus)}, out)
    splits, vocab = dio.load_dataset(args.corpus)
    cfg = _train_config(args)
    result = tr.train_behaviour(splits, vocab, cfg, epochs=args.epochs,
                                lr=args.lr)
    _write_log(out, result)
    val = splits.get("val") or splits["train"]
    ppl = tr.reconstruction_perplexity(result.policy, val, vocab)
    _write_metrics(out, {"val_reconstruction_perplexity": ppl,
                         "best_epoch": result.best_epoch})
    dio.save_policy(out / "behaviour.ckpt", result.policy,
                    extra_config={"train_seed": args.seed}, vocab=vocab,
                    rng_state=result.rng_states)
    print(f"behaviour checkpoint: {out / 'behaviour.ckpt'} "
          f"(val ppl {ppl:.3f})")
    return EXIT_OK


def cmd_pretrain_mle(args) -> int:
    out = Path(args.out)
    write_manifest(args, {"corpus": Path(args.corpus),
                          "init_ckpt": Path(args.init_ckpt) if args.init_ckpt
                          else None}, out)
    splits, vocab = dio.load_dataset(args.corpus)
    cfg = _train_config(args)
    init_params = None
    if args.init_ckpt:
        init_policy, _, _ = dio.load_policy(args.init_ckpt)
        init_params = tr.params_snapshot(init_policy)
    result = tr.pretrain_mle(splits, vocab, cfg, init_params=init_params,
                             epochs=args.epochs, lr=args.lr)
    _write_log(out, result)
    val = splits.get("val") or splits["train"]
    metrics = tr.evaluate(result.policy, val, vocab, cfg.cider_variant)
    metrics["best_epoch"] = result.best_epoch
    _write_metrics(out, metrics)
    dio.save_policy(out / "target.ckpt", result.policy,
                    extra_config={"train_seed": args.seed}, vocab=vocab,
                    rng_state=result.rng_states)
    print(f"target checkpoint: {out / 'target.ckpt'} "
          f"(val CIDEr {metrics['cider']:.3f})")
    return EXIT_OK


def cmd_train_rl(args) -> int:
    out = Path(args.out)
    write_manifest(args, {"corpus": Path(args.corpus),
                          "target_ckpt": Path(args.target_ckpt),
                          "behaviour_ckpt": Path(args.behaviour_ckpt)}, out)
    splits, vocab = dio.load_dataset(args.corpus)
    est = EstimatorConfig(ris_lambda=args.ris_lambda, trunc_c=args.c,
                          trunc_c_upper=args.c_upper, kl_beta=args.beta,
                          rl_alpha=args.alpha, clamp_mode=args.clamp_mode,
                          ratio_mode=args.ratio_mode).validated()
    cfg = _train_config(args, greedy_from=args.greedy_from)
    target, t_vocab, _ = dio.load_policy(args.target_ckpt)
    behaviour, b_vocab, _ = dio.load_policy(args.behaviour_ckpt)
    if not isinstance(target, TransformerPolicy):
        raise dio.DataError("--target-ckpt does not hold a target policy")
    if t_vocab is not None and t_vocab.tokens != vocab.tokens:
        raise dio.DataError("target checkpoint vocabulary does not match "
                            "the corpus vocabulary")
    result = tr.train_rl(target, behaviour, splits, vocab, est, cfg,
                         epochs=args.epochs, lr=args.lr)
    _write_log(out, result)
    result.trace.to_csv(out / "ratios.csv")
    val = splits.get("val") or splits["train"]
    metrics = tr.evaluate(result.policy, val, vocab, cfg.cider_variant)
    metrics["best_epoch"] = result.best_epoch
    _write_metrics(out, metrics)
    dio.save_policy(out / "target.ckpt", result.policy,
                    extra_config={"train_seed": args.seed}, vocab=vocab,
                    rng_state=result.rng_states)
    print(f"rl checkpoint: {out / 'target.ckpt'} "
          f"(val CIDEr {metrics['cider']:.3f})")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(args.out)
    write_manifest(args, {"corpus": Path(args.corpus),
                          "ckpt": Path(args.ckpt)}, out)
    splits, corpus_vocab = dio.load_dataset(args.corpus)
    if args.split not in splits:
        raise dio.DataError(f"split {args.split!r} not present in {args.corpus}")
    policy, vocab, _ = dio.load_policy(args.ckpt)
    if vocab is None:
        vocab = corpus_vocab
    metrics = tr.evaluate(policy, splits[args.split], vocab)
    _write_metrics(out, metrics)
    for k, v in sorted(metrics.items()):
        print(f"{k} = {v:.6f}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    out = Path(args.out)
    write_manifest(args, {}, out)
    diag_dir = out / "diagnostics"
    if args.suite == "gradcheck":
        ops = diagnostics.run_op_gradchecks(instances_per_op=3,
                                            seed=args.seed)
        pols = diagnostics.run_policy_gradchecks(instances=2,
                                                 seed=args.seed)
        diag_dir.mkdir(parents=True, exist_ok=True)
        lines = [f"{name} {err:.6e}" for name, err in
                 sorted({**ops, **pols}.items())]
        (diag_dir / "gradcheck.txt").write_text("\n".join(lines) + "\n",
                                                encoding="utf-8")
        worst = max({**ops, **pols}.values())
        print(f"gradcheck max rel err: {worst:.3e}")
        if worst >= GRADCHECK_TOL:
            raise NumkitError(
                f"gradient check failed: max rel err {worst:.3e}")
    elif args.suite == "ratios":
        paths = diagnostics.ratio_curve_study(diag_dir, seed=args.seed)
        for name, p in sorted(paths.items()):
            print(f"wrote {name}: {p}")
    elif args.suite == "bias-variance":
        path, rows = diagnostics.bias_variance_study(diag_dir, seed=args.seed)
        print(f"wrote {path}")
        for fixture, mode, bias, var, max_ratio, ok in rows:
            print(f"{fixture}/{mode}: bias={bias:.4f} var={var:.4f} "
                  f"max_ratio={max_ratio:.2f} mean_within_3se={ok}")
    elif args.suite == "wexler":
        path, report = diagnostics.wexler_study(diag_dir)
        print(f"wrote {path}")
        for line in report.lines():
            print(line)
        if report.applicable and not report.satisfied:
            raise OracleError("variance-ratio bound violated on the "
                              "constructed instance")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="offcritic",
        description="Off-policy self-critical sequence training pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True,
                   help="number of training records")
    p.add_argument("--n-val", type=int, default=None,
                   help="validation records (default n/10)")
    p.add_argument("--n-test", type=int, default=None,
                   help="test records (default n/10)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-behaviour",
                       help="fit the GRU image-guided language auto-encoder")
    p.add_argument("--corpus", required=True, help="dataset directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None,
                   help="learning rate (default 4e-4)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_behaviour)

    p = sub.add_parser("pretrain-mle",
                       help="teacher-forced pretraining of the transformer")
    p.add_argument("--corpus", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None,
                   help="learning rate (default 4e-4)")
    p.add_argument("--init-ckpt", default=None,
                   help="optional starting checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_mle)

    p = sub.add_parser("train-rl",
                       help="off-policy self-critical fine-tuning")
    p.add_argument("--corpus", required=True)
    p.add_argument("--target-ckpt", required=True)
    p.add_argument("--behaviour-ckpt", required=True)
    p.add_argument("--lambda", dest="ris_lambda", type=float, default=0.5,
                   help="relative-sampling mix weight (default 0.5)")
    p.add_argument("--c", type=float, default=0.95,
                   help="truncation threshold (default 0.95; 0.96 is the "
                        "best-BLEU alternative)")
    p.add_argument("--c-upper", type=float, default=None,
                   help="upper threshold, only for --clamp-mode both")
    p.add_argument("--beta", type=float, default=0.05,
                   help="KL-control weight (default 0.05)")
    p.add_argument("--alpha", type=float, default=0.5,
                   help="RL share of the combined loss (default 0.5)")
    p.add_argument("--ratio-mode", choices=["is", "ris", "tris"],
                   default="tris")
    p.add_argument("--clamp-mode", choices=["lower", "upper", "both"],
                   default="lower")
    p.add_argument("--greedy-from", choices=["behaviour", "target"],
                   default="target",
                   help="which policy decodes the greedy baseline")
    p.add_argument("--lr", type=float, default=None,
                   help="learning rate (default 4e-5)")
    p.add_argument("--batch", type=int, default=20)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_rl)

    p = sub.add_parser("eval", help="greedy-decode a checkpoint and score it")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=["train", "val", "test"],
                   default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="run a verification suite")
    p.add_argument("--suite", required=True,
                   choices=["ratios", "bias-variance", "wexler", "gradcheck"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)
    return parser


_ERROR_KINDS = [
    ((FileNotFoundError, IsADirectoryError, PermissionError), "io", EXIT_IO),
    ((dio.DataError, EstimatorError, tr.TrainerError, PolicyError,
      RewardError, OracleError, ValueError), "validation", EXIT_VALIDATION),
    ((tr.NumericalError, NumkitError, FloatingPointError, OverflowError),
     "numerical", EXIT_NUMERIC),
]


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else EXIT_OK
    try:
        return args.func(args)
    except Exception as exc:  # mapped to the documented exit codes
        for types, kind, code in _ERROR_KINDS:
            if isinstance(exc, types):
                print(f"error: {kind}: {exc}", file=sys.stderr)
                return code
        print(f"error: internal: {exc}", file=sys.stderr)
        raise


if __name__ == "__main__":
    sys.exit(main())
