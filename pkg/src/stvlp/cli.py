"""Command-line interface.

One executable, one subcommand per pipeline stage. Every command exits 0 on
success and nonzero with a single-line reason on stderr otherwise.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import evals, synthetic
from .corpus import build_sequences, ingest_manifest, write_sequence_manifest
from .kvconfig import load_dataclass
from .trainer import GRAD_CHECK_LOSSES, TrainConfig, grad_check, train


def _cmd_build_sequences(args: argparse.Namespace) -> int:
    records = ingest_manifest(args.manifest)
    sequences = build_sequences(records, target_len=args.len)
    write_sequence_manifest(args.out, sequences)
    n_full = sum(1 for s in sequences if s.length == args.len)
    print(f"wrote {len(sequences)} sequences ({n_full} full-length) to {args.out}")
    return 0


def _cmd_gen_synthetic(args: argparse.Namespace) -> int:
    spec = load_dataclass(synthetic.GenSpec, args.spec)
    summary = synthetic.generate_corpus(spec, args.out, seed=args.seed)
    print(
        f"generated {summary['n_studies']} studies over {summary['n_patients']} patients "
        f"({summary['n_singletons']} singletons) in {args.out}"
    )
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = load_dataclass(TrainConfig, args.config)
    result = train(cfg, args.corpus, args.out, log_fn=print)
    print(f"trained {result.steps} steps; checkpoint at {result.checkpoint_path}")
    return 0


def _cmd_eval_temporal(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = evals.temporal_probe(args.ckpt, args.corpus, folds=args.folds, seed=args.seed)
    evals.save_probe_csv(result, out / "probe_temporal.csv")
    n_rows = evals.dump_beta_csv(args.ckpt, args.corpus, out / "beta_dump.csv")
    print(
        f"temporal probe: accuracy={result.accuracy:.4f} (+/- {result.accuracy_std:.4f}, "
        f"{args.folds} folds); {n_rows} beta rows dumped"
    )
    return 0


def _cmd_eval_sentence(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = evals.read_sentence_pairs(args.pairs)
    result = evals.sentence_similarity_eval(args.ckpt, pairs, seed=args.seed)
    evals.save_probe_csv(result, out / "probe_sentence.csv")
    auroc_s = "n/a" if result.auroc is None else f"{result.auroc:.4f}"
    print(f"sentence probe: accuracy={result.accuracy:.4f} auroc={auroc_s}")
    return 0


def _cmd_eval_zeroshot(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = evals.zeroshot_eval(args.ckpt, args.corpus, args.prompts)
    evals.save_probe_csv(result, out / "probe_zeroshot.csv")
    auroc_s = "n/a" if result.auroc is None else f"{result.auroc:.4f}"
    print(
        f"zero-shot: accuracy={result.accuracy:.4f} f1={result.f1:.4f} auroc={auroc_s}"
    )
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    result = grad_check(args.loss, seed=args.seed, eps=args.eps)
    status = "OK" if result.max_rel_err < args.tol else "FAIL"
    print(
        f"gradcheck {result.loss_name}: max_rel_err={result.max_rel_err:.3e} "
        f"at {result.worst_param} over {result.n_elements} elements [{status}]"
    )
    return 0 if status == "OK" else 1


def _cmd_report(args: argparse.Namespace) -> int:
    written = evals.emit_report(args.in_dir, args.out)
    print(f"report: wrote {', '.join(str(p) for p in written)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stvlp",
        description="spatiotemporal multi-view image/text pretraining pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-sequences", help="chunk a manifest into study sequences")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--len", type=int, default=4)
    p.set_defaults(fn=_cmd_build_sequences)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic corpus")
    p.add_argument("--spec", required=True, help="key=value GenSpec file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(fn=_cmd_gen_synthetic)

    p = sub.add_parser("train", help="pretrain on a corpus directory")
    p.add_argument("--config", required=True, help="key=value TrainConfig file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval-temporal", help="trend probe over consecutive-study features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--folds", type=int, choices=(5, 10), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results")
    p.set_defaults(fn=_cmd_eval_temporal)

    p = sub.add_parser("eval-sentence", help="paraphrase/contradiction similarity probe")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results")
    p.set_defaults(fn=_cmd_eval_sentence)

    p = sub.add_parser("eval-zeroshot", help="prompt-prototype severity classification")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--out", default="results")
    p.set_defaults(fn=_cmd_eval_zeroshot)

    p = sub.add_parser("gradcheck", help="finite-difference check of a loss gradient")
    p.add_argument("--loss", choices=GRAD_CHECK_LOSSES, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("report", help="bundle probe outputs into report files")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # single-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
