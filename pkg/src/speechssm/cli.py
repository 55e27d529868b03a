"""Single command-line entry point.

Subcommands: gen-corpus, pretrain, finetune, analyze, superb-score,
bench, ttest. Every run writes a manifest (config snapshot plus artifact
hashes) into its output directory. SSLAB_SEED overrides config seeds.

Exit codes: 0 success, 2 usage, 3 missing input, 4 anchor error,
5 predicted OOM, 6 numeric error, 7 config/shape error, 8 degenerate
data or infeasible request.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, asr, bench, blocks, corpus, pretrain
from .errors import (AnchorError, ConfigError, DegenerateDataError,
                     InfeasibleAlignmentError, InvalidLengthError, NumericError,
                     PredictedOomError, ShapeError, TrainingDivergenceError)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_ANCHOR = 4
EXIT_PREDICTED_OOM = 5
EXIT_NUMERIC = 6
EXIT_CONFIG = 7
EXIT_DEGENERATE = 8

_ERROR_CODES = (
    (AnchorError, EXIT_ANCHOR),
    (PredictedOomError, EXIT_PREDICTED_OOM),
    (NumericError, EXIT_NUMERIC),
    ((ConfigError, ShapeError), EXIT_CONFIG),
    ((DegenerateDataError, InfeasibleAlignmentError, TrainingDivergenceError),
     EXIT_DEGENERATE),
    ((FileNotFoundError, InvalidLengthError), EXIT_MISSING_INPUT),
)

CONFIG_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Config files and manifests
# ---------------------------------------------------------------------------


def load_run_config(path):
    with open(path) as fh:
        raw = json.load(fh)
    version = raw.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported run-config schema version {version}")
    if "encoder" not in raw:
        raise ConfigError(f"{path}: missing 'encoder' section")
    enc = dict(raw["encoder"])
    if isinstance(enc.get("preset"), str):
        cfg = blocks.EncoderConfig.preset(enc.pop("preset"), enc.pop("block_kind"))
        if enc:
            cfg = blocks.EncoderConfig.from_dict({**cfg.to_dict(), **enc})
    else:
        enc.setdefault("schema_version", blocks.SCHEMA_VERSION)
        cfg = blocks.EncoderConfig.from_dict(enc)
    return raw, cfg


def resolve_seed(raw_config, override=None):
    env = os.environ.get("SSLAB_SEED")
    if env is not None:
        return int(env)
    if override is not None:
        return int(override)
    return int(raw_config.get("seed", 0))


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir, command, config_snapshot, artifacts):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config_snapshot,
        "artifacts": {str(p): sha256_file(p) for p in artifacts if Path(p).exists()},
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return out_dir / "manifest.json"


def _schedule_from(raw, overrides=None):
    sched = dict(raw.get("schedule", {}))
    sched.update(overrides or {})
    sched.setdefault("total_steps", 100)
    return pretrain.TrainSchedule(**sched)


def _mask_from(raw):
    return pretrain.MaskSpec(**raw.get("mask", {}))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args):
    ids = corpus.generate_synthetic_corpus(
        n_utts=args.n_utts, n_phones=args.n_phones, n_speakers=args.n_speakers,
        seed=args.seed, out_dir=args.out, min_frames=args.min_frames,
        max_frames=args.max_frames, utts_per_doc=args.utts_per_doc)
    artifacts = [Path(args.out) / f"{i}.wav" for i in ids]
    snapshot = {k: v for k, v in vars(args).items() if k != "fn"}
    write_manifest(args.out, "gen-corpus", snapshot | {"n_written": len(ids)},
                   artifacts[:16])
    print(f"wrote {len(ids)} utterances to {args.out}")
    return EXIT_OK


def cmd_pretrain(args):
    raw, cfg = load_run_config(args.config)
    seed = resolve_seed(raw)
    out_ckpt = Path(args.out)
    out_dir = out_ckpt.parent if out_ckpt.parent != Path("") else Path(".")
    pre = dict(raw.get("pretrain", {}))
    settings = pretrain.PretrainSettings(
        encoder=cfg,
        schedule=_schedule_from(raw, {"peak_lr": raw.get("schedule", {}).get(
            "peak_lr", pretrain.default_peak_lr(cfg))}),
        mask=_mask_from(raw),
        n_codes=pre.get("n_codes", 100),
        proj_dim=pre.get("proj_dim", 64),
        target_layer=pre.get("target_layer", 6),
        iteration_steps=tuple(pre.get("iteration_steps", (100, 100))),
        seed=seed,
        tau=pre.get("tau", 0.1),
    )
    items = corpus.load_corpus(args.corpus, with_labels=False)
    paths = pretrain.pretrain_pipeline(items, settings, out_dir)
    final_cfg, final_weights, meta = blocks.load_checkpoint(paths[-1])
    blocks.save_checkpoint(out_ckpt, final_cfg, final_weights, meta)
    write_manifest(out_dir, "pretrain", {"run_config": raw, "seed": seed},
                   list(paths) + [out_ckpt])
    print(f"pretrained {len(paths)} iteration(s); final checkpoint at {out_ckpt}")
    return EXIT_OK


def cmd_finetune(args):
    cfg, weights, meta = blocks.load_checkpoint(args.ckpt)
    train_items = corpus.load_corpus(args.data)
    eval_items = corpus.load_corpus(args.eval_data) if args.eval_data else train_items
    schedule = pretrain.TrainSchedule(
        total_steps=args.steps, peak_lr=args.peak_lr, batch_seconds=args.batch_seconds)
    seed = int(os.environ.get("SSLAB_SEED", args.seed))
    weights, vocab, rows, mean = asr.finetune(
        cfg, weights, train_items, eval_items, args.mode, schedule, seed=seed,
        budget_bytes=args.budget_bytes, crop_seconds=args.crop_seconds,
        max_doc_seconds=args.max_doc_seconds, workers=args.workers)
    out_ckpt = Path(args.out)
    blocks.save_checkpoint(out_ckpt, cfg, weights,
                           meta={**meta, "vocab": vocab, "mode": args.mode})
    report_path = out_ckpt.with_suffix(".wer.csv")
    asr.write_wer_report(report_path, rows, mean)
    out_dir = out_ckpt.parent if out_ckpt.parent != Path("") else Path(".")
    write_manifest(out_dir, "finetune",
                   {"mode": args.mode, "steps": args.steps, "seed": seed},
                   [out_ckpt, report_path])
    print(f"fine-tuned ({args.mode}); mean WER {mean:.4f}; report at {report_path}")
    return EXIT_OK


def cmd_analyze(args):
    cfg, weights, _ = blocks.load_checkpoint(args.ckpt)
    items = corpus.load_corpus(args.corpus)
    phones_dir = Path(args.phones) if args.phones else Path(args.corpus)
    phone_labels = {}
    for it in items:
        phn = phones_dir / f"{it.utt_id}.phn"
        if not phn.exists():
            raise FileNotFoundError(f"missing phone labels {phn}")
        ids = np.array([int(line) for line in phn.read_text().split()], dtype=np.int64)
        phone_labels[it.utt_id] = analysis.FrameLabels(ids, "phone")
    embeddings = {}
    for spec_str in args.embed or []:
        name, _, path = spec_str.partition("=")
        if not path:
            raise ConfigError(f"--embed expects name=path, got {spec_str!r}")
        from . import numerics as nm
        by_id = {}
        for it in items:
            f = Path(path) / f"{it.utt_id}.sslt"
            if not f.exists():
                raise FileNotFoundError(f"missing embedding {f}")
            by_id[it.utt_id] = nm.load_tensor(f)
        embeddings[name] = by_id
    ks = tuple(int(k) for k in args.k.split(","))
    seed = int(os.environ.get("SSLAB_SEED", args.seed))
    rows = analysis.layerwise_report(
        cfg, weights, [(it.utt_id, it.wave) for it in items], phone_labels,
        embeddings, ks=ks, seed=seed, workers=args.workers)
    analysis.write_report_csv(args.out, rows)
    out_dir = Path(args.out).parent if Path(args.out).parent != Path("") else Path(".")
    write_manifest(out_dir, "analyze", {"ks": list(ks), "seed": seed}, [args.out])
    print(f"wrote layer-wise report ({len(rows)} layers) to {args.out}")
    return EXIT_OK


def cmd_superb_score(args):
    try:
        anchors = analysis.read_anchor_table(args.anchors)
    except FileNotFoundError as exc:
        raise AnchorError(f"anchors file not found: {args.anchors}") from exc
    metrics = analysis.read_metric_table(args.metrics)
    score = analysis.superb_score(metrics, anchors)
    print(f"{score:.2f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(f"superb_score,{score!r}\n")
    return EXIT_OK


def cmd_bench(args):
    configs = []
    for path in args.configs.split(","):
        raw, cfg = load_run_config(path)
        configs.append((raw.get("name", Path(path).stem), cfg))
    lengths = tuple(float(x) for x in args.lengths.split(","))
    seed = int(os.environ.get("SSLAB_SEED", args.seed))
    result = bench.sweep(configs, lengths=lengths, budget_bytes=args.budget_bytes,
                         runs=args.runs, seed=seed, time_runs=not args.no_time)
    result.to_csv(args.out)
    artifacts = [args.out]
    if args.plot:
        bench.write_sweep_svg(args.plot, result)
        artifacts.append(args.plot)
    out_dir = Path(args.out).parent if Path(args.out).parent != Path("") else Path(".")
    write_manifest(out_dir, "bench",
                   {"lengths": list(lengths), "budget_bytes": args.budget_bytes,
                    "runs": args.runs, "seed": seed}, artifacts)
    print(f"swept {len(configs)} config(s) x {len(lengths)} lengths -> {args.out}")
    return EXIT_OK


def cmd_ttest(args):
    rows_a, _ = asr.read_wer_report(args.a)
    rows_b, _ = asr.read_wer_report(args.b)
    by_id_a = dict(rows_a)
    by_id_b = dict(rows_b)
    shared = sorted(set(by_id_a) & set(by_id_b))
    if len(shared) < 2:
        raise DegenerateDataError("need at least 2 shared ids between reports")
    t, p = asr.paired_t_test([by_id_a[i] for i in shared], [by_id_b[i] for i in shared])
    print(f"t={t:.6f} p={p:.6f} n={len(shared)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="speechssm",
        description="Selective state-space speech SSL at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a labelled synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-utts", type=int, default=200)
    p.add_argument("--n-phones", type=int, default=8)
    p.add_argument("--n-speakers", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-frames", type=int, default=20)
    p.add_argument("--max-frames", type=int, default=60)
    p.add_argument("--utts-per-doc", type=int, default=10)
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="two-iteration masked-prediction pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="CTC fine-tuning and WER evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--mode", choices=("utterance", "document", "causal"),
                   required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--peak-lr", type=float, default=1e-4)
    p.add_argument("--batch-seconds", type=float, default=8.0)
    p.add_argument("--budget-bytes", type=int, default=None)
    p.add_argument("--crop-seconds", type=float, default=20.0)
    p.add_argument("--max-doc-seconds", type=float, default=1200.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("analyze", help="layer-wise purity and CCA report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--phones")
    p.add_argument("--embed", action="append",
                   help="name=dir of per-utterance .sslt embedding files")
    p.add_argument("--k", default="100,500,1000")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("superb-score", help="rescaled benchmark score")
    p.add_argument("--metrics", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_superb_score)

    p = sub.add_parser("bench", help="MACs/RTF length sweep")
    p.add_argument("--configs", required=True, help="comma-separated config files")
    p.add_argument("--lengths", default="5,10,20,40,80,160,320")
    p.add_argument("--budget-bytes", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--plot")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--no-time", action="store_true",
                   help="analytic columns only, skip wall-clock timing")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("ttest", help="paired t-test between two WER reports")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(fn=cmd_ttest)
    return parser


def dispatch(argv):
    """Route argv to the owning subcommand; returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except Exception as exc:  # map the error taxonomy onto exit codes
        for types, code in _ERROR_CODES:
            if isinstance(exc, types):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
