"""Command-line entry point exposing the full workflow.

Subcommands: synth-data, pretrain, finetune, evaluate, analyze, mask-debug.
Each run writes its manifest before doing work, emits line-oriented delimited
reports plus a rendered figure, and exits nonzero (with a machine-readable
ERROR line on stderr) when it fails or an internal audit trips.
"""

import argparse
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import analysis, figures
from .adapter import AdapterConfig
from .configio import build_config, finish_manifest, write_manifest
from .downstream import (
    FinetuneConfig,
    eer_threshold,
    evaluate_scores,
    finetune,
    load_finetuned,
    predict_scores,
    restore_classifier,
    save_finetuned,
    scores_to_lines,
)
from .errors import ConfigError, FsvfmError
from .masking import STRATEGIES, apportionment_deviation, pack_mask_pair, sample_mask
from .pretrainer import (
    PretrainConfig,
    Trainer,
    load_checkpoint,
    restore_config,
    restore_model,
)
from .regions import patchify_parsing
from .rng import substream
from .synth import CORRUPTION_KINDS, SynthConfig, generate_synthetic, load_dataset, save_dataset

LABELS = {"real": 0, "fake": 1}


def _default_out(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get("FSVFM_OUT_DIR")
    if not root:
        raise ConfigError("pass --out or set FSVFM_OUT_DIR")
    return Path(root) / command


def _parse_sets(pairs):
    overrides = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


# -- commands ---------------------------------------------------------------


def cmd_synth_data(args) -> int:
    out = _default_out(args, "synth-data")
    config = SynthConfig(
        image_size=args.image_size,
        n_real=args.n_real,
        n_fake=args.n_fake,
        seed=args.seed,
        corruption_kinds=tuple(args.corruptions.split(",")) if args.corruptions else CORRUPTION_KINDS,
    )
    config.validate()
    manifest = write_manifest(out, "synth-data", config, args.seed)
    samples = generate_synthetic(config)
    dataset_manifest = save_dataset(samples, out)
    preview = [s.image for s in samples[: min(6, len(samples))]]
    if preview:
        import matplotlib.pyplot as plt

        fig, axes = plt.subplots(1, len(preview), figsize=(2.2 * len(preview), 2.6))
        axes = np.atleast_1d(axes)
        for ax, img, sample in zip(axes, preview, samples):
            ax.imshow(img)
            ax.set_title(sample.label, fontsize=8)
            ax.axis("off")
        fig.tight_layout()
        fig.savefig(out / "preview.png", dpi=120)
        plt.close(fig)
    print(f"wrote {len(samples)} samples under {out} (manifest: {dataset_manifest})")
    finish_manifest(manifest)
    return 0


def cmd_pretrain(args) -> int:
    out = _default_out(args, "pretrain")
    overrides = _parse_sets(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = build_config(PretrainConfig, args.config, overrides)
    config.validate()
    manifest = write_manifest(out, "pretrain", config, config.seed, args.config)
    samples = load_dataset(args.data)
    trainer = Trainer(samples, config, out_dir=out)
    if args.resume:
        trainer.load_payload(load_checkpoint(args.resume))
    trainer.train()
    reports = [asdict(r) for r in trainer.reports]
    if reports:
        figures.save_loss_curves(reports, out / "loss_curve.png")
        print(f"final total loss: {reports[-1]['total']:.6f} after step {reports[-1]['step']}")
    print(f"checkpoint: {out / 'checkpoint.pt'}")
    finish_manifest(manifest)
    return 0


def cmd_finetune(args) -> int:
    out = _default_out(args, "finetune")
    mode = {"linear": "linear_probe"}.get(args.mode, args.mode)
    adapter = AdapterConfig(
        kind=args.adapter_kind,
        bottleneck=args.bottleneck,
        fusion=args.fusion,
        tau_rac=args.tau_rac,
        lambda_rac=args.lambda_rac,
    )
    overrides = _parse_sets(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.lr is not None:
        overrides["lr"] = args.lr
    config = build_config(FinetuneConfig, args.config, overrides)
    config.adapter = adapter
    config.mode = mode
    config.validate()
    manifest = write_manifest(out, "finetune", config, config.seed, args.config)
    samples = load_dataset(args.data)
    payload = finetune(args.ckpt, samples, mode, config, backbone_path=args.ckpt)
    tuned_path = save_finetuned(payload, out / "tuned.pt")
    log_lines = ["#step\tloss\trac"] + [
        f"{e['step']}\t{e['loss']:.10e}\t{'' if e['rac'] is None else format(e['rac'], '.10e')}"
        for e in payload["train_log"]
    ]
    (out / "train_log.tsv").write_text("\n".join(log_lines) + "\n")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([e["step"] for e in payload["train_log"]], [e["loss"] for e in payload["train_log"]])
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(f"{mode} tuning loss")
    fig.tight_layout()
    fig.savefig(out / "train_loss.png", dpi=120)
    plt.close(fig)
    print(f"tuned checkpoint: {tuned_path}")
    finish_manifest(manifest)
    return 0


def _scored_dataset(tuned, backbone_path, data_dir):
    backbone = load_checkpoint(backbone_path) if backbone_path else None
    clf, pre_cfg = restore_classifier(tuned, backbone)
    samples = load_dataset(data_dir)
    for sample in samples:
        if sample.label not in LABELS:
            raise ConfigError(f"evaluation sample lacks a real/fake label: {sample.label!r}")
    scores = predict_scores(clf, samples, pre_cfg)
    labels = np.array([LABELS[s.label] for s in samples])
    groups = [s.group_id or str(i) for i, s in enumerate(samples)]
    return samples, scores, labels, groups


def cmd_evaluate(args) -> int:
    out = Path(args.report) if args.report else _default_out(args, "evaluate")
    tuned = load_finetuned(args.ckpt)
    manifest = write_manifest(out, "evaluate", {"ckpt": str(args.ckpt), "data": str(args.data)}, 0)
    samples, scores, labels, groups = _scored_dataset(tuned, args.backbone, args.data)
    threshold = args.threshold
    if args.dev_data:
        _, dev_scores, dev_labels, _ = _scored_dataset(tuned, args.backbone, args.dev_data)
        _, threshold = eer_threshold(dev_scores, dev_labels)
    result = evaluate_scores(scores, labels, groups, threshold=threshold)
    (out / "report.txt").write_text("\n".join(result.lines()) + "\n")
    ids = [f"{i:06d}" for i in range(len(samples))]
    score_lines = ["#sample_id\tgroup_id\tlabel\tscore"] + scores_to_lines(
        ids, groups, (s.label for s in samples), scores
    )
    (out / "scores.tsv").write_text("\n".join(score_lines) + "\n")
    figures.save_roc_curve(scores, labels, out / "roc.png")
    for line in result.lines():
        print(line)
    finish_manifest(manifest)
    return 0


def cmd_analyze(args) -> int:
    out = _default_out(args, "analyze")
    payload = load_checkpoint(args.ckpt)
    manifest = write_manifest(out, "analyze", {"ckpt": str(args.ckpt), "data": str(args.data)}, 0)
    config = restore_config(payload)
    model = restore_model(payload)
    encoder = model.online.encoder
    samples = load_dataset(args.data)[: args.n_images]
    if not samples:
        raise ConfigError("dataset is empty")
    from .pretrainer import prepare_images
    import torch

    images = prepare_images(samples, config)
    with torch.no_grad():
        tokens = encoder.embed_full(images)
        _, trace = encoder.encode(tokens, capture_attention=True)
    summary = analysis.attention_summary(trace, encoder.grid, encoder.profile.patch_size)
    lines = ["#layer\thead\tmean_distance\tmean_kl"] + analysis.summary_tsv_lines(summary)
    (out / "attention_summary.tsv").write_text("\n".join(lines) + "\n")
    figures.save_attention_stats(summary, out / "attention_stats.png")
    for i, sample in enumerate(samples[: args.n_heatmaps]):
        analysis.export_attention_map(
            encoder,
            sample.image,
            (config.norm_mean, config.norm_std),
            out / f"heatmap_{i:03d}.png",
            layer=args.layer,
        )
    print(f"attention summary over {len(samples)} images: {out / 'attention_summary.tsv'}")
    finish_manifest(manifest)
    return 0


def cmd_mask_debug(args) -> int:
    out = _default_out(args, "mask-debug")
    if args.strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {args.strategy!r}; choose from {sorted(STRATEGIES)}")
    manifest = write_manifest(
        out,
        "mask-debug",
        {"strategy": args.strategy, "r": args.r, "n": args.n, "patch_size": args.patch_size},
        args.seed,
    )
    samples = load_dataset(args.data)
    if not samples:
        raise ConfigError("dataset is empty")
    indices = [patchify_parsing(s.parsing, args.patch_size) for s in samples]
    dump_dir = out / "masks"
    dump_dir.mkdir(parents=True, exist_ok=True)
    audit_lines = ["#draw\tsample\tn_patches\ttarget\tmasked\tbudget_dev\tcontainment\tprop_dev"]
    violations = 0
    for draw in range(args.n):
        sample_idx = draw % len(samples)
        rng = substream(args.seed, "mask", draw)
        pair = sample_mask(args.strategy, indices[sample_idx], args.r, rng)
        (dump_dir / f"{draw:05d}.mask").write_bytes(pack_mask_pair(pair))
        budget_dev = abs(int(pair.mask.sum()) - pair.target_masked)
        contained = bool((pair.region_mask <= pair.mask).all())
        prop_dev = apportionment_deviation(pair, indices[sample_idx], args.strategy)
        if budget_dev or not contained or (prop_dev is not None and prop_dev >= 1.0):
            violations += 1
        audit_lines.append(
            f"{draw}\t{sample_idx}\t{pair.n_patches}\t{pair.target_masked}"
            f"\t{int(pair.mask.sum())}\t{budget_dev}\t{int(contained)}"
            f"\t{'' if prop_dev is None else format(prop_dev, '.6f')}"
        )
    (out / "audit.tsv").write_text("\n".join(audit_lines) + "\n")
    gallery = {}
    for pos, name in enumerate(STRATEGIES):
        rng = substream(args.seed, "gallery", pos)
        gallery[name] = sample_mask(name, indices[0], args.r, rng)
    figures.save_mask_gallery(
        samples[0].image, gallery, indices[0].grid, args.patch_size, out / "masks.png"
    )
    print(f"{args.n} draws audited, {violations} violation(s); report: {out / 'audit.tsv'}")
    finish_manifest(manifest, status="completed" if violations == 0 else "audit-failed")
    return 0 if violations == 0 else 1


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsvfm",
        description="Self-supervised facial pre-training, adapter tuning and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic face dataset")
    p.add_argument("--out")
    p.add_argument("--n-real", type=int, default=64)
    p.add_argument("--n-fake", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corruptions", help="comma-separated subset of " + ",".join(CORRUPTION_KINDS))
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain", help="joint pre-training on an unlabeled dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--resume")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="adapt a pre-trained backbone to labels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["full", "adapter", "linear"], default="adapter")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--adapter-kind", default="fs_adapter")
    p.add_argument("--bottleneck", type=int)
    p.add_argument("--fusion", default="concat")
    p.add_argument("--tau-rac", type=float, default=0.07)
    p.add_argument("--lambda-rac", type=float, default=0.1)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a dataset and report metrics")
    p.add_argument("--ckpt", required=True, help="tuned checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--report", help="output directory for report/scores/figure")
    p.add_argument("--backbone", help="backbone checkpoint for adapter/linear ckpts")
    p.add_argument("--threshold", type=float, help="fixed decision threshold")
    p.add_argument("--dev-data", help="fit the threshold on this split's EER")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="attention diagnostics for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--n-images", type=int, default=8)
    p.add_argument("--n-heatmaps", type=int, default=2)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("mask-debug", help="sample masks and audit their invariants")
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", required=True)
    p.add_argument("--r", type=float, default=0.75)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_mask_debug)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FsvfmError as exc:
        print(f"ERROR\t{type(exc).__name__}\t{exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
