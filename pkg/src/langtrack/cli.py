"""Command-line surface: gen-data, train, eval, trace.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import figures, formats, pipeline, synth
from .config import RunConfig, load_config
from .errors import ConfigError, LangTrackError, NumericError, UsageError
from .evaluate import run_ope
from .model import TrackerModel
from .pseudo_labels import FilePseudoLabelProvider, NoiseSpec, NoisyOracleProvider
from .tensor import AdamW


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="langtrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic corpus")
    gen.add_argument("--out", required=True)
    gen.add_argument("--train", type=int, default=50)
    gen.add_argument("--eval", type=int, default=10)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--profile", choices=sorted(synth.PROFILES), default="standard")
    gen.add_argument("--canvas", type=int, default=None)
    gen.add_argument("--clip-len", type=int, default=None)
    gen.add_argument("--force", action="store_true")

    train = sub.add_parser("train", help="run consistency training")
    train.add_argument("--corpus", required=True)
    train.add_argument("--out", default="runs/default")
    train.add_argument("--config", default=None)
    train.add_argument("--resume", default=None)
    train.add_argument("--epochs", type=int)
    train.add_argument("--samples", type=int, dest="samples_per_epoch")
    train.add_argument("--seed", type=int)
    train.add_argument("--clip-len", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--weight-decay", type=float)
    train.add_argument("--embed-dim", type=int)
    train.add_argument("--num-heads", type=int)
    train.add_argument("--num-layers", type=int)
    train.add_argument("--patch-size", type=int)
    train.add_argument("--template-size", type=int)
    train.add_argument("--search-size", type=int)
    train.add_argument("--dtype", choices=("float32", "float64"))
    train.add_argument("--no-dta", action="store_true")
    train.add_argument("--dta-layers", choices=("all", "last"))
    train.add_argument("--merge-mode", choices=("pooled", "paired"))
    train.add_argument("--k-s", type=int, dest="search_prompt_count")
    train.add_argument("--denoise-ratio", type=float)
    train.add_argument("--denoise-metric", choices=("euclidean", "cross-entropy"))
    train.add_argument("--denoise-scope", choices=("batch", "sample"))
    train.add_argument("--provider", choices=("oracle", "file"))
    train.add_argument("--labels")
    train.add_argument("--p-gross", type=float)
    train.add_argument("--sigma-center", type=float)
    train.add_argument("--sigma-scale", type=float)

    ev = sub.add_parser("eval", help="one-pass evaluation of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--out", default="reports/default")
    ev.add_argument("--split", default="eval")
    ev.add_argument("--init", choices=("language", "box"), default="language")
    ev.add_argument("--init-box", action="store_true", help="alias for --init box")
    ev.add_argument("--provider", choices=("oracle", "file"), default="oracle")
    ev.add_argument("--labels")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--p-gross", type=float, default=0.05)
    ev.add_argument("--sigma-center", type=float, default=0.05)
    ev.add_argument("--sigma-scale", type=float, default=0.1)
    ev.add_argument("--no-figures", action="store_true")

    tr = sub.add_parser("trace", help="dump per-frame selection records for a clip")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--clip", required=True)
    tr.add_argument("--split", default=None)
    tr.add_argument("--out", required=True)
    return parser


def cmd_gen_data(args):
    manifest = os.path.join(args.out, "manifest.tsv")
    if os.path.exists(manifest) and not args.force:
        raise ConfigError(f"{manifest} already exists; pass --force to overwrite")
    path, clips = synth.build_corpus(
        args.out, args.train, args.eval, synth.PROFILES[args.profile],
        args.seed, canvas=args.canvas, clip_len=args.clip_len,
    )
    print(f"wrote {len(clips)} clips ({args.train} train, {args.eval} eval) -> {path}")
    return 0


_TRAIN_OVERRIDES = {
    "epochs": ("train", "epochs"),
    "samples_per_epoch": ("train", "samples_per_epoch"),
    "seed": ("train", "seed"),
    "clip_len": ("train", "clip_len"),
    "weight_decay": ("train", "weight_decay"),
    "provider": ("train", "provider"),
    "labels": ("train", "labels"),
    "p_gross": ("train", "p_gross"),
    "sigma_center": ("train", "sigma_center"),
    "sigma_scale": ("train", "sigma_scale"),
    "embed_dim": ("model", "embed_dim"),
    "num_heads": ("model", "num_heads"),
    "num_layers": ("model", "num_layers"),
    "patch_size": ("model", "patch_size"),
    "template_size": ("model", "template_size"),
    "search_size": ("model", "search_size"),
    "dtype": ("model", "dtype"),
    "dta_layers": ("model", "dta_layers"),
    "merge_mode": ("model", "merge_mode"),
    "search_prompt_count": ("model", "search_prompt_count"),
    "denoise_ratio": ("model", "denoise_ratio"),
    "denoise_metric": ("model", "denoise_metric"),
    "denoise_scope": ("model", "denoise_scope"),
}


def _config_from_args(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    for attr, (section, name) in _TRAIN_OVERRIDES.items():
        value = getattr(args, attr, None)
        if value is not None:
            setattr(getattr(cfg, section), name, value)
    if args.no_dta:
        cfg.model.dta_enabled = False
    if args.lr is not None:
        cfg.train.lr_backbone = args.lr
        cfg.train.lr_head = args.lr
    if args.seed is not None:
        cfg.model.seed = args.seed
    cfg.train.corpus = args.corpus
    cfg.train.out_dir = args.out
    cfg.validate()
    return cfg


def make_provider(kind, labels=None, seed=0, sigma_center=0.05, sigma_scale=0.1, p_gross=0.05):
    if kind == "file":
        if not labels:
            raise ConfigError("file provider needs --labels")
        return FilePseudoLabelProvider(labels)
    return NoisyOracleProvider(
        NoiseSpec(sigma_center=sigma_center, sigma_scale=sigma_scale, p_gross=p_gross),
        seed=seed,
    )


def train_model(cfg, resume=None, log_print=print):
    """Full training loop; returns (model, final checkpoint path)."""
    clips = formats.load_corpus(cfg.train.corpus, split="train")
    model = TrackerModel(cfg.model)
    lr_state = {"factor": 1.0}
    lrs = {"backbone": cfg.train.lr_backbone, "head": cfg.train.lr_head}
    optimizer = AdamW(
        model.params,
        lr=cfg.train.lr_backbone,
        weight_decay=cfg.train.weight_decay,
        lr_for=lambda name: lrs[model.lr_group(name)] * lr_state["factor"],
    )
    start_epoch = 0
    if resume:
        ckpt = formats.load_checkpoint(resume)
        formats.restore_model(model, ckpt)
        if ckpt.optimizer_state is not None:
            optimizer.load_state_dict(ckpt.optimizer_state)
        start_epoch = ckpt.epoch
        log_print(f"resumed from {resume} at epoch {start_epoch}")

    provider = make_provider(
        cfg.train.provider, labels=cfg.train.labels, seed=cfg.train.seed,
        sigma_center=cfg.train.sigma_center, sigma_scale=cfg.train.sigma_scale,
        p_gross=cfg.train.p_gross,
    )
    out_dir = cfg.train.out_dir
    os.makedirs(out_dir, exist_ok=True)
    metrics = formats.MetricsWriter(os.path.join(out_dir, "metrics.log"))
    drop_at = int(np.ceil(cfg.train.epochs * cfg.train.lr_drop_fraction))
    final_path = os.path.join(out_dir, "checkpoint.svlt")
    try:
        for epoch in range(start_epoch, cfg.train.epochs):
            lr_state["factor"] = 0.1 if epoch >= drop_at else 1.0
            summary = pipeline.train_epoch(
                clips, model, optimizer, cfg, provider, epoch,
                metrics=metrics, step_offset=epoch * cfg.train.samples_per_epoch,
            )
            log_print(
                f"epoch {epoch}: L_total={summary.mean_total:.4f} "
                f"L_s={summary.mean_s:.4f} L_u={summary.mean_u:.4f} "
                f"kept={summary.kept_fraction:.3f}"
            )
            rng_note = {"train_seed": cfg.train.seed, "next_epoch": epoch + 1}
            epoch_path = os.path.join(out_dir, f"ckpt_epoch_{epoch:03d}.svlt")
            formats.save_checkpoint(
                epoch_path, cfg, model.params, epoch + 1,
                rng_state=rng_note, optimizer_state=optimizer.state_dict(),
            )
            formats.save_checkpoint(
                final_path, cfg, model.params, epoch + 1,
                rng_state=rng_note, optimizer_state=optimizer.state_dict(),
            )
    finally:
        metrics.close()
    try:
        records = []
        with open(os.path.join(out_dir, "metrics.log"), encoding="utf-8") as fh:
            for line in fh:
                records.append(formats.parse_metrics_line(line))
        if records:
            figures.save_training_curves(records, out_dir)
    except OSError:
        pass
    return model, final_path


def cmd_train(args):
    cfg = _config_from_args(args)
    _, path = train_model(cfg, resume=args.resume)
    print(f"final checkpoint: {path}")
    return 0


def _load_model(checkpoint_path):
    ckpt = formats.load_checkpoint(checkpoint_path)
    model = TrackerModel(ckpt.cfg.model)
    formats.restore_model(model, ckpt)
    return model, ckpt


def cmd_eval(args):
    init_mode = "box" if args.init_box else args.init
    model, _ = _load_model(args.checkpoint)
    clips = [
        formats.load_clip(args.corpus, rec)
        for rec in formats.read_manifest(os.path.join(args.corpus, "manifest.tsv"))
        if args.split in (None, "", rec["split"])
    ]
    provider = make_provider(
        args.provider, labels=args.labels, seed=args.seed,
        sigma_center=args.sigma_center, sigma_scale=args.sigma_scale,
        p_gross=args.p_gross,
    )
    tracker = pipeline.ModelTracker(model)
    results, summary, curves = run_ope(tracker, clips, provider, init_mode=init_mode)
    os.makedirs(args.out, exist_ok=True)
    variant = "V" if init_mode == "box" else "L"
    formats.atomic_write(
        os.path.join(args.out, "variant.txt"), f"variant={variant}\n".encode()
    )
    report = formats.write_eval_report(args.out, results, summary, curves)
    if not args.no_figures:
        figures.save_eval_curves(curves, args.out, tag=f"[{variant}]")
    print(
        f"variant={variant} clips={summary['clips']} auc={summary['auc']:.4f} "
        f"p20={summary['p20']:.4f} pnorm02={summary['pnorm02']:.4f} "
        f"mean_iou={summary['mean_iou']:.4f}"
    )
    print(f"report: {report}")
    return 0


def cmd_trace(args):
    from .errors import DataError

    model, _ = _load_model(args.checkpoint)
    records = formats.read_manifest(os.path.join(args.corpus, "manifest.tsv"))
    matches = [r for r in records if r["clip_id"] == args.clip]
    if not matches:
        raise DataError(f"unknown clip id {args.clip!r} in {args.corpus}")
    clip = formats.load_clip(args.corpus, matches[0])
    provider = NoisyOracleProvider(NoiseSpec(p_gross=0.0, sigma_center=0.0, sigma_scale=0.0))
    b0 = provider.provide(clip, None)
    tracker = pipeline.ModelTracker(model)
    preds = tracker.track(clip, b0, collect_selections=True)
    lines = []
    for pred in preds:
        if pred.frame_index >= 1 and pred.selection is not None:
            ls = pred.selection
            lines.extend(formats.selection_trace_lines(
                pred.frame_index, "template", ls.t_z.origins, ls.sel_z.weights.data
            ))
            lines.extend(formats.selection_trace_lines(
                pred.frame_index, "search", ls.t_s.origins, ls.sel_s.weights.data
            ))
        lines.append(formats.box_trace_line(pred.frame_index, pred.box))
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    formats.atomic_write(args.out, ("\n".join(lines) + "\n").encode())
    print(f"wrote {len(lines)} trace records -> {args.out}")
    return 0


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        handler = {
            "gen-data": cmd_gen_data,
            "train": cmd_train,
            "eval": cmd_eval,
            "trace": cmd_trace,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except LangTrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
