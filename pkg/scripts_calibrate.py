"""Calibration run for the training acceptance criterion (not part of the package)."""
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "src"))

import numpy as np

from langtrack import synth, formats, pipeline
from langtrack.cli import train_model
from langtrack.config import AugmentSpec, ModelConfig, RunConfig, TrainConfig
from langtrack.evaluate import run_ope
from langtrack.pseudo_labels import NoiseSpec, NoisyOracleProvider

try:
    from threadpoolctl import threadpool_limits
except ImportError:
    threadpool_limits = None

CORPUS = "/tmp/lt_accept/corpus"


def build_corpus():
    if os.path.exists(os.path.join(CORPUS, "manifest.tsv")):
        return
    clips = synth.make_clips(synth.PROFILES["easy"], 50, "train", seed=42)
    clips += synth.make_clips(synth.PROFILES["easy"], 10, "eval", seed=42)
    formats.write_corpus(clips, CORPUS)


def accept_cfg(out_dir, epochs=30, samples=200, seed=0, **model_kw):
    model = dict(
        embed_dim=32, num_heads=4, num_layers=2, patch_size=8,
        template_size=32, search_size=64, max_language_tokens=8,
        search_prompt_count=4, denoise_ratio=0.2, lam1=5.0, lam2=2.0,
        seed=seed, dtype="float32",
    )
    model.update(model_kw)
    return RunConfig(
        model=ModelConfig(**model),
        augment=AugmentSpec(),
        train=TrainConfig(
            epochs=epochs, samples_per_epoch=samples, clip_len=4,
            lr_backbone=1e-3, lr_head=1e-3, weight_decay=1e-4,
            seed=seed, corpus=CORPUS, out_dir=out_dir,
        ),
    ).validate()


def main():
    build_corpus()
    cfg = accept_cfg("/tmp/lt_accept/run")
    t0 = time.monotonic()

    def run():
        model, _ = train_model(cfg)
        return model

    if threadpool_limits is not None:
        with threadpool_limits(limits=1):
            model = run()
    else:
        model = run()
    train_time = time.monotonic() - t0
    print(f"TRAIN TIME: {train_time:.1f} s")

    eval_clips = formats.load_corpus(CORPUS, split="eval")
    provider = NoisyOracleProvider(NoiseSpec(p_gross=0.05), seed=123)
    results, summary, _ = run_ope(pipeline.ModelTracker(model), eval_clips, provider)
    print("OPE:", summary)
    for r in results:
        print(f"  {r.clip_id}: mean_iou={r.mean_iou:.3f} auc={r.auc:.3f}")

    # loss halving check
    records = []
    with open("/tmp/lt_accept/run/metrics.log") as fh:
        for line in fh:
            records.append(formats.parse_metrics_line(line))
    by_epoch = {}
    for r in records:
        by_epoch.setdefault(r["epoch"], []).append(r["L_total"])
    first = np.mean(by_epoch[0])
    last = np.mean(by_epoch[max(by_epoch)])
    print(f"epoch0 mean {first:.4f} -> last {last:.4f} ratio {last / first:.3f}")


if __name__ == "__main__":
    main()
