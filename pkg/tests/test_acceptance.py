"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``.  The training-based
criteria share a pinned 50-clip corpus and a single 30x200 training run.
"""

import math
import os
import shutil
import time

import numpy as np
import pytest

from langtrack import dta, evaluate, formats, heads_losses as H, pipeline, synth
from langtrack import tensor as T
from langtrack.cli import main as cli_main, train_model
from langtrack.config import AugmentSpec, ModelConfig, RunConfig, TrainConfig
from langtrack.encoders import tokenize_language
from langtrack.model import TrackerModel
from langtrack.pseudo_labels import NoiseSpec, NoisyOracleProvider
from langtrack.tokens import SEARCH, TEMPLATE, SequenceLayout, TokenSet, grid_origins, uniform_roles

from gradcheck import H as FD_H
from gradcheck import numeric_gradient

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

REL_TOL = 1e-4
ABS_FLOOR = 1e-7

CORPUS_SEED = 42
CANVAS = 128
EVAL_PROVIDER_SEED = 123


def _report(criterion, ok, detail):
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def accept_model_cfg(seed=0, **overrides):
    base = dict(
        embed_dim=32, num_heads=4, num_layers=2, patch_size=8,
        template_size=32, search_size=64, max_language_tokens=8,
        search_prompt_count=4, denoise_ratio=0.2, lam1=5.0, lam2=2.0,
        seed=seed, dtype="float32",
    )
    base.update(overrides)
    return ModelConfig(**base)


def accept_cfg(corpus, out_dir, epochs=30, samples=200, seed=0, p_gross=0.05, **model_overrides):
    return RunConfig(
        model=accept_model_cfg(seed=seed, **model_overrides),
        augment=AugmentSpec(),
        train=TrainConfig(
            epochs=epochs, samples_per_epoch=samples, clip_len=4,
            lr_backbone=3e-4, lr_head=3e-4, weight_decay=1e-4,
            seed=seed, p_gross=p_gross, corpus=str(corpus), out_dir=str(out_dir),
        ),
    ).validate()


@pytest.fixture(scope="module")
def accept_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept_corpus")
    clips = synth.make_clips(synth.PROFILES["easy"], 50, "train", CORPUS_SEED, canvas=CANVAS)
    clips += synth.make_clips(synth.PROFILES["easy"], 10, "eval", CORPUS_SEED, canvas=CANVAS)
    formats.write_corpus(clips, out)
    return out


def _limited(fn):
    if threadpool_limits is not None:
        with threadpool_limits(limits=1):
            return fn()
    return fn()


@pytest.fixture(scope="module")
def big_run(accept_corpus, tmp_path_factory):
    """Criterion-4 training run, shared with the Eq. 4 accounting check."""
    out = tmp_path_factory.mktemp("accept_run")
    cfg = accept_cfg(accept_corpus, out)
    start = time.monotonic()
    model, ckpt = _limited(lambda: train_model(cfg, log_print=lambda *a: None))
    train_seconds = time.monotonic() - start

    eval_clips = formats.load_corpus(accept_corpus, split="eval")
    provider = NoisyOracleProvider(NoiseSpec(p_gross=0.05), seed=EVAL_PROVIDER_SEED)
    results, summary, _ = evaluate.run_ope(pipeline.ModelTracker(model), eval_clips, provider)

    records = []
    with open(os.path.join(out, "metrics.log"), encoding="utf-8") as fh:
        for line in fh:
            records.append(formats.parse_metrics_line(line))
    return {
        "cfg": cfg,
        "model": model,
        "train_seconds": train_seconds,
        "summary": summary,
        "results": results,
        "records": records,
    }


# ---------------------------------------------------------------------------
# criterion 1: finite-difference gradient suite


def _graph_fd(build, arrays):
    """Max per-coordinate relative error between tape and FD gradients."""
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    with T.Tape():
        T.backward(build(*tensors))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def f(*vals):
        return build(*[T.Tensor(v) for v in vals]).item()

    numeric = numeric_gradient(f, [a.copy() for a in arrays], h=FD_H)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        diff = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        mask = scale > ABS_FLOOR
        if mask.any():
            worst = max(worst, float((diff[mask] / scale[mask]).max()))
        if (~mask).any():
            assert diff[~mask].max() < 1e-6
    return worst


def _margined(rng, shape, gap=0.12):
    out = rng.standard_normal(shape)
    out[np.abs(out) < gap] += 2 * gap
    return out


def _op_cases(rng):
    a = rng.standard_normal((2, 4))
    b = rng.standard_normal((2, 4))
    m1 = rng.standard_normal((3, 4))
    m2 = rng.standard_normal((4, 2))
    ma, mb = _margined(rng, (2, 4)), _margined(rng, (2, 4))
    while np.any(np.abs(ma - mb) < 0.05):
        mb = _margined(rng, (2, 4))
    ln_x = rng.standard_normal((2, 5))
    ln_g = rng.standard_normal(5) * 0.3 + 1.0
    ln_b = rng.standard_normal(5)
    cl = _margined(rng, (2, 4))
    cl[np.abs(np.abs(cl) - 0.8) < 0.05] *= 0.6
    sq = lambda x: T.mul(x, x).sum()
    return [
        ("add", lambda x, y: sq(T.add(x, y)), [a, b]),
        ("sub", lambda x, y: sq(T.sub(x, y)), [a, b]),
        ("mul", lambda x, y: sq(T.mul(x, y)), [a, b]),
        ("div", lambda x, y: sq(T.div(x, T.add(T.mul(y, y), 0.5))), [a, b]),
        ("neg", lambda x: sq(T.neg(x)), [a]),
        ("abs", lambda x: sq(T.absval(x)), [ma]),
        ("maximum", lambda x, y: sq(T.maximum(x, y)), [ma, mb]),
        ("minimum", lambda x, y: sq(T.minimum(x, y)), [ma, mb]),
        ("clip", lambda x: sq(T.clip(x, -0.8, 0.8)), [cl]),
        ("log", lambda x: sq(T.log(T.add(T.mul(x, x), 0.5))), [a]),
        ("sigmoid", lambda x: sq(T.sigmoid(x)), [a]),
        ("gelu", lambda x: sq(T.gelu(x)), [a]),
        ("matmul", lambda x, y: sq(T.matmul(x, y)), [m1, m2]),
        ("linear", lambda x, w, c: sq(T.linear(x, w, c)), [m1, m2, rng.standard_normal(2)]),
        ("reshape", lambda x: sq(T.reshape(x, (4, 2))), [a]),
        ("swapaxes", lambda x: sq(T.swapaxes(x, 0, 1)), [a]),
        ("concat", lambda x, y: sq(T.concat([x, y], axis=1)), [a, b]),
        ("narrow", lambda x: sq(T.narrow(x, 1, 1, 2)), [a]),
        ("gather", lambda x: sq(T.gather(x, [1, 0, 1], axis=0)), [a]),
        ("sum", lambda x: T.mul(T.tsum(x, axis=1), T.tsum(x, axis=1)).sum(), [a]),
        ("mean", lambda x: sq(T.tmean(x, axis=0)), [a]),
        ("softmax", lambda x: sq(T.softmax(x, axis=-1)), [a]),
        ("layer_norm", lambda x, g, c: sq(T.layer_norm(x, g, c)), [ln_x, ln_g, ln_b]),
    ]


def _loss_cases(rng):
    grid = 3
    box = H.Box(
        float(rng.uniform(0.3, 0.7)), float(rng.uniform(0.3, 0.7)),
        float(rng.uniform(0.15, 0.4)), float(rng.uniform(0.15, 0.4)),
    )
    target = H.gaussian_target(box, grid)
    logits = rng.standard_normal((grid, grid)) * 2.0

    other = H.Box(
        box.cx + 0.11, box.cy - 0.13, box.w * 1.3 + 0.05, box.h * 0.8 + 0.05
    )
    pred4 = _margined(rng, (4,), gap=0.05) * 0.1 + np.array([0.5, 0.5, 0.3, 0.3])
    pred4[2:] = np.abs(pred4[2:]) + 0.1
    tgt4 = other.to_array()

    size_map = rng.uniform(0.1, 0.9, (grid, grid, 2))
    off_map = rng.uniform(-0.4, 0.4, (grid, grid, 2))

    def frame_loss_value(lv, sv, ov):
        maps = H.ScoreMaps(T.sigmoid(lv), T.clip(sv, 1e-4, 1.0), ov, grid)
        return H.frame_loss(maps, box, target, 5.0, 2.0).node

    return [
        ("focal", lambda lv: H.focal_loss(T.sigmoid(lv), target.map), [logits]),
        ("giou", lambda p: T.sub(1.0, H.giou_pair(p, T.Tensor(tgt4))), [pred4]),
        ("l1", lambda p: T.tmean(T.absval(T.sub(p, T.Tensor(tgt4)))), [pred4]),
        ("frame", frame_loss_value, [logits, size_map, off_map]),
    ]


def _dta_case(rng):
    """Margin-stable select+merge path differentiated through attention weights."""
    n_tmpl, n_lang, dim, heads = 6, 3, 4, 2
    n = 1 + n_lang + n_tmpl
    layout = SequenceLayout(
        anchor=(0, 1), language=(1, n_lang), template=(1 + n_lang, n_tmpl),
        search=(n, 0), prompt=(n, 0), n_lang_valid=n_lang,
    )
    base = np.arange(1, n_tmpl + 1) * 0.1  # anchor-row scores, 0.1 margins
    rng.shuffle(base)
    weights = rng.uniform(0.05, 0.95, (heads, n, n))
    weights[:, 0, 1 + n_lang :] = base
    tmpl_tokens = rng.standard_normal((n_tmpl, dim))
    lang_tokens = rng.standard_normal((n_lang, dim))

    def build(w, tz, fl):
        attn = dta.AttentionScores(weights=w, layout=layout)
        scores = dta.anchor_scores(attn)
        f_z = TokenSet(tz, uniform_roles(n_tmpl, TEMPLATE), grid_origins(3)[:n_tmpl])
        picked, sel = dta.select_target_tokens(f_z, scores, k=n_lang)
        f_l = TokenSet(
            fl, uniform_roles(n_lang, 1),
            np.zeros((n_lang, 2), np.int32), valid_mask=np.ones(n_lang, bool),
        )
        fused = dta.merge_aggregate(picked, sel, f_l)
        return T.mul(fused.tokens, fused.tokens).sum()

    return build, [weights, tmpl_tokens, lang_tokens]


def test_criterion_1_gradient_suite():
    start = time.monotonic()
    worst = {}
    rng = np.random.default_rng(11)
    for trial in range(20):
        for name, build, arrays in _op_cases(rng):
            err = _graph_fd(build, [a.astype(np.float64) for a in arrays])
            worst[name] = max(worst.get(name, 0.0), err)
        for name, build, arrays in _loss_cases(rng):
            err = _graph_fd(build, [a.astype(np.float64) for a in arrays])
            worst[f"loss:{name}"] = max(worst.get(f"loss:{name}", 0.0), err)
        build, arrays = _dta_case(rng)
        err = _graph_fd(build, arrays)
        worst["dta-path"] = max(worst.get("dta-path", 0.0), err)
    elapsed = time.monotonic() - start
    bad = {k: v for k, v in worst.items() if v >= REL_TOL}
    ok = not bad and elapsed < 60.0
    _report(
        1, ok,
        f"gradient suite: {len(worst)} checks x 20 instances, worst rel err "
        f"{max(worst.values()):.2e}, {elapsed:.1f}s" + (f", failures {bad}" if bad else ""),
    )


# ---------------------------------------------------------------------------
# criterion 2: brute-force oracle equivalence


def test_criterion_2_oracle_suite():
    start = time.monotonic()
    rng = np.random.default_rng(7)

    for _ in range(1000):
        n = int(rng.integers(1, 13))
        scores = rng.choice([0.0, 0.1, 0.25, 0.5, 1.0, 2.0], size=n)
        for k in range(1, n + 1):
            expect = sorted(range(n), key=lambda i: (-scores[i], i))[:k]
            got = T.topk_indices(scores, k)
            assert list(got) == expect

    for _ in range(300):
        n = int(rng.integers(1, 13))
        scores = rng.choice([0.05, 0.1, 0.3, 0.6], size=n)
        k = int(rng.integers(1, n + 1))
        tokens = TokenSet(
            T.Tensor(rng.standard_normal((n, 3))),
            uniform_roles(n, TEMPLATE), grid_origins(4)[:n],
        )
        picked, sel = dta.select_target_tokens(tokens, T.Tensor(scores), k)
        ref = sorted(range(n), key=lambda i: (-scores[i], i))[:k]
        assert list(sel.indices) == ref
        np.testing.assert_allclose(sel.weights.data, scores[ref] / scores[ref].sum(), atol=1e-12)
        np.testing.assert_array_equal(picked.tokens.data, tokens.tokens.data[ref])

    for n in range(1, 11):
        for tenths in range(10):
            ratio = tenths / 10.0
            for _ in range(10):
                ds = rng.choice([0.0, 0.5, 1.0, 2.0], size=n)
                entries = list(enumerate(ds))
                n_drop = math.ceil(round(ratio * n, 9))
                order = sorted(range(n), key=lambda i: (-ds[i], -i))
                drop = set(order[:n_drop])
                expect = [e for i, e in enumerate(entries) if i not in drop]
                assert pipeline.denoise_filter(entries, ratio) == expect

    for _ in range(30):
        frames = int(rng.integers(1, 101))
        ious = rng.uniform(0, 1, frames)
        px = rng.uniform(0, 60, frames)
        nrm = rng.uniform(0, 0.8, frames)
        curves = evaluate.curves_and_auc(ious, px, nrm)
        for i, t in enumerate(evaluate.SUCCESS_THRESHOLDS):
            assert curves.success[i] == sum(1 for v in ious if v > t) / frames
        for i, t in enumerate(evaluate.PRECISION_THRESHOLDS):
            assert curves.precision[i] == sum(1 for v in px if v <= t) / frames
        for i, t in enumerate(evaluate.NORM_PRECISION_THRESHOLDS):
            assert curves.norm_precision[i] == sum(1 for v in nrm if v <= t) / frames

    elapsed = time.monotonic() - start
    ok = elapsed < 30.0
    _report(2, ok, f"oracle suite exact on topk/select/denoise/curves, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: analytic fixed points


def test_criterion_3_fixed_points(big_run):
    b = H.Box(0.43, 0.57, 0.2, 0.31)
    identical = H.giou_loss(b, b)
    assert abs(identical) < 1e-12

    corner = H.giou(H.Box.from_corners(0, 0, 2, 2), H.Box.from_corners(1, 1, 3, 3))
    assert corner == pytest.approx(1.0 / 7.0 - 2.0 / 9.0, abs=1e-12)

    class PerfectTracker:
        def track(self, clip, init_box):
            return list(clip.gt_boxes)

    clips = synth.make_clips(synth.PROFILES["easy"], 3, "eval", 9, canvas=96, clip_len=8)
    provider = NoisyOracleProvider(NoiseSpec(0.0, 0.0, 0.0), seed=0)
    _, summary, _ = evaluate.run_ope(PerfectTracker(), clips, provider)
    assert summary["auc"] == pytest.approx(20.0 / 21.0, abs=1e-12)

    records = big_run["records"]
    assert records, "no logged steps"
    worst = max(abs(r["L_total"] - (r["L_s"] + r["L_u"])) for r in records)
    assert worst < 1e-9

    _report(
        3, True,
        f"giou fixed points exact, perfect AUC 20/21, Eq-accounting worst drift "
        f"{worst:.2e} over {len(records)} steps",
    )


# ---------------------------------------------------------------------------
# criterion 4: consistency-training sanity


def test_criterion_4_training_sanity(big_run):
    seconds = big_run["train_seconds"]
    records = big_run["records"]
    by_epoch = {}
    for r in records:
        by_epoch.setdefault(r["epoch"], []).append(r["L_total"])
    first = float(np.mean(by_epoch[0]))
    last = float(np.mean(by_epoch[max(by_epoch)]))
    mean_iou = big_run["summary"]["mean_iou"]

    ok = seconds < 900.0 and last < 0.5 * first and mean_iou >= 0.5
    _report(
        4, ok,
        f"30x200 run in {seconds:.0f}s (<900), loss {first:.3f}->{last:.3f} "
        f"(ratio {last / first:.2f} < 0.5), held-out mean IoU {mean_iou:.3f} (>=0.5)",
    )


# ---------------------------------------------------------------------------
# criterion 5: ablation directionality


def _train_eval_once(clips, eval_clips, cfg, train_p_gross):
    model = TrackerModel(cfg.model)
    lrs = {"backbone": cfg.train.lr_backbone, "head": cfg.train.lr_head}
    opt = T.AdamW(
        model.params, lr=cfg.train.lr_backbone, weight_decay=cfg.train.weight_decay,
        lr_for=lambda name: lrs[model.lr_group(name)],
    )
    provider = NoisyOracleProvider(NoiseSpec(p_gross=train_p_gross), seed=cfg.train.seed)
    for epoch in range(cfg.train.epochs):
        pipeline.train_epoch(clips, model, opt, cfg, provider, epoch)
    eval_provider = NoisyOracleProvider(NoiseSpec(p_gross=0.05), seed=EVAL_PROVIDER_SEED)
    _, summary, _ = evaluate.run_ope(pipeline.ModelTracker(model), eval_clips, eval_provider)
    return summary["mean_iou"]


def test_criterion_5_ablation_directionality(accept_corpus):
    train_clips = formats.load_corpus(accept_corpus, split="train")
    eval_clips = formats.load_corpus(accept_corpus, split="eval")
    seeds = (0, 1, 2)
    cells = {}

    def sweep(tag, train_p_gross, **model_overrides):
        scores = []
        for seed in seeds:
            cfg = accept_cfg(
                accept_corpus, "/tmp/unused", epochs=10, samples=100, seed=seed,
                **model_overrides,
            )
            scores.append(
                _limited(lambda: _train_eval_once(train_clips, eval_clips, cfg, train_p_gross))
            )
        cells[tag] = scores
        return float(np.median(scores))

    dta_on = sweep("dta on          ", 0.05)
    dta_off = sweep("dta off (--no-dta)", 0.05, dta_enabled=False)
    dn_02 = sweep("denoise 0.2, p_gross 0.3", 0.3)
    dn_00 = sweep("denoise 0.0, p_gross 0.3", 0.3, denoise_ratio=0.0)

    print("\n  ablation table (held-out mean IoU per seed | median)")
    for tag, scores in cells.items():
        row = "  ".join(f"{s:.3f}" for s in scores)
        print(f"    {tag:<26}  {row}  | {np.median(scores):.3f}")

    ok = dta_on >= dta_off and dn_02 >= dn_00
    _report(
        5, ok,
        f"median IoU: dta {dta_on:.3f} >= no-dta {dta_off:.3f}; "
        f"denoise0.2@pg0.3 {dn_02:.3f} >= denoise0@pg0.3 {dn_00:.3f}",
    )


# ---------------------------------------------------------------------------
# criterion 6: determinism


def test_criterion_6_determinism(tmp_path):
    corpus = tmp_path / "corpus"
    assert cli_main([
        "gen-data", "--out", str(corpus), "--train", "3", "--eval", "2",
        "--seed", "5", "--canvas", "64", "--clip-len", "5", "--profile", "easy",
    ]) == 0

    def train_once(out):
        if os.path.exists(out):
            shutil.rmtree(out)
        assert cli_main([
            "train", "--corpus", str(corpus), "--out", str(out),
            "--epochs", "2", "--samples", "5", "--seed", "3",
            "--embed-dim", "16", "--num-heads", "2", "--num-layers", "1",
            "--template-size", "32", "--search-size", "32", "--k-s", "2",
            "--clip-len", "4",
        ]) == 0
        with open(os.path.join(out, "checkpoint.svlt"), "rb") as fh:
            return fh.read()

    out = tmp_path / "run"
    blob_a = train_once(out)
    blob_b = train_once(out)
    same_ckpt = blob_a == blob_b

    reports = []
    for tag in ("ra", "rb"):
        rep = tmp_path / tag
        assert cli_main([
            "eval", "--checkpoint", str(out / "checkpoint.svlt"),
            "--corpus", str(corpus), "--out", str(rep), "--no-figures",
        ]) == 0
        reports.append({
            name: (rep / name).read_bytes()
            for name in ("report.tsv", "curves.tsv", "frames.tsv")
        })
    same_reports = reports[0] == reports[1]

    ok = same_ckpt and same_reports
    _report(6, ok, f"bit-identical checkpoints ({same_ckpt}) and eval reports ({same_reports})")


# ---------------------------------------------------------------------------
# criterion 7: teacher isolation


def test_criterion_7_teacher_isolation():
    grads = []
    for weak_on_tape in (False, True):
        cfg = RunConfig(
            model=accept_model_cfg(seed=6, dtype="float64"),
            augment=AugmentSpec(),
            train=TrainConfig(seed=6, samples_per_epoch=1, clip_len=4),
        ).validate()
        model = TrackerModel(cfg.model)
        clip = synth.generate_clip(
            synth.SceneSpec(canvas=CANVAS, clip_len=4, seed=8, n_distractors=1),
            clip_id="iso",
        )
        provider = NoisyOracleProvider(NoiseSpec(0.02, 0.02, 0.0), seed=1)
        sample = pipeline.prepare_sample(
            clip.window(0, 4), provider, cfg.augment, cfg, np.random.default_rng(2)
        )
        pipeline.train_step(sample, model, None, cfg, weak_on_tape=weak_on_tape)
        grads.append({k: p.grad for k, p in model.params.items() if p.grad is not None})
    identical = set(grads[0]) == set(grads[1]) and all(
        np.array_equal(grads[0][k], grads[1][k]) for k in grads[0]
    )
    _report(
        7, identical,
        f"parameter gradients bitwise identical with teacher on/off tape "
        f"({len(grads[0])} gradient tensors)",
    )


# ---------------------------------------------------------------------------
# criterion 8: denoise defaults


def test_criterion_8_denoise_defaults():
    entries = [(i, float(d)) for i, d in enumerate([5, 1, 9, 3, 7, 2, 8, 4, 6, 0])]
    kept = pipeline.denoise_filter(entries, 0.2)
    survived = len(kept) == 8
    dropped = {i for i, _ in entries} - {i for i, _ in kept}
    largest_dropped = dropped == {2, 6}  # distances 9 and 8

    defaults = ModelConfig()
    ok = (
        survived and largest_dropped
        and defaults.denoise_metric == "euclidean"
        and defaults.denoise_ratio == 0.2
    )
    _report(
        8, ok,
        "ratio 0.2 over 10 entries keeps exactly 8 (largest distances dropped); "
        "euclidean metric and 0.2 ratio are the defaults",
    )
