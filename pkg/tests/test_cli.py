"""End-to-end tests of the command-line surface and its exit codes."""

import hashlib
import os

import pytest

from langtrack.cli import main
from langtrack.formats import load_checkpoint, parse_metrics_line


def corpus_args(out, train=2, eval_=2, seed=11):
    return [
        "gen-data", "--out", str(out), "--train", str(train), "--eval", str(eval_),
        "--seed", str(seed), "--canvas", "64", "--clip-len", "5", "--profile", "easy",
    ]


TINY_MODEL = [
    "--embed-dim", "16", "--num-heads", "2", "--num-layers", "1",
    "--template-size", "32", "--search-size", "32", "--k-s", "2",
    "--clip-len", "4",
]


def train_args(corpus, out, epochs=1, samples=2, seed=3, extra=()):
    return [
        "train", "--corpus", str(corpus), "--out", str(out),
        "--epochs", str(epochs), "--samples", str(samples), "--seed", str(seed),
        *TINY_MODEL, *extra,
    ]


def dir_digest(path):
    h = hashlib.sha256()
    for root, _, files in sorted(os.walk(path)):
        for name in sorted(files):
            h.update(name.encode())
            with open(os.path.join(root, name), "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert main(corpus_args(out)) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus):
    out = tmp_path_factory.mktemp("run")
    assert main(train_args(corpus, out)) == 0
    return out


class TestGenData:
    def test_count_echo_and_refusal(self, tmp_path, capsys):
        out = tmp_path / "c"
        assert main(corpus_args(out, train=3, eval_=1)) == 0
        assert "wrote 4 clips (3 train, 1 eval)" in capsys.readouterr().out
        assert main(corpus_args(out, train=3, eval_=1)) == 2
        assert "--force" in capsys.readouterr().err

    def test_force_regenerates_bit_identically(self, tmp_path):
        out = tmp_path / "c"
        assert main(corpus_args(out)) == 0
        first = dir_digest(out)
        assert main(corpus_args(out) + ["--force"]) == 0
        assert dir_digest(out) == first


class TestTrain:
    def test_writes_checkpoint_metrics_and_figure(self, corpus, trained):
        assert (trained / "checkpoint.svlt").exists()
        assert (trained / "ckpt_epoch_000.svlt").exists()
        assert (trained / "training_loss.png").exists()
        lines = (trained / "metrics.log").read_text().splitlines()
        assert len(lines) == 2
        rec = parse_metrics_line(lines[0])
        assert {"step", "L_s", "L_u", "L_total", "kept_frac"} <= set(rec)
        assert rec["L_total"] == pytest.approx(rec["L_s"] + rec["L_u"], abs=1e-9)

    def test_resume_continues_epoch_counter(self, corpus, tmp_path):
        out = tmp_path / "run"
        assert main(train_args(corpus, out, epochs=1)) == 0
        assert load_checkpoint(out / "checkpoint.svlt").epoch == 1
        assert main(train_args(corpus, out, epochs=2,
                               extra=["--resume", str(out / "checkpoint.svlt")])) == 0
        assert load_checkpoint(out / "checkpoint.svlt").epoch == 2
        assert (out / "ckpt_epoch_001.svlt").exists()

    def test_no_dta_ablation_trains(self, corpus, tmp_path):
        out = tmp_path / "nodta"
        assert main(train_args(corpus, out, extra=["--no-dta"])) == 0
        ck = load_checkpoint(out / "checkpoint.svlt")
        assert ck.cfg.model.dta_enabled is False

    def test_config_file_with_unknown_key_exits_2(self, corpus, tmp_path, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text("model.embed_dmi = 16\n")
        code = main(["train", "--corpus", str(corpus), "--out", str(tmp_path / "r"),
                     "--config", str(bad)])
        assert code == 2
        assert "unknown key" in capsys.readouterr().err

    def test_config_file_drives_training(self, corpus, tmp_path):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text(
            "model.embed_dim = 16\nmodel.num_heads = 2\nmodel.num_layers = 1\n"
            "model.template_size = 32\nmodel.search_size = 32\n"
            "model.search_prompt_count = 2\ntrain.epochs = 1\n"
            "train.samples_per_epoch = 1\ntrain.clip_len = 4\n"
        )
        out = tmp_path / "run"
        assert main(["train", "--corpus", str(corpus), "--out", str(out),
                     "--config", str(cfgfile)]) == 0
        assert load_checkpoint(out / "checkpoint.svlt").cfg.model.embed_dim == 16


class TestEval:
    def test_report_files_and_figures(self, corpus, trained, tmp_path, capsys):
        out = tmp_path / "rep"
        assert main(["eval", "--checkpoint", str(trained / "checkpoint.svlt"),
                     "--corpus", str(corpus), "--out", str(out)]) == 0
        for name in ("report.tsv", "curves.tsv", "frames.tsv", "curves.png", "variant.txt"):
            assert (out / name).exists()
        assert "variant=L" in capsys.readouterr().out
        assert (out / "variant.txt").read_text() == "variant=L\n"
        report = (out / "report.tsv").read_text().splitlines()
        assert report[0].startswith("clip\t")
        assert report[-1].startswith("AGGREGATE\t")

    def test_eval_twice_is_byte_identical(self, corpus, trained, tmp_path):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            assert main(["eval", "--checkpoint", str(trained / "checkpoint.svlt"),
                         "--corpus", str(corpus), "--out", str(out), "--no-figures"]) == 0
            outs.append(out)
        for name in ("report.tsv", "curves.tsv", "frames.tsv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_init_box_mode_tags_variant_v(self, corpus, trained, tmp_path, capsys):
        out = tmp_path / "repv"
        assert main(["eval", "--checkpoint", str(trained / "checkpoint.svlt"),
                     "--corpus", str(corpus), "--out", str(out), "--init-box",
                     "--no-figures"]) == 0
        assert "variant=V" in capsys.readouterr().out

    def test_report_auc_recomputable_from_frame_dump(self, corpus, trained, tmp_path):
        import numpy as np

        from langtrack.evaluate import curves_and_auc

        out = tmp_path / "rep2"
        assert main(["eval", "--checkpoint", str(trained / "checkpoint.svlt"),
                     "--corpus", str(corpus), "--out", str(out), "--no-figures"]) == 0
        per_clip = {}
        for line in (out / "frames.tsv").read_text().splitlines()[1:]:
            clip, _, iou_v, px, nrm = line.split("\t")
            per_clip.setdefault(clip, []).append((float(iou_v), float(px), float(nrm)))
        aucs = [
            curves_and_auc(*np.array(rows).T).auc for rows in per_clip.values()
        ]
        report = (out / "report.tsv").read_text().splitlines()
        agg_auc = float(report[-1].split("\t")[1])
        assert agg_auc == pytest.approx(float(np.mean(aucs)), abs=1e-12)


class TestTrace:
    def test_record_counts_and_determinism(self, corpus, trained, tmp_path):
        from langtrack.formats import read_manifest

        clip_id = read_manifest(corpus / "manifest.tsv")[0]["clip_id"]
        paths = []
        for tag in ("t1", "t2"):
            out = tmp_path / f"{tag}.txt"
            assert main(["trace", "--checkpoint", str(trained / "checkpoint.svlt"),
                         "--corpus", str(corpus), "--clip", clip_id,
                         "--out", str(out)]) == 0
            paths.append(out)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        lines = paths[0].read_text().splitlines()
        t, k, k_s = 5, 5, 2  # clip_len, query words, prompt budget
        assert len(lines) == (t - 1) * (k + k_s) + t
        assert sum(1 for l in lines if "kind=box" in l) == t
        assert sum(1 for l in lines if "kind=template" in l) == (t - 1) * k
        assert sum(1 for l in lines if "kind=search" in l) == (t - 1) * k_s

    def test_unknown_clip_exits_2(self, corpus, trained, tmp_path, capsys):
        code = main(["trace", "--checkpoint", str(trained / "checkpoint.svlt"),
                     "--corpus", str(corpus), "--clip", "nope",
                     "--out", str(tmp_path / "t.txt")])
        assert code == 2
        assert "unknown clip" in capsys.readouterr().err


class TestExitCodes:
    def test_usage_error(self, capsys):
        assert main(["train"]) == 1  # missing --corpus
        assert "usage error" in capsys.readouterr().err

    def test_missing_corpus_is_data_error(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.svlt"),
                     "--corpus", str(tmp_path), "--out", str(tmp_path / "r")]) == 2

    def test_unknown_subcommand_is_usage_error(self):
        assert main(["frobnicate"]) == 1
