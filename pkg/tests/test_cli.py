"""Command-line contract: exit codes, artifact layout, manifests, and
determinism of each subcommand on a miniature end-to-end flow."""

import json
import hashlib
import math

import numpy as np
import pytest

from speechssm import blocks, cli, corpus

BASE_FRONTEND = [[10, 5, 8], [3, 2, 8], [3, 2, 8], [3, 2, 8], [3, 2, 8],
                 [2, 2, 8], [2, 2, 8]]


def write_run_config(path, block_kind="mamba", **overrides):
    encoder = {
        "block_kind": block_kind, "n_layers": 2, "d_model": 8, "d_state": 2,
        "expand": 2, "conv_kernel": 3, "n_heads": 2, "mlp_ratio": 2.0,
        "frontend": BASE_FRONTEND, "pos_conv_kernel": 4, "pos_conv_groups": 2,
    }
    encoder.update(overrides.pop("encoder", {}))
    config = {
        "schema_version": 1,
        "encoder": encoder,
        "schedule": {"total_steps": 2, "peak_lr": 1e-3, "batch_seconds": 1.0},
        "mask": {"start_prob": 0.2, "span_len": 4, "seed": 0},
        "pretrain": {"n_codes": 6, "proj_dim": 8, "iteration_steps": [2, 2],
                     "target_layer": 2},
        "seed": 0,
    }
    config.update(overrides)
    path.write_text(json.dumps(config))
    return path


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("clicorpus")
    code = cli.dispatch(["gen-corpus", "--out", str(root / "corpus"),
                         "--n-utts", "10", "--n-phones", "4", "--n-speakers", "2",
                         "--seed", "3", "--min-frames", "16", "--max-frames", "24",
                         "--utts-per-doc", "5"])
    assert code == 0
    return root / "corpus"


class TestDispatchBasics:
    def test_help_exits_zero(self, capsys):
        assert cli.dispatch(["--help"]) == 0
        assert "speechssm" in capsys.readouterr().out

    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert cli.dispatch(["frobnicate"]) == 2

    def test_unknown_flag_is_usage_error(self, capsys):
        assert cli.dispatch(["gen-corpus", "--out", "x", "--bogus"]) == 2

    def test_missing_anchors_file_maps_to_anchor_code(self, tmp_path, capsys):
        metrics = tmp_path / "metrics.csv"
        metrics.write_text("task,metric,value\npr,per,10\n")
        code = cli.dispatch(["superb-score", "--metrics", str(metrics),
                             "--anchors", str(tmp_path / "missing.csv")])
        assert code == 4


class TestGenCorpus:
    def test_layout_and_alignment(self, cli_corpus):
        items = corpus.load_corpus(cli_corpus)
        assert len(items) == 10
        cfg = blocks.EncoderConfig.preset("base", "mamba")
        for it in items:
            assert it.transcript and it.phones is not None and it.speaker
            assert len(it.phones) == cfg.frame_count(len(it.wave))
            assert (cli_corpus / "embeds" / "speaker" / f"{it.utt_id}.sslt").exists()
        manifest = json.loads((cli_corpus / "manifest.json").read_text())
        assert manifest["command"] == "gen-corpus"

    def test_manifest_hashes_match_artifacts(self, cli_corpus):
        manifest = json.loads((cli_corpus / "manifest.json").read_text())
        for path, digest in manifest["artifacts"].items():
            actual = hashlib.sha256(open(path, "rb").read()).hexdigest()
            assert actual == digest

    def test_determinism(self, tmp_path):
        outs = []
        for sub in ("a", "b"):
            code = cli.dispatch(["gen-corpus", "--out", str(tmp_path / sub),
                                 "--n-utts", "3", "--n-phones", "3",
                                 "--n-speakers", "1", "--seed", "5"])
            assert code == 0
            outs.append(sorted((tmp_path / sub).glob("*.wav")))
        for wa, wb in zip(*outs):
            assert wa.read_bytes() == wb.read_bytes()


class TestPipelineCommands:
    @pytest.fixture(scope="class")
    def pretrained(self, cli_corpus, tmp_path_factory):
        root = tmp_path_factory.mktemp("cli_runs")
        cfg_path = write_run_config(root / "run.json")
        ckpt = root / "model.ckpt"
        code = cli.dispatch(["pretrain", "--config", str(cfg_path),
                             "--corpus", str(cli_corpus), "--out", str(ckpt)])
        assert code == 0
        return root, ckpt

    def test_pretrain_artifacts(self, pretrained):
        root, ckpt = pretrained
        assert ckpt.exists()
        cfg, weights, meta = blocks.load_checkpoint(ckpt)
        assert meta["iteration"] == 2
        log = (root / "pretrain_iter1_log.csv").read_text().splitlines()
        assert log[0] == "step,loss,accuracy,scale,lr"
        assert len(log) == 3  # two steps logged
        manifest = json.loads((root / "manifest.json").read_text())
        assert str(ckpt) in manifest["artifacts"]

    def test_analyze_and_determinism(self, pretrained, cli_corpus):
        root, ckpt = pretrained
        reports = []
        for sub in ("r1.csv", "r2.csv"):
            out = root / sub
            code = cli.dispatch([
                "analyze", "--ckpt", str(ckpt), "--corpus", str(cli_corpus),
                "--embed", f"speaker={cli_corpus / 'embeds' / 'speaker'}",
                "--k", "4,6", "--out", str(out)])
            assert code == 0
            reports.append(out.read_text())
        assert reports[0] == reports[1]
        header = reports[0].splitlines()[0].split(",")
        assert header == ["layer", "purity@4", "purity@6", "cca_phone", "cca_speaker"]
        assert len(reports[0].splitlines()) == 4  # header + frontend + 2 layers

    def test_finetune_and_ttest(self, pretrained, cli_corpus):
        root, ckpt = pretrained
        out_a = root / "ft_a.ckpt"
        code = cli.dispatch(["finetune", "--ckpt", str(ckpt), "--data", str(cli_corpus),
                             "--mode", "utterance", "--out", str(out_a),
                             "--steps", "1", "--batch-seconds", "0.5"])
        assert code == 0
        report_a = out_a.with_suffix(".wer.csv")
        assert report_a.exists()
        out_b = root / "ft_b.ckpt"
        code = cli.dispatch(["finetune", "--ckpt", str(ckpt), "--data", str(cli_corpus),
                             "--mode", "causal", "--out", str(out_b),
                             "--steps", "0"])
        assert code == 0
        code = cli.dispatch(["ttest", "--a", str(report_a),
                             "--b", str(out_b.with_suffix(".wer.csv"))])
        assert code == 0

    def test_document_mode_predicted_oom_exit_code(self, pretrained, cli_corpus, capsys):
        root, ckpt = pretrained
        cfg, weights, meta = blocks.load_checkpoint(ckpt)
        big = blocks.EncoderConfig.from_dict(
            {**cfg.to_dict(), "block_kind": "bidir_attn", "d_model": 768,
             "n_heads": 12, "pos_conv_groups": 16, "pos_conv_kernel": 128})
        big_ckpt = root / "big.ckpt"
        blocks.save_checkpoint(big_ckpt, big, blocks.init_weights(
            blocks.EncoderConfig.from_dict({**big.to_dict(), "d_model": 16,
                                            "n_heads": 2, "pos_conv_groups": 2,
                                            "pos_conv_kernel": 4}), seed=0))
        # config promises a wide attention stack; estimator kicks in before
        # any weight is touched, so the undersized weights never matter
        code = cli.dispatch(["finetune", "--ckpt", str(big_ckpt),
                             "--data", str(cli_corpus), "--mode", "document",
                             "--out", str(root / "doc.ckpt"),
                             "--steps", "0", "--budget-bytes", str(1 << 20)])
        assert code == 5
        assert "budget" in capsys.readouterr().err


class TestBenchCommand:
    def test_bench_csv_and_plot(self, tmp_path):
        cfg_a = write_run_config(tmp_path / "a.json")
        cfg_b = write_run_config(tmp_path / "b.json", block_kind="causal_attn")
        out = tmp_path / "sweep.csv"
        plot = tmp_path / "sweep.svg"
        code = cli.dispatch(["bench", "--configs", f"{cfg_a},{cfg_b}",
                             "--lengths", "1,2", "--runs", "2",
                             "--out", str(out), "--plot", str(plot)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("model,seconds,")
        assert len(lines) == 5
        assert plot.read_text().startswith("<svg")

    def test_env_seed_override(self, tmp_path, monkeypatch):
        cfg_path = write_run_config(tmp_path / "c.json")
        monkeypatch.setenv("SSLAB_SEED", "99")
        out = tmp_path / "s.csv"
        code = cli.dispatch(["bench", "--configs", str(cfg_path), "--lengths", "1",
                             "--no-time", "--out", str(out)])
        assert code == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 99
