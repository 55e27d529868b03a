"""Pretraining oracles: MFCC against an independent textbook pipeline,
span masking statistics, the masked-prediction loss, the loss-scale state
machine, Adam on a toy objective, the schedule, and the zero-step
pipeline contract."""

import math

import numpy as np
import pytest

from conftest import check_gradients, small_frontend, tiny_config
from speechssm import analysis, blocks, corpus, pretrain
from speechssm import numerics as nm
from speechssm.errors import (DegenerateDataError, InvalidLengthError,
                              TrainingDivergenceError)


# ---------------------------------------------------------------------------
# Independent MFCC oracle: naive DFT, explicit triangle filters, explicit
# DCT sums, plain loops throughout.
# ---------------------------------------------------------------------------


def oracle_mfcc(waveform):
    sr, win, hop, nfft, nmels, nceps = 16000, 400, 320, 512, 26, 13
    floor = 1e-10
    n_frames = (len(waveform) - win) // hop + 1
    ham = np.array([0.54 - 0.46 * math.cos(2 * math.pi * i / (win - 1))
                    for i in range(win)])

    def mel(f):
        return 2595.0 * math.log10(1.0 + f / 700.0)

    def imel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    edges = [imel(mel(0.0) + (mel(sr / 2) - mel(0.0)) * i / (nmels + 1))
             for i in range(nmels + 2)]
    ceps = np.zeros((n_frames, nceps))
    for t in range(n_frames):
        frame = waveform[t * hop:t * hop + win] * ham
        power = np.zeros(nfft // 2 + 1)
        for k in range(nfft // 2 + 1):
            re = im = 0.0
            for n_i in range(win):  # remaining fft bins are zero padding
                ang = -2.0 * math.pi * k * n_i / nfft
                re += frame[n_i] * math.cos(ang)
                im += frame[n_i] * math.sin(ang)
            power[k] = re * re + im * im
        logmel = np.zeros(nmels)
        for m in range(nmels):
            lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
            acc = 0.0
            for k in range(nfft // 2 + 1):
                f = k * sr / nfft
                weight = min((f - lo) / (mid - lo), (hi - f) / (hi - mid))
                if weight > 0:
                    acc += weight * power[k]
            logmel[m] = math.log(acc + floor)
        for c in range(nceps):
            s = sum(logmel[m] * math.cos(math.pi * c * (2 * m + 1) / (2 * nmels))
                    for m in range(nmels))
            scale = math.sqrt(1.0 / nmels) if c == 0 else math.sqrt(2.0 / nmels)
            ceps[t, c] = s * scale

    def deltas(x):
        out = np.zeros_like(x)
        for t in range(len(x)):
            acc = np.zeros(x.shape[1])
            for n_i in (1, 2):
                plus = x[min(t + n_i, len(x) - 1)]
                minus = x[max(t - n_i, 0)]
                acc += n_i * (plus - minus)
            out[t] = acc / 10.0
        return out

    d1 = deltas(ceps)
    return np.concatenate([ceps, d1, deltas(d1)], axis=1)


class TestMfcc:
    def test_silence_concentrates_in_c0(self):
        out = pretrain.compute_mfcc(np.zeros(1040))
        # constant log-floor spectrum: all DCT mass in coefficient 0
        assert np.all(out[:, 0] < -100)
        assert np.abs(out[:, 1:13]).max() < 1e-6
        assert np.abs(out[:, 13:]).max() < 1e-6  # deltas of a constant track

    def test_frame_alignment_matches_frontend(self):
        cfg = blocks.EncoderConfig.preset("base", "mamba")
        rng = np.random.default_rng(0)
        for t_len in (400, 731, 16000, 16384, 20001):
            wave = rng.standard_normal(t_len)
            assert pretrain.compute_mfcc(wave).shape == (cfg.frame_count(t_len), 39)

    def test_too_short_errors(self):
        with pytest.raises(InvalidLengthError):
            pretrain.compute_mfcc(np.zeros(399))

    def test_tone_against_textbook_oracle(self):
        t = np.arange(1360) / 16000.0
        wave = 0.5 * np.sin(2 * np.pi * 440.0 * t)
        got = pretrain.compute_mfcc(wave)
        want = oracle_mfcc(wave)
        assert got.shape == want.shape
        assert np.abs(got - want).max() < 1e-6


class TestTargets:
    def test_k1_all_zero(self):
        feats = np.random.default_rng(1).standard_normal((30, 4))
        labels = pretrain.generate_targets(feats, 1)
        assert np.array_equal(labels.labels, np.zeros(30, dtype=np.int64))

    def test_two_clouds_recovered(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((40, 3)) * 0.05 + 5.0
        b = rng.standard_normal((40, 3)) * 0.05 - 5.0
        feats = np.concatenate([a, b])
        labels = pretrain.generate_targets(feats, 2, seed=3).labels
        # brute-force nearest-centroid ground truth up to permutation
        first, second = labels[:40], labels[40:]
        assert len(set(first)) == 1 and len(set(second)) == 1
        assert first[0] != second[0]

    def test_seed_determinism(self):
        feats = np.random.default_rng(4).standard_normal((50, 5))
        l1 = pretrain.generate_targets(feats, 4, seed=9).labels
        l2 = pretrain.generate_targets(feats, 4, seed=9).labels
        assert np.array_equal(l1, l2)

    def test_degenerate_features(self):
        with pytest.raises(DegenerateDataError):
            pretrain.generate_targets(np.ones((20, 3)), 2)


class TestMask:
    def test_monte_carlo_coverage(self):
        spec = pretrain.MaskSpec(start_prob=0.08, span_len=10, seed=0)
        L, trials = 200, 10_000
        rng = np.random.default_rng(5)
        total = 0
        for _ in range(trials):
            total += len(pretrain.mask_indices(L, spec, rng))
        fractions_mean = total / (trials * L)
        expected = pretrain.expected_mask_fraction(L, spec)
        # per-trial std measured once, then a 5-sigma band on the mean
        sample = [len(pretrain.mask_indices(L, spec, np.random.default_rng(100 + i))) / L
                  for i in range(400)]
        sigma_mean = np.std(sample) / math.sqrt(trials)
        assert abs(fractions_mean - expected) < 5 * sigma_mean

    def test_vanishing_probability_masks_nothing(self):
        spec = pretrain.MaskSpec(start_prob=1e-12, span_len=5, seed=1)
        assert pretrain.mask_indices(300, spec).size == 0

    def test_seed_determinism(self):
        spec = pretrain.MaskSpec(start_prob=0.2, span_len=4, seed=7)
        a = pretrain.mask_indices(100, spec)
        b = pretrain.mask_indices(100, spec)
        assert np.array_equal(a, b)

    def test_mask_is_union_of_spans(self):
        spec = pretrain.MaskSpec(start_prob=0.3, span_len=4, seed=3)
        rng = np.random.default_rng(8)
        x = rng.standard_normal((50, 6))
        emb = rng.standard_normal(6)
        xm, idx = pretrain.apply_mask(x, spec, emb)
        assert np.array_equal(xm[idx], np.tile(emb, (len(idx), 1)))
        keep = np.setdiff1d(np.arange(50), idx)
        assert np.array_equal(xm[keep], x[keep])

    def test_too_short_errors(self):
        with pytest.raises(InvalidLengthError):
            pretrain.mask_indices(3, pretrain.MaskSpec(0.1, 10, 0))

    def test_mask_backward_routes_gradients(self):
        rng = np.random.default_rng(9)
        dout = rng.standard_normal((10, 4))
        idx = np.array([2, 3, 7])
        dx, demb = pretrain.apply_mask_backward(dout, idx)
        assert np.array_equal(demb, dout[idx].sum(axis=0))
        assert np.all(dx[idx] == 0)
        keep = np.setdiff1d(np.arange(10), idx)
        assert np.array_equal(dx[keep], dout[keep])


def loss_weights(d_model, n_codes, proj_dim, seed):
    shapes = pretrain.pretrain_head_shapes(d_model, n_codes, proj_dim)
    rng = np.random.default_rng(seed)
    return {name: blocks._init_one(name, shape, rng, np.float64)
            for name, shape in shapes.items()}


class TestMaskedPredictionLoss:
    def test_symmetric_logits_give_ln2(self):
        # zero projection weight, nonzero bias, and two mirror-image code
        # embeddings: both cosines coincide, so softmax is uniform
        w = loss_weights(4, 2, 3, seed=10)
        w["pretrain.proj.weight"][:] = 0.0
        w["pretrain.proj.bias"][:] = np.array([1.0, 0.0, 0.0])
        w["pretrain.code_emb"][:] = np.array([[1.0, 0.3, 0.0], [1.0, -0.3, 0.0]])
        layer_out = np.random.default_rng(11).standard_normal((6, 4))
        labels = analysis.FrameLabels(np.array([0, 1, 0, 1, 0, 1]))
        loss, acc, _ = pretrain.masked_prediction_loss(
            layer_out, labels, np.arange(6), w)
        assert abs(loss - math.log(2.0)) < 1e-12

    def test_confident_correct_logits_drive_loss_to_zero(self):
        w = loss_weights(4, 2, 4, seed=12)
        w["pretrain.code_emb"][:] = np.eye(2, 4)
        w["pretrain.proj.weight"][:] = 0.0
        labels = np.array([0, 1, 1, 0])
        # route each frame's projection exactly onto its code embedding
        w["pretrain.proj.weight"][:2, :2] = np.eye(2) * 10
        layer_out = np.zeros((4, 4))
        layer_out[np.arange(4), labels] = 1.0
        loss, acc, _ = pretrain.masked_prediction_loss(
            layer_out, analysis.FrameLabels(labels), np.arange(4), w, tau=1e-3)
        assert loss < 1e-6
        assert acc == 1.0

    def test_against_direct_softmax_oracle(self):
        rng = np.random.default_rng(13)
        w = loss_weights(5, 4, 3, seed=14)
        layer_out = rng.standard_normal((8, 5))
        labels = rng.integers(0, 4, size=8)
        idx = np.array([1, 4, 6])
        tau = 0.1
        loss, acc, _ = pretrain.masked_prediction_loss(
            layer_out, analysis.FrameLabels(labels), idx, w, tau)
        # independent recomputation, loops and direct cosine
        total = 0.0
        for t in idx:
            p = layer_out[t] @ w["pretrain.proj.weight"] + w["pretrain.proj.bias"]
            sims = []
            for c in range(4):
                e = w["pretrain.code_emb"][c]
                sims.append(float(p @ e / (np.linalg.norm(p) * np.linalg.norm(e))))
            logits = np.array(sims) / tau
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            total += -math.log(probs[labels[t]])
        assert abs(loss - total / len(idx)) < 1e-12

    def test_only_masked_frames_matter(self):
        rng = np.random.default_rng(15)
        w = loss_weights(5, 3, 3, seed=16)
        layer_out = rng.standard_normal((9, 5))
        labels = analysis.FrameLabels(rng.integers(0, 3, size=9))
        idx = np.array([0, 5])
        loss1, _, _ = pretrain.masked_prediction_loss(layer_out, labels, idx, w)
        other = layer_out.copy()
        other[[1, 2, 3, 4, 6, 7, 8]] += 100.0
        loss2, _, _ = pretrain.masked_prediction_loss(other, labels, idx, w)
        assert loss1 == loss2

    def test_empty_mask_errors(self):
        w = loss_weights(4, 2, 3, seed=17)
        with pytest.raises(DegenerateDataError):
            pretrain.masked_prediction_loss(
                np.zeros((5, 4)), analysis.FrameLabels(np.zeros(5, dtype=int)),
                np.array([], dtype=int), w)

    def test_gradient_check(self):
        rng = np.random.default_rng(18)
        w = loss_weights(4, 3, 3, seed=19)
        layer_out = rng.standard_normal((7, 4))
        labels = analysis.FrameLabels(rng.integers(0, 3, size=7))
        idx = np.array([0, 2, 3, 6])

        def loss_fn(w2, lo=layer_out):
            loss, _, _ = pretrain.masked_prediction_loss(lo, labels, idx, w2)
            return loss

        loss, acc, cache = pretrain.masked_prediction_loss(layer_out, labels, idx, w)
        grads = {}
        dlayer = pretrain.masked_prediction_loss_backward(cache, w, grads)
        err = check_gradients(
            loss_fn, w, grads,
            names=["pretrain.proj.weight", "pretrain.proj.bias", "pretrain.code_emb"],
            dx_pair=(dlayer, lambda v: loss_fn(w, lo=v), layer_out))
        assert err < 1e-4


class TestLossScale:
    def test_halves_on_overflow_and_resets_streak(self):
        s = pretrain.LossScaleState(scale=2.0 ** 15, clean_streak=5, growth_interval=10)
        s2 = pretrain.update_loss_scale(s, True)
        assert s2.scale == 2.0 ** 14 and s2.clean_streak == 0

    def test_doubles_after_interval(self):
        s = pretrain.LossScaleState(scale=4.0, clean_streak=0, growth_interval=3)
        for _ in range(2):
            s = pretrain.update_loss_scale(s, False)
        assert s.scale == 4.0
        s = pretrain.update_loss_scale(s, False)
        assert s.scale == 8.0 and s.clean_streak == 0

    def test_floor_raises(self):
        s = pretrain.LossScaleState(scale=2.0 ** -10)
        with pytest.raises(TrainingDivergenceError):
            pretrain.update_loss_scale(s, True)


class TestAdamAndSchedule:
    def test_quadratic_objective_converges(self):
        # 100 Adam steps on 0.5*||w||^2 cut the loss by more than 90%
        rng = np.random.default_rng(20)
        w = {"w": rng.standard_normal(12)}
        sched = pretrain.TrainSchedule(total_steps=100, peak_lr=0.3,
                                       warmup_fraction=0.08)
        opt = pretrain.AdamState()
        loss0 = 0.5 * float((w["w"] ** 2).sum())
        for step in range(100):
            grads = {"w": w["w"].copy()}
            pretrain.adam_update(w, grads, opt, sched.lr_at(step), sched)
        loss1 = 0.5 * float((w["w"] ** 2).sum())
        assert loss1 < 0.1 * loss0

    def test_schedule_shape(self):
        sched = pretrain.TrainSchedule(total_steps=100, peak_lr=1.0)
        assert sched.warmup_steps == 8
        assert sched.lr_at(0) == pytest.approx(1.0 / 8)
        assert sched.lr_at(7) == pytest.approx(1.0)  # warmup tops out
        assert sched.lr_at(9) < 1.0
        assert sched.lr_at(99) > 0.0
        lrs = [sched.lr_at(i) for i in range(100)]
        assert max(lrs) == pytest.approx(1.0)
        assert all(a >= b for a, b in zip(lrs[8:], lrs[9:]))
        assert all(a <= b for a, b in zip(lrs[:7], lrs[1:8]))

    def test_default_peak_lr_rule(self):
        base_ext = blocks.EncoderConfig.preset("base", "ext_bimamba")
        small_ext = blocks.EncoderConfig.preset("small", "ext_bimamba")
        base_mamba = blocks.EncoderConfig.preset("base", "mamba")
        assert pretrain.default_peak_lr(base_ext) == 5e-5
        assert pretrain.default_peak_lr(small_ext) == 5e-4
        assert pretrain.default_peak_lr(base_mamba) == 5e-4


def tiny_training_setup(items, steps=3, seed=0):
    cfg = tiny_config("mamba", n_layers=2, d_model=8, pos_conv_kernel=4,
                      pos_conv_groups=2,
                      frontend=small_frontend(8))
    sched = pretrain.TrainSchedule(total_steps=steps, peak_lr=1e-3, batch_seconds=1.0)
    mask = pretrain.MaskSpec(0.2, 4, seed=seed)
    settings = pretrain.PretrainSettings(
        encoder=cfg, schedule=sched, mask=mask, n_codes=8, proj_dim=8,
        iteration_steps=(steps, 0), seed=seed)
    return cfg, sched, mask, settings


class TestTrainStep:
    def test_injected_overflow_halves_scale_and_skips(self, mini_items):
        cfg, sched, mask, settings = tiny_training_setup(mini_items)
        w = pretrain.init_pretrain_weights(settings, 0)
        snapshot = {k: v.copy() for k, v in w.items()}
        mf = {it.utt_id: pretrain.compute_mfcc(it.wave) for it in mini_items[:4]}
        labels = pretrain._cluster_labels(mf, mini_items[:4], settings, 0)
        opt = pretrain.AdamState()
        scale = pretrain.LossScaleState()
        rng = np.random.default_rng(0)
        batch = [(mini_items[0].wave, labels[mini_items[0].utt_id])]

        def inject(grads):
            first = sorted(grads)[0]
            grads[first] = grads[first] + np.inf

        metrics, scale2 = pretrain.train_step(
            w, batch, cfg, mask, sched, opt, scale, 0, rng, grad_transform=inject)
        assert metrics["skipped"] == 1
        assert scale2.scale == scale.scale / 2
        assert scale2.clean_streak == 0
        for name in w:
            assert np.array_equal(w[name], snapshot[name]), name

    def test_growth_after_clean_streak(self, mini_items):
        cfg, sched, mask, settings = tiny_training_setup(mini_items)
        w = pretrain.init_pretrain_weights(settings, 0)
        mf = {it.utt_id: pretrain.compute_mfcc(it.wave) for it in mini_items[:4]}
        labels = pretrain._cluster_labels(mf, mini_items[:4], settings, 0)
        opt = pretrain.AdamState()
        scale = pretrain.LossScaleState(scale=8.0, growth_interval=2)
        rng = np.random.default_rng(1)
        batch = [(mini_items[0].wave, labels[mini_items[0].utt_id])]
        _, scale = pretrain.train_step(w, batch, cfg, mask, sched, opt, scale, 0, rng)
        assert scale.scale == 8.0 and scale.clean_streak == 1
        _, scale = pretrain.train_step(w, batch, cfg, mask, sched, opt, scale, 1, rng)
        assert scale.scale == 16.0 and scale.clean_streak == 0


class TestPipeline:
    def test_zero_steps_checkpoints_equal_initialization(self, mini_items, tmp_path):
        cfg, sched, mask, settings = tiny_training_setup(mini_items, steps=0)
        paths = pretrain.pretrain_pipeline(mini_items[:6], settings, tmp_path)
        assert len(paths) == 2
        _, w1, meta1 = blocks.load_checkpoint(paths[0])
        _, w2, meta2 = blocks.load_checkpoint(paths[1])
        assert (meta1["iteration"], meta2["iteration"]) == (1, 2)
        init1 = pretrain.init_pretrain_weights(settings, settings.seed)
        init2 = pretrain.init_pretrain_weights(settings, settings.seed + 1)
        for name in init1:
            assert np.array_equal(w1[name], init1[name]), name
            assert np.array_equal(w2[name], init2[name]), name

    def test_default_second_iteration_source_layer(self):
        cfg, sched, mask, _ = tiny_training_setup([])
        settings = pretrain.PretrainSettings(encoder=cfg, schedule=sched, mask=mask)
        assert settings.target_layer == 6
