"""Masked-prediction pretraining at desk scale.

Two iterations: the first clusters MFCC features into pseudo-labels, the
second restarts from scratch against k-means of the first model's
layer-6 output. Span masking, a cosine code-embedding cross-entropy on
masked frames only, Adam with linear warmup/decay, and a dynamic loss
scale that halves on gradient overflow and doubles after a streak of
clean steps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import analysis, blocks, corpus
from . import numerics as nm
from .errors import DegenerateDataError, InvalidLengthError, TrainingDivergenceError

HOP = corpus.HOP
WIN = corpus.WIN

# ---------------------------------------------------------------------------
# MFCC features: 13 cepstra + deltas + delta-deltas, framed exactly like
# the encoder frontend (25 ms window, 20 ms hop) so frame counts align.
# ---------------------------------------------------------------------------

_N_MFCC = 13
_N_MELS = 26
_N_FFT = 512
_POWER_FLOOR = 1e-10


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + f / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def mel_filterbank(n_mels=_N_MELS, n_fft=_N_FFT, sample_rate=corpus.SAMPLE_RATE):
    """Triangular filters, (n_mels, n_fft//2+1)."""
    edges = _mel_to_hz(np.linspace(0.0, _hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def _dct_matrix(n_out, n_in):
    # orthonormal DCT-II rows
    m = np.arange(n_in)
    d = np.cos(np.pi * np.arange(n_out)[:, None] * (2 * m + 1)[None, :] / (2 * n_in))
    d *= np.sqrt(2.0 / n_in)
    d[0] *= np.sqrt(0.5)
    return d


def _deltas(x, width=2):
    denom = 2 * sum(n * n for n in range(1, width + 1))
    padded = np.concatenate([np.repeat(x[:1], width, axis=0), x,
                             np.repeat(x[-1:], width, axis=0)])
    out = np.zeros_like(x)
    for n in range(1, width + 1):
        out += n * (padded[width + n:width + n + len(x)]
                    - padded[width - n:width - n + len(x)])
    return out / denom


def compute_mfcc(waveform):
    """13 MFCCs plus first and second temporal deltas, (L, 39)."""
    waveform = np.asarray(waveform, dtype=np.float64)
    if len(waveform) < WIN:
        raise InvalidLengthError(f"waveform shorter than one {WIN}-sample window")
    n_frames = (len(waveform) - WIN) // HOP + 1
    idx = HOP * np.arange(n_frames)[:, None] + np.arange(WIN)[None, :]
    frames = waveform[idx] * np.hamming(WIN)
    power = np.abs(np.fft.rfft(frames, n=_N_FFT, axis=1)) ** 2
    mel = power @ mel_filterbank().T
    logmel = np.log(mel + _POWER_FLOOR)
    ceps = logmel @ _dct_matrix(_N_MFCC, _N_MELS).T
    d1 = _deltas(ceps)
    d2 = _deltas(d1)
    return np.concatenate([ceps, d1, d2], axis=1)


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------


def generate_targets(features, k, seed=0):
    """Cluster pooled features and label every frame by nearest centroid."""
    _, assign, _ = analysis.kmeans(features, k, seed=seed)
    return analysis.FrameLabels(assign, "cluster")


# ---------------------------------------------------------------------------
# Span masking
# ---------------------------------------------------------------------------


@dataclass
class MaskSpec:
    start_prob: float = 0.08
    span_len: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.start_prob < 1.0:
            raise DegenerateDataError("start_prob must be in (0, 1)")
        if self.span_len < 1:
            raise DegenerateDataError("span_len must be >= 1")


def mask_indices(length, spec: MaskSpec, rng=None):
    """Union of spans: each frame starts a span of span_len independently
    with probability start_prob; spans may overlap and truncate at the
    end. Returns the sorted masked-frame indices."""
    if length < spec.span_len:
        raise InvalidLengthError(f"sequence of {length} frames shorter than span {spec.span_len}")
    rng = rng or np.random.default_rng(spec.seed)
    starts = np.flatnonzero(rng.random(length) < spec.start_prob)
    edges = np.zeros(length + 1, dtype=np.int64)
    np.add.at(edges, starts, 1)
    np.add.at(edges, np.minimum(starts + spec.span_len, length), -1)
    covered = np.cumsum(edges[:-1]) > 0
    return np.flatnonzero(covered)


def apply_mask(x, spec: MaskSpec, mask_emb, rng=None):
    """Replace masked frames with the learned mask embedding.

    Returns (x_masked, indices); an empty mask is allowed and signalled by
    an empty index array.
    """
    idx = mask_indices(x.shape[0], spec, rng)
    x_masked = x.copy()
    if idx.size:
        x_masked[idx] = mask_emb
    return x_masked, idx


def apply_mask_backward(dout, idx):
    """Gradients through the replacement: masked rows feed the embedding,
    the rest pass through."""
    dx = dout.copy()
    demb = dout[idx].sum(axis=0) if idx.size else np.zeros(dout.shape[1], dout.dtype)
    if idx.size:
        dx[idx] = 0.0
    return dx, demb


def expected_mask_fraction(length, spec: MaskSpec):
    """Exact expectation of the masked fraction under the span process
    (edge frames see fewer potential starts than the interior 1-(1-p)^l)."""
    counts = np.minimum(np.arange(length) + 1, spec.span_len)
    return float(np.mean(1.0 - (1.0 - spec.start_prob) ** counts))


# ---------------------------------------------------------------------------
# Masked-prediction loss: cosine similarity to code embeddings over
# temperature, cross-entropy on masked frames only.
# ---------------------------------------------------------------------------


def _normalize_rows(m):
    norms = np.sqrt((m * m).sum(axis=1, keepdims=True))
    return m / norms, norms


def _normalize_rows_backward(dnorm, normed, norms):
    return (dnorm - normed * (dnorm * normed).sum(axis=1, keepdims=True)) / norms


def masked_prediction_loss(layer_out, labels, idx, w, tau=0.1, prefix="pretrain."):
    """Returns (loss, accuracy, cache).

    labels: FrameLabels (or int array) aligned with layer_out frames.
    Loss support is the masked frames only; raises when the mask is empty.
    """
    ids = labels.labels if isinstance(labels, analysis.FrameLabels) else np.asarray(labels)
    if idx.size == 0:
        raise DegenerateDataError("empty mask: loss has no support")
    h = layer_out[idx]
    lab = ids[idx]
    proj = nm.linear(h, w[prefix + "proj.weight"], w[prefix + "proj.bias"])
    pn, pnorm = _normalize_rows(proj)
    en, enorm = _normalize_rows(w[prefix + "code_emb"])
    logits = nm.matmul(pn, en.T) / tau
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    loss = float(np.mean(logz - logits[np.arange(len(lab)), lab]))
    acc = float(np.mean(logits.argmax(axis=1) == lab))
    cache = (layer_out.shape, idx, h, lab, proj, pn, pnorm, en, enorm, logits, tau, prefix)
    return loss, acc, cache


def masked_prediction_loss_backward(cache, w, grads, upstream=1.0):
    shape, idx, h, lab, proj, pn, pnorm, en, enorm, logits, tau, prefix = cache
    n = len(lab)
    soft = nm.softmax(logits, axis=1)
    dlogits = soft
    dlogits[np.arange(n), lab] -= 1.0
    dlogits *= upstream / n
    ds = dlogits / tau
    dpn = nm.matmul(ds, en)
    den = nm.matmul(ds.T, pn)
    dproj = _normalize_rows_backward(dpn, pn, pnorm)
    dcode = _normalize_rows_backward(den, en, enorm)
    blocks.accumulate_grad(grads, prefix + "code_emb", dcode)
    dh, dwp, dbp = nm.linear_backward(dproj, h, w[prefix + "proj.weight"])
    blocks.accumulate_grad(grads, prefix + "proj.weight", dwp)
    blocks.accumulate_grad(grads, prefix + "proj.bias", dbp)
    dlayer = np.zeros(shape, dtype=dh.dtype)
    dlayer[idx] = dh
    return dlayer


def pretrain_head_shapes(d_model, n_codes, proj_dim=256):
    return {
        "pretrain.mask_emb": (d_model,),
        "pretrain.proj.weight": (d_model, proj_dim),
        "pretrain.proj.bias": (proj_dim,),
        "pretrain.code_emb": (n_codes, proj_dim),
    }


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class TrainSchedule:
    total_steps: int
    warmup_fraction: float = 0.08
    peak_lr: float = 5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    batch_seconds: float = 8.0

    @property
    def warmup_steps(self):
        return max(1, int(round(self.warmup_fraction * self.total_steps)))

    def lr_at(self, step):
        """Linear warmup for the first warmup_fraction of updates, then
        linear decay towards zero; step is 0-based."""
        w = self.warmup_steps
        if step < w:
            return self.peak_lr * (step + 1) / w
        span = max(1, self.total_steps - w)
        return self.peak_lr * max(0.0, (self.total_steps - step) / span)


def default_peak_lr(cfg):
    """5e-5 for the base-size two-branch bidirectional stack, 5e-4 otherwise."""
    if cfg.block_kind == "ext_bimamba" and cfg.d_model >= 768:
        return 5e-5
    return 5e-4


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_update(weights, grads, state: AdamState, lr, schedule: TrainSchedule):
    state.t += 1
    b1, b2, eps = schedule.adam_beta1, schedule.adam_beta2, schedule.adam_eps
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(weights[name])
            state.v[name] = np.zeros_like(weights[name])
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        weights[name] = weights[name] - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# Dynamic loss scale
# ---------------------------------------------------------------------------

_SCALE_FLOOR = 2.0 ** -10


@dataclass(frozen=True)
class LossScaleState:
    scale: float = 2.0 ** 15
    clean_streak: int = 0
    growth_interval: int = 2000


def update_loss_scale(state: LossScaleState, overflow: bool) -> LossScaleState:
    """Halve on overflow (resetting the streak), double after
    growth_interval consecutive clean steps."""
    if overflow:
        new_scale = state.scale / 2.0
        if new_scale < _SCALE_FLOOR:
            raise TrainingDivergenceError(
                f"loss scale underflowed below 2^-10 (reached {new_scale})")
        return replace(state, scale=new_scale, clean_streak=0)
    streak = state.clean_streak + 1
    if streak >= state.growth_interval:
        return replace(state, scale=state.scale * 2.0, clean_streak=0)
    return replace(state, clean_streak=streak)


# ---------------------------------------------------------------------------
# Training step and pipeline
# ---------------------------------------------------------------------------


def train_step(weights, batch, cfg, mask_spec, schedule, opt_state, scale_state,
               step, rng, tau=0.1, grad_transform=None):
    """One update: scaled loss, backward, overflow-aware Adam step.

    batch: list of (waveform, FrameLabels). Updates weights in place and
    returns (metrics dict, new LossScaleState). grad_transform, if given,
    is applied to the raw scaled gradients before the overflow check
    (clipping, fault injection in tests).
    """
    grads = {}
    losses = []
    accs = []
    upstream = scale_state.scale / len(batch)
    for wave, labels in batch:
        x0, fcache = blocks.frontend_forward(wave, cfg, weights, training=True)
        x_m, idx = apply_mask(x0, mask_spec, weights["pretrain.mask_emb"], rng)
        if idx.size == 0:
            # empty masks carry no loss; resample one span deterministically
            idx = np.array([int(rng.integers(0, x0.shape[0] - mask_spec.span_len + 1))])
            idx = np.arange(idx[0], idx[0] + mask_spec.span_len)
            x_m = x0.copy()
            x_m[idx] = weights["pretrain.mask_emb"]
        states, caches = blocks.stack_forward(x_m, cfg, weights, training=True)
        loss, acc, lcache = masked_prediction_loss(states[-1], labels, idx, weights, tau)
        losses.append(loss)
        accs.append(acc)
        dlast = masked_prediction_loss_backward(lcache, weights, grads, upstream)
        dx0 = blocks.stack_backward(dlast, caches, cfg, weights, grads)
        dx0, demb = apply_mask_backward(dx0, idx)
        blocks.accumulate_grad(grads, "pretrain.mask_emb", demb)
        blocks.frontend_backward(dx0, cfg, weights, fcache, grads)

    if grad_transform is not None:
        grad_transform(grads)
    overflow = any(not np.isfinite(g).all() for g in grads.values())
    if overflow:
        new_scale = update_loss_scale(scale_state, True)
        metrics = {"loss": float(np.mean(losses)), "accuracy": float(np.mean(accs)),
                   "lr": 0.0, "scale": new_scale.scale, "skipped": 1}
        return metrics, new_scale
    inv = 1.0 / scale_state.scale
    for name in grads:
        grads[name] = grads[name] * inv
    lr = schedule.lr_at(step)
    adam_update(weights, grads, opt_state, lr, schedule)
    new_scale = update_loss_scale(scale_state, False)
    metrics = {"loss": float(np.mean(losses)), "accuracy": float(np.mean(accs)),
               "lr": lr, "scale": new_scale.scale, "skipped": 0}
    return metrics, new_scale


def sample_batch(items, labels_by_id, schedule, rng):
    """Draw utterances until the batch covers the seconds budget."""
    batch = []
    seconds = 0.0
    while seconds < schedule.batch_seconds and len(batch) < len(items):
        item = items[int(rng.integers(len(items)))]
        batch.append((item.wave, labels_by_id[item.utt_id]))
        seconds += item.seconds
    return batch


@dataclass
class PretrainSettings:
    encoder: blocks.EncoderConfig
    schedule: TrainSchedule
    mask: MaskSpec
    n_codes: int = 100
    proj_dim: int = 64
    target_layer: int = 6  # 1-based source layer for second-iteration targets
    iteration_steps: tuple = (250, 250)
    seed: int = 0
    tau: float = 0.1


def _train_once(items, labels_by_id, settings, weights, log_path):
    schedule = settings.schedule
    opt = AdamState()
    scale = LossScaleState()
    rng = np.random.default_rng(settings.seed + 17)
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "accuracy", "scale", "lr"])
        for step in range(schedule.total_steps):
            batch = sample_batch(items, labels_by_id, schedule, rng)
            metrics, scale = train_step(
                weights, batch, settings.encoder, settings.mask, schedule,
                opt, scale, step, rng, tau=settings.tau)
            writer.writerow([step, repr(metrics["loss"]), repr(metrics["accuracy"]),
                             repr(metrics["scale"]), repr(metrics["lr"])])
    return weights


def init_pretrain_weights(settings, seed):
    cfg = settings.encoder
    shapes = blocks.param_shapes(cfg)
    shapes.update(pretrain_head_shapes(cfg.d_model, settings.n_codes, settings.proj_dim))
    return blocks.init_weights(cfg, seed=seed, shapes=shapes)


def pretrain_pipeline(corpus_items, settings: PretrainSettings, out_dir):
    """Two-iteration pipeline; returns the checkpoint paths in order.

    Iteration 1 trains against MFCC k-means labels; iteration 2 restarts
    from scratch against k-means of the iteration-1 model's
    target_layer output (1-based; layer 6 by convention).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = sorted(corpus_items, key=lambda it: it.utt_id)
    cfg = settings.encoder

    mfcc = {it.utt_id: compute_mfcc(it.wave) for it in items}
    labels_by_id = _cluster_labels(mfcc, items, settings, settings.seed)

    paths = []
    schedule0 = settings.schedule
    weights = init_pretrain_weights(settings, settings.seed)
    settings = replace(settings, schedule=replace(schedule0, total_steps=settings.iteration_steps[0]))
    _train_once(items, labels_by_id, settings, weights, out_dir / "pretrain_iter1_log.csv")
    ckpt1 = out_dir / "iter1.ckpt"
    blocks.save_checkpoint(ckpt1, cfg, weights,
                           meta={"iteration": 1, "n_codes": settings.n_codes})
    paths.append(ckpt1)
    if len(settings.iteration_steps) < 2:
        return paths

    feats = {}
    for it in items:
        states = blocks.encoder_forward(it.wave, cfg, weights)
        feats[it.utt_id] = states[min(settings.target_layer, cfg.n_layers)]
    labels_by_id = _cluster_labels(feats, items, settings, settings.seed + 1)

    weights2 = init_pretrain_weights(settings, settings.seed + 1)
    settings2 = replace(settings, schedule=replace(schedule0, total_steps=settings.iteration_steps[1]))
    _train_once(items, labels_by_id, settings2, weights2, out_dir / "pretrain_iter2_log.csv")
    ckpt2 = out_dir / "iter2.ckpt"
    blocks.save_checkpoint(ckpt2, cfg, weights2,
                           meta={"iteration": 2, "n_codes": settings.n_codes})
    paths.append(ckpt2)
    return paths


def _cluster_labels(feats_by_id, items, settings, seed):
    pooled = np.concatenate([feats_by_id[it.utt_id] for it in items])
    centroids, _, _ = analysis.kmeans(pooled, settings.n_codes, seed=seed)
    out = {}
    for it in items:
        assign = analysis.assign_clusters(feats_by_id[it.utt_id], centroids)
        out[it.utt_id] = analysis.FrameLabels(assign, "cluster")
    return out
