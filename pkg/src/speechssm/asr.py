"""CTC fine-tuning and evaluation.

Three modes: utterance (one clip per sample), document (all utterances of
a talk concatenated, evaluated whole), and causal (causal encoder plus
causal head, no lookahead). Greedy decoding, token error rate, and the
paired t-test used to compare WER lists.

Character-level vocabulary; blank is index 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import bench, blocks
from . import numerics as nm
from .errors import (ConfigError, DegenerateDataError, InfeasibleAlignmentError,
                     ShapeError)
from .pretrain import AdamState, TrainSchedule, adam_update

NEG_INF = -np.inf

# ---------------------------------------------------------------------------
# CTC loss (log space) and analytic gradient
# ---------------------------------------------------------------------------


def _augmented(labels):
    """Blank-interleaved label sequence: [b, y1, b, y2, ..., b]."""
    aug = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    aug[1::2] = labels
    return aug


def ctc_min_frames(labels):
    """Minimum input length admitting an alignment."""
    labels = np.asarray(labels)
    repeats = int(np.sum(labels[1:] == labels[:-1])) if len(labels) > 1 else 0
    return len(labels) + repeats


def ctc_loss(log_probs, labels, with_grad=False):
    """Negative log probability of labels under the CTC alignment model.

    log_probs: (T, V+1) rows, log-softmax normalized, blank at column 0.
    Returns the loss, or (loss, grad) with grad w.r.t. the log_probs
    entries when with_grad is set.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    T = lp.shape[0]
    if np.any(labels <= 0) or np.any(labels >= lp.shape[1]):
        raise ShapeError("labels must be in [1, vocab]; blank (0) is reserved")
    if T < ctc_min_frames(labels):
        raise InfeasibleAlignmentError(
            f"{len(labels)} labels need >= {ctc_min_frames(labels)} frames, got {T}")
    aug = _augmented(labels)
    S = len(aug)
    # skip transitions allowed where the symbol differs from two back
    allow_skip = np.zeros(S, dtype=bool)
    if S > 2:
        allow_skip[2:] = (aug[2:] != 0) & (aug[2:] != aug[:-2])

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, aug[0]]
    if S > 1:
        alpha[0, 1] = lp[0, aug[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        step = np.full(S, NEG_INF)
        step[1:] = prev[:-1]
        acc = np.logaddexp(prev, step)
        if S > 2:
            skip = np.full(S, NEG_INF)
            skip[2:] = prev[:-2]
            acc = np.where(allow_skip, np.logaddexp(acc, skip), acc)
        alpha[t] = acc + lp[t, aug]
    tails = [alpha[T - 1, S - 1]]
    if S > 1:
        tails.append(alpha[T - 1, S - 2])
    log_total = np.logaddexp.reduce(tails)
    loss = -float(log_total)
    if not with_grad:
        return loss

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = lp[T - 1, aug[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, aug[S - 2]]
    # mirrored skip rule: from s to s+2 when symbols differ and s+2 non-blank
    allow_skip_f = np.zeros(S, dtype=bool)
    if S > 2:
        allow_skip_f[:-2] = allow_skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        step = np.full(S, NEG_INF)
        step[:-1] = nxt[1:]
        acc = np.logaddexp(nxt, step)
        if S > 2:
            skip = np.full(S, NEG_INF)
            skip[:-2] = nxt[2:]
            acc = np.where(allow_skip_f, np.logaddexp(acc, skip), acc)
        beta[t] = acc + lp[t, aug]

    # gamma sums path mass through (t, s); the emission at t is counted once
    gamma = alpha + beta - lp[:, aug]
    post = np.exp(gamma - log_total)
    grad = np.zeros_like(lp)
    for s in range(S):
        grad[:, aug[s]] -= post[:, s]
    return loss, grad


def log_softmax(x):
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax_backward(dout, log_probs):
    return dout - np.exp(log_probs) * dout.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Greedy decoding and token error rate
# ---------------------------------------------------------------------------


def greedy_ctc_decode(log_probs):
    """Argmax per frame, collapse repeats, drop blanks."""
    best = np.asarray(log_probs).argmax(axis=1)
    out = []
    prev = -1
    for b in best:
        if b != prev and b != 0:
            out.append(int(b))
        prev = b
    return out


def wer(ref, hyp):
    """Levenshtein distance over tokens divided by reference length."""
    ref = list(ref)
    hyp = list(hyp)
    if not ref:
        raise DegenerateDataError("WER undefined for an empty reference")
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1] / len(ref)


def paired_t_test(wer_a, wer_b):
    """Two-sided paired t-test; returns (t, p).

    p comes from the Student-t CDF evaluated through the continued-
    fraction regularized incomplete beta.
    """
    a = np.asarray(wer_a, dtype=np.float64)
    b = np.asarray(wer_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("paired t-test needs two equal-length 1-D lists")
    n = len(a)
    if n < 2:
        raise DegenerateDataError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        raise DegenerateDataError("zero-variance nonzero-mean differences: t is infinite")
    t = float(mean / (sd / math.sqrt(n)))
    dof = n - 1
    p = betainc_regularized(dof / 2.0, 0.5, dof / (dof + t * t))
    return t, float(min(1.0, p))


def betainc_regularized(a, b, x):
    """Regularized incomplete beta I_x(a, b) by Lentz's continued fraction."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(ln_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(ln_front) * _betacf(b, a, 1.0 - x) / b


def _betacf(a, b, x, max_iter=200, eps=3e-14):
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


# ---------------------------------------------------------------------------
# Conv head over encoder output: 12 residual kernel-3 layers plus the
# output projection to vocab+1 (blank index 0). Stride-1 same/causal
# padding keeps the frame count.
# ---------------------------------------------------------------------------

HEAD_LAYERS = 12


def head_shapes(d_model, vocab_size):
    shapes = {}
    for i in range(HEAD_LAYERS):
        shapes[f"head.conv{i}.weight"] = (d_model, d_model, 3)
        shapes[f"head.conv{i}.bias"] = (d_model,)
    shapes["head.out.weight"] = (d_model, vocab_size + 1)
    shapes["head.out.bias"] = (vocab_size + 1,)
    return shapes


def head_forward(x, w, causal, training=False):
    pad = "causal" if causal else 1
    caches = []
    for i in range(HEAD_LAYERS):
        pre = nm.conv1d(x.T, w[f"head.conv{i}.weight"], w[f"head.conv{i}.bias"],
                        padding=pad).T
        if training:
            caches.append((x, pre))
        x = x + nm.gelu(pre)
    logits = nm.linear(x, w["head.out.weight"], w["head.out.bias"])
    log_probs = log_softmax(logits)
    cache = (caches, x, log_probs, pad) if training else None
    return log_probs, cache


def head_backward(dlp, cache, w, grads):
    caches, x_last, log_probs, pad = cache
    dlogits = log_softmax_backward(dlp, log_probs)
    dx, dwo, dbo = nm.linear_backward(dlogits, x_last, w["head.out.weight"])
    blocks.accumulate_grad(grads, "head.out.weight", dwo)
    blocks.accumulate_grad(grads, "head.out.bias", dbo)
    for i in range(HEAD_LAYERS - 1, -1, -1):
        xin, pre = caches[i]
        dpre = nm.gelu_backward(dx, pre)
        dxin, dk, db = nm.conv1d_backward(dpre.T, xin.T, w[f"head.conv{i}.weight"],
                                          padding=pad)
        blocks.accumulate_grad(grads, f"head.conv{i}.weight", dk)
        blocks.accumulate_grad(grads, f"head.conv{i}.bias", db)
        dx = dx + dxin.T
    return dx


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class AsrSample:
    sample_id: str
    wave: np.ndarray
    transcript: str


def build_vocab(samples):
    chars = sorted({ch for s in samples for ch in s.transcript})
    return chars


def encode_transcript(text, vocab):
    index = {ch: i + 1 for i, ch in enumerate(vocab)}
    try:
        return np.array([index[ch] for ch in text], dtype=np.int64)
    except KeyError as exc:
        raise ShapeError(f"transcript symbol {exc} missing from vocabulary") from exc


def decode_tokens(tokens, vocab):
    return "".join(vocab[t - 1] for t in tokens)


def group_documents(utterances, max_doc_seconds=1200.0):
    """Concatenate each document's utterances (id order); talks longer
    than the cap are removed."""
    docs = {}
    for utt in sorted(utterances, key=lambda u: u.utt_id):
        docs.setdefault(utt.document, []).append(utt)
    samples = []
    for doc_id, utts in sorted(docs.items()):
        wave = np.concatenate([u.wave for u in utts])
        if len(wave) / corpus_sample_rate() > max_doc_seconds:
            continue
        transcript = "".join(u.transcript for u in utts)
        samples.append(AsrSample(doc_id, wave, transcript))
    return samples


def corpus_sample_rate():
    from . import corpus
    return corpus.SAMPLE_RATE


def document_crops(utterances, crop_seconds, rng, max_doc_seconds=1200.0):
    """Training crops for document mode: contiguous utterance runs whose
    total duration stays within the crop budget (crops respect utterance
    boundaries so the transcript stays aligned)."""
    docs = {}
    for utt in sorted(utterances, key=lambda u: u.utt_id):
        docs.setdefault(utt.document, []).append(utt)
    doc_list = [utts for _, utts in sorted(docs.items())
                if sum(u.seconds for u in utts) <= max_doc_seconds]

    def sample():
        utts = doc_list[int(rng.integers(len(doc_list)))]
        start = int(rng.integers(len(utts)))
        total = 0.0
        chunk = []
        for u in utts[start:]:
            if total + u.seconds > crop_seconds and chunk:
                break
            chunk.append(u)
            total += u.seconds
        wave = np.concatenate([u.wave for u in chunk])
        transcript = "".join(u.transcript for u in chunk)
        return AsrSample(chunk[0].utt_id, wave, transcript)

    return sample


def _ctc_step(weights, cfg, sample, vocab, causal, grads):
    x0, fcache = blocks.frontend_forward(sample.wave, cfg, weights, training=True)
    states, caches = blocks.stack_forward(x0, cfg, weights, training=True)
    log_probs, hcache = head_forward(states[-1], weights, causal, training=True)
    labels = encode_transcript(sample.transcript, vocab)
    loss, ctc_grad = ctc_loss(log_probs, labels, with_grad=True)
    dlast = head_backward(ctc_grad, hcache, weights, grads)
    dx0 = blocks.stack_backward(dlast, caches, cfg, weights, grads)
    blocks.frontend_backward(dx0, cfg, weights, fcache, grads)
    return loss


def evaluate_wer(weights, cfg, samples, vocab, causal, workers=1):
    """Greedy-decode every sample; returns (rows, mean_wer) with rows of
    (sample_id, wer). Samples are independent; aggregation keeps input
    order regardless of worker count."""
    from .parallel import ordered_map

    def one(sample):
        states = blocks.encoder_forward(sample.wave, cfg, weights)
        log_probs, _ = head_forward(states[-1], weights, causal, training=False)
        hyp = decode_tokens(greedy_ctc_decode(log_probs), vocab)
        return sample.sample_id, wer(sample.transcript, hyp)

    rows = ordered_map(one, samples, workers)
    mean = float(np.mean([r[1] for r in rows])) if rows else 0.0
    return rows, mean


def finetune(cfg, weights, train_utts, eval_utts, mode, schedule: TrainSchedule,
             seed=0, budget_bytes=None, crop_seconds=20.0, max_doc_seconds=1200.0,
             vocab=None, workers=1):
    """Joint CTC training of encoder plus head; returns
    (weights, vocab, report_rows, mean_wer).

    mode: utterance | document | causal. Document mode concatenates each
    document for evaluation, trains on utterance-boundary crops, and
    raises PredictedOomError before any allocation when the analytic
    memory estimate for the longest document exceeds budget_bytes.
    """
    if mode not in ("utterance", "document", "causal"):
        raise ConfigError(f"unknown fine-tuning mode {mode!r}")
    causal = mode == "causal"
    if causal and not cfg.is_causal:
        raise ConfigError(f"causal mode requires a causal block kind, got {cfg.block_kind}")

    rng = np.random.default_rng(seed)
    if mode == "document":
        eval_samples = group_documents(eval_utts, max_doc_seconds)
        train_sampler = document_crops(train_utts, crop_seconds, rng, max_doc_seconds)
        if budget_bytes is not None and eval_samples:
            longest = max(len(s.wave) for s in eval_samples) / corpus_sample_rate()
            est = bench.estimate_peak_memory(cfg, longest)
            if est > budget_bytes:
                from .errors import PredictedOomError
                raise PredictedOomError(
                    f"estimated peak {est} bytes for a {longest:.0f}s document "
                    f"exceeds the {budget_bytes}-byte budget", est, budget_bytes)
    else:
        eval_samples = [AsrSample(u.utt_id, u.wave, u.transcript)
                        for u in sorted(eval_utts, key=lambda u: u.utt_id)]
        train_samples = [AsrSample(u.utt_id, u.wave, u.transcript)
                         for u in sorted(train_utts, key=lambda u: u.utt_id)]
        train_sampler = lambda: train_samples[int(rng.integers(len(train_samples)))]

    if vocab is None:
        vocab = build_vocab([AsrSample(u.utt_id, u.wave, u.transcript)
                             for u in train_utts])
    for name, shape in head_shapes(cfg.d_model, len(vocab)).items():
        if name not in weights:
            weights[name] = blocks._init_one(name, shape, rng, np.float64)

    opt = AdamState()
    for step in range(schedule.total_steps):
        grads = {}
        losses = []
        batch, seconds = [], 0.0
        while seconds < schedule.batch_seconds and len(batch) < 64:
            s = train_sampler()
            batch.append(s)
            seconds += len(s.wave) / corpus_sample_rate()
        for s in batch:
            losses.append(_ctc_step(weights, cfg, s, vocab, causal, grads))
        inv = 1.0 / len(batch)
        for name in grads:
            grads[name] = grads[name] * inv
        adam_update(weights, grads, opt, schedule.lr_at(step), schedule)

    rows, mean = evaluate_wer(weights, cfg, eval_samples, vocab, causal, workers)
    return weights, vocab, rows, mean


def write_wer_report(path, rows, mean):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "wer"])
        for sample_id, value in rows:
            writer.writerow([sample_id, repr(float(value))])
        writer.writerow(["__mean__", repr(float(mean))])


def read_wer_report(path):
    rows = []
    mean = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for sample_id, value in reader:
            if sample_id == "__mean__":
                mean = float(value)
            else:
                rows.append((sample_id, float(value)))
    return rows, mean
