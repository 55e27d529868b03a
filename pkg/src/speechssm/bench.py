"""Compute-cost harness: analytic MAC counting, wall-clock RTF, analytic
peak-memory estimation with a predicted-OOM contract, and the
length-sweep report.

MAC conventions (pinned by tests): one MAC is one multiply-add; a matmul
(m,k)@(k,n) costs m*k*n; convs cost L_out*C_out*(C_in/groups)*K; the scan
costs L*D*(6N+1); activations, norms, softmax, bias adds and pure
elementwise multiplies cost 0. Causal attention computes the full score
map and masks it, so it costs the same as bidirectional.

count_macs(config, seconds) uses steady-state per-second rates (an exact
50 frames/s, no frame-edge flooring), which makes the per-second value of
every scan-family config constant in length exactly. The per-length
closed forms (frontend_macs, block_macs) use exact frame arithmetic and
match the instrumented counter bit for bit.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import blocks
from . import numerics as nm
from .errors import ShapeError

SAMPLE_RATE = 16000

MAMBA_FAMILY = ("mamba", "mamba_mlp", "ext_bimamba", "inn_bimamba")
ATTENTION_FAMILY = ("causal_attn", "bidir_attn")


# ---------------------------------------------------------------------------
# Exact per-length closed forms (instrumented-counter checkable)
# ---------------------------------------------------------------------------


def frontend_macs(cfg, n_samples):
    """Exact MACs of the frontend on a waveform of n_samples."""
    total = 0
    length = n_samples
    c_in = 1
    for kernel, stride, channels in cfg.frontend:
        length = (length - kernel) // stride + 1
        total += length * channels * c_in * kernel
        c_in = channels
    d = cfg.d_model
    total += length * c_in * d  # projection
    # positional conv: causal keeps L columns, same-pad computes L+1
    pos_cols = length if cfg.is_causal else length + 1
    total += pos_cols * d * (d // cfg.pos_conv_groups) * cfg.pos_conv_kernel
    return total


def _mamba_core_macs(cfg, L):
    d, di, n, k = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.conv_kernel
    total = L * d * 2 * di          # input projection
    total += L * di * k             # causal depthwise conv
    total += L * di * n * 2 + L * di  # B, C, delta selection
    total += L * di * (6 * n + 1)   # scan
    total += L * di * d             # output projection
    return total


def _mlp_macs(cfg, L):
    return 2 * L * cfg.d_model * cfg.mlp_hidden


def block_macs(cfg, L):
    """Exact MACs of one block on L frames."""
    kind = cfg.block_kind
    if kind == "mamba":
        return _mamba_core_macs(cfg, L)
    if kind == "mamba_mlp":
        return _mamba_core_macs(cfg, L) + _mlp_macs(cfg, L)
    if kind == "ext_bimamba":
        return 2 * _mamba_core_macs(cfg, L)
    if kind == "inn_bimamba":
        d, di, n, k = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.conv_kernel
        total = L * d * 2 * di + L * di * d      # shared projections
        total += 2 * (L * di * k + L * di * n * 2 + L * di + L * di * (6 * n + 1))
        return total
    if kind in ATTENTION_FAMILY:
        d = cfg.d_model
        total = 4 * L * d * d            # q, k, v, o projections
        total += 2 * L * L * d           # scores and weighted values
        total += _mlp_macs(cfg, L)
        return total
    raise ShapeError(f"unknown block kind {kind!r}")


def encoder_macs(cfg, n_samples):
    """Exact MACs of a full forward pass (frontend + stack)."""
    L = cfg.frame_count(n_samples)
    return frontend_macs(cfg, n_samples) + cfg.n_layers * block_macs(cfg, L)


# ---------------------------------------------------------------------------
# Idealized per-second cost model
# ---------------------------------------------------------------------------


def _frontend_rate(cfg):
    rate = float(SAMPLE_RATE)
    total = 0.0
    c_in = 1
    for kernel, stride, channels in cfg.frontend:
        rate /= stride
        total += rate * channels * c_in * kernel
        c_in = channels
    d = cfg.d_model
    total += rate * c_in * d
    total += rate * d * (d // cfg.pos_conv_groups) * cfg.pos_conv_kernel
    return total, rate


def count_macs(cfg, seconds):
    """Analytic MACs per second of audio at the steady-state frame rate.

    Scan-family configs have no length term, so the result is the same
    float for every duration; attention adds one term linear in seconds
    (a quadratic un-normalized total).
    """
    if seconds <= 0:
        raise ShapeError("seconds must be positive")
    frontend, frame_rate = _frontend_rate(cfg)
    d = cfg.d_model
    per_frame = block_macs(cfg, 1)
    if cfg.block_kind in ATTENTION_FAMILY:
        # remove the L-dependent part of the L=1 evaluation, then add the
        # exact per-second quadratic term: 2*L^2*d per layer over seconds
        per_frame -= 2 * d
        quadratic = 2.0 * d * frame_rate * frame_rate * seconds * cfg.n_layers
    else:
        quadratic = 0.0
    return frontend + frame_rate * per_frame * cfg.n_layers + quadratic


def total_macs(cfg, seconds):
    """Un-normalized total for the quadratic certificate."""
    return count_macs(cfg, seconds) * seconds


# ---------------------------------------------------------------------------
# Peak-memory estimate
#
# Models the inference forward: parameters, the frontend transient, all
# retained layer states, and the widest single-block transient. Attention
# keeps per-head score maps: 3 score-sized arrays plus a byte mask in
# causal mode (the mask structure is what pushes causal above
# bidirectional), 2 score-sized arrays bidirectional.
# ---------------------------------------------------------------------------


def estimate_peak_memory(cfg, seconds, batch=1, dtype_bytes=8):
    n_samples = int(round(seconds * SAMPLE_RATE))
    L = cfg.frame_count(n_samples)
    d = cfg.d_model
    params = blocks.count_params(cfg) * 8  # weights stay float64

    frontend_elems = 0
    length = n_samples
    for kernel, stride, channels in cfg.frontend:
        length = (length - kernel) // stride + 1
        # conv input, pre-activation and activated copies live together
        frontend_elems += 3 * length * channels
    frontend_bytes = (frontend_elems + 3 * L * d) * dtype_bytes

    states_bytes = (cfg.n_layers + 1) * L * d * dtype_bytes

    kind = cfg.block_kind
    if kind in ATTENTION_FAMILY:
        # transient score-sized arrays coexisting inside the masked
        # softmax expression; the causal path keeps one replaced copy and
        # the mask structure on top of the bidirectional count
        score_copies = 5 if kind == "causal_attn" else 4
        block_bytes = (5 * L * d + 2 * L * cfg.mlp_hidden) * dtype_bytes
        block_bytes += score_copies * L * L * dtype_bytes
        if kind == "causal_attn":
            block_bytes += L * L  # boolean keep mask
    else:
        di = cfg.d_inner
        block_bytes = (2 * L * d + 10 * L * di + 2 * L * cfg.d_state) * dtype_bytes
        if kind == "ext_bimamba":
            block_bytes += L * d * dtype_bytes  # reversed input copy
    return int(params + batch * max(frontend_bytes, states_bytes + block_bytes))


# ---------------------------------------------------------------------------
# RTF
# ---------------------------------------------------------------------------


def measure_rtf(cfg, weights, seconds, runs=10, seed=0, dtype=np.float64):
    """Wall-clock forward time over audio duration, single-threaded.

    One warmup run is excluded; returns (mean, std) over `runs`.
    """
    from threadpoolctl import threadpool_limits

    rng = np.random.default_rng(seed)
    wave = (rng.standard_normal(int(round(seconds * SAMPLE_RATE))) * 0.1).astype(dtype)
    w = blocks.cast_weights(weights, dtype) if dtype != np.float64 else weights
    values = []
    with threadpool_limits(limits=1):
        for run in range(runs + 1):
            t0 = time.perf_counter()
            blocks.encoder_forward(wave, cfg, w)
            elapsed = time.perf_counter() - t0
            if run > 0:
                values.append(elapsed / seconds)
    return float(np.mean(values)), float(np.std(values))


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

DEFAULT_LENGTHS = (5, 10, 20, 40, 80, 160, 320)


@dataclass(frozen=True, eq=False)
class SweepRow:
    model: str
    seconds: float
    macs_per_sec: float
    rtf_mean: float      # nan when predicted_oom
    rtf_std: float
    est_peak_bytes: int
    predicted_oom: bool

    def __eq__(self, other):
        # nan-aware so flagged (untimed) rows round-trip as equal
        if not isinstance(other, SweepRow):
            return NotImplemented

        def same(a, b):
            if isinstance(a, float) and isinstance(b, float):
                return (np.isnan(a) and np.isnan(b)) or a == b
            return a == b

        return all(same(getattr(self, f), getattr(other, f))
                   for f in ("model", "seconds", "macs_per_sec", "rtf_mean",
                             "rtf_std", "est_peak_bytes", "predicted_oom"))


@dataclass
class SweepResult:
    rows: list

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "seconds", "macs_per_sec", "rtf_mean",
                             "rtf_std", "est_peak_bytes", "predicted_oom"])
            for r in self.rows:
                writer.writerow([r.model, repr(float(r.seconds)), repr(float(r.macs_per_sec)),
                                 repr(float(r.rtf_mean)), repr(float(r.rtf_std)),
                                 str(r.est_peak_bytes), str(int(r.predicted_oom))])

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for model, sec, macs, mean, std, peak, oom in reader:
                rows.append(SweepRow(model, float(sec), float(macs), float(mean),
                                     float(std), int(peak), bool(int(oom))))
        return cls(rows)


def sweep(configs, lengths=DEFAULT_LENGTHS, budget_bytes=None, runs=10, seed=0,
          dtype=np.float64, time_runs=True):
    """Measure every (config, length) pair.

    configs: list of (name, EncoderConfig). Rows whose estimated peak
    exceeds budget_bytes are flagged predicted_oom and skipped for
    timing; set time_runs=False to emit an analytic-only sweep.
    """
    rows = []
    for name, cfg in configs:
        weights = blocks.init_weights(cfg, seed=seed) if time_runs else None
        for seconds in lengths:
            est = estimate_peak_memory(cfg, seconds)
            macs = count_macs(cfg, seconds)
            if budget_bytes is not None and est > budget_bytes:
                rows.append(SweepRow(name, seconds, macs, float("nan"), float("nan"),
                                     est, True))
                continue
            if time_runs:
                mean, std = measure_rtf(cfg, weights, seconds, runs=runs, seed=seed,
                                        dtype=dtype)
            else:
                mean, std = float("nan"), float("nan")
            rows.append(SweepRow(name, seconds, macs, mean, std, est, False))
    return SweepResult(rows)


# ---------------------------------------------------------------------------
# Two-panel SVG line plot (MACs/sec left, RTF right)
# ---------------------------------------------------------------------------

_PALETTE = ("#ff7f0e", "#1f77b4", "#ffbf86", "#8fbbd9", "#2ca02c", "#d62728")


def _panel(x0, rows_by_model, value, title, log_y):
    width, height = 360, 280
    pad = 46
    pts = {}
    for model, rows in rows_by_model.items():
        series = [(r.seconds, getattr(r, value)) for r in rows
                  if not (r.predicted_oom or np.isnan(getattr(r, value)))]
        if series:
            pts[model] = series
    xs = sorted({s for series in pts.values() for s, _ in series})
    ys = [v for series in pts.values() for _, v in series]
    if not ys:
        return [f'<text x="{x0 + width / 2}" y="{height / 2}">no data: {title}</text>']
    y_lo, y_hi = min(ys), max(ys)
    if log_y:
        y_lo, y_hi = np.log10(max(y_lo, 1e-12)), np.log10(max(y_hi, 1e-12))
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0

    def sx(s):
        return x0 + pad + (width - 2 * pad) * (np.log10(s) - np.log10(xs[0])) / \
            max(1e-9, np.log10(xs[-1]) - np.log10(xs[0]))

    def sy(v):
        vv = np.log10(max(v, 1e-12)) if log_y else v
        return height - pad - (height - 2 * pad) * (vv - y_lo) / (y_hi - y_lo)

    parts = [f'<rect x="{x0 + pad}" y="{pad}" width="{width - 2 * pad}" '
             f'height="{height - 2 * pad}" fill="none" stroke="#999"/>',
             f'<text x="{x0 + width / 2:.1f}" y="{pad - 14}" text-anchor="middle" '
             f'font-size="13">{title}</text>']
    for i, (model, series) in enumerate(sorted(pts.items())):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(s):.1f},{sy(v):.1f}" for s, v in series)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="1.6"/>')
        for s, v in series:
            parts.append(f'<circle cx="{sx(s):.1f}" cy="{sy(v):.1f}" r="2.4" '
                         f'fill="{color}"/>')
        parts.append(f'<text x="{x0 + pad + 4}" y="{pad + 14 + 13 * i}" font-size="11" '
                     f'fill="{color}">{model}</text>')
    for s in xs:
        parts.append(f'<text x="{sx(s):.1f}" y="{height - pad + 14}" font-size="10" '
                     f'text-anchor="middle">{s:g}</text>')
    return parts


def write_sweep_svg(path, result: SweepResult):
    """Two panels side by side, one line per model."""
    by_model = {}
    for r in result.rows:
        by_model.setdefault(r.model, []).append(r)
    parts = ['<svg xmlns="http://www.w3.org/2000/svg" width="760" height="290" '
             'font-family="sans-serif">']
    parts += _panel(0, by_model, "macs_per_sec", "MACs per second", log_y=True)
    parts += _panel(380, by_model, "rtf_mean", "Real-time factor", log_y=True)
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
