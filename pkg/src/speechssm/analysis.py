"""Representation analysis: k-means quantization, phone purity, pooling,
CCA against label one-hots or external embeddings, and the rescaled
benchmark score.

All operations are pure; layer-wise reporting aggregates deterministically
in utterance-id order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import blocks
from .errors import AnchorError, DegenerateDataError, ShapeError

# ---------------------------------------------------------------------------
# Label carriers
# ---------------------------------------------------------------------------


@dataclass
class FrameLabels:
    """Frame-aligned non-negative integer ids (cluster or phone)."""

    labels: np.ndarray
    kind: str = "cluster"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1:
            raise ShapeError("FrameLabels expects a 1-D id sequence")
        if self.labels.size and self.labels.min() < 0:
            raise ShapeError("FrameLabels ids must be non-negative")

    def __len__(self):
        return len(self.labels)


@dataclass
class ScoreAnchors:
    """Per (task, metric): baseline (fbank) and best-known (sota) values
    plus the metric direction; the two anchors must differ."""

    table: dict  # (task, metric) -> (fbank, sota, direction)

    def __post_init__(self):
        for key, (fbank, sota, direction) in self.table.items():
            if fbank == sota:
                raise AnchorError(f"anchors for {key} coincide ({fbank})")
            if direction not in ("higher", "lower"):
                raise AnchorError(f"bad direction {direction!r} for {key}")
            if direction == "higher" and sota < fbank:
                raise AnchorError(f"{key}: higher-is-better but sota < fbank")
            if direction == "lower" and sota > fbank:
                raise AnchorError(f"{key}: lower-is-better but sota > fbank")


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def _pairwise_sq_dists(x, centroids):
    # ||x-c||^2 without forming the (M,k,F) intermediate
    d2 = (x * x).sum(axis=1)[:, None] + (centroids * centroids).sum(axis=1)[None, :]
    d2 -= 2.0 * (x @ centroids.T)
    return np.maximum(d2, 0.0)


def kmeans(x, k, seed=0, max_iter=100, tol=1e-6):
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centroids, assignments, inertia). Empty clusters are
    re-seeded to the point currently farthest from its centroid. Stops
    when the relative inertia decrease drops below tol.
    """
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0]
    if m < k:
        raise ShapeError(f"kmeans needs at least k={k} points, got {m}")
    if k > 1 and np.all(x == x[0]):
        raise DegenerateDataError("all points identical; cannot split into k > 1 clusters")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(m)]
    d2 = _pairwise_sq_dists(x, centroids[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = x[rng.integers(m)]
        else:
            centroids[j] = x[rng.choice(m, p=d2 / total)]
        d2 = np.minimum(d2, _pairwise_sq_dists(x, centroids[j:j + 1]).ravel())

    prev_inertia = np.inf
    for _ in range(max_iter):
        dists = _pairwise_sq_dists(x, centroids)
        assign = dists.argmin(axis=1)
        point_d2 = dists[np.arange(m), assign]
        inertia = float(point_d2.sum())
        assert inertia <= prev_inertia + 1e-9 * max(1.0, abs(prev_inertia)), \
            "inertia increased across Lloyd iterations"
        for j in range(k):
            sel = assign == j
            if sel.any():
                centroids[j] = x[sel].mean(axis=0)
            else:
                far = int(point_d2.argmax())
                centroids[j] = x[far]
                point_d2[far] = 0.0
        if prev_inertia - inertia < tol * max(prev_inertia, 1e-12):
            break
        prev_inertia = inertia
    dists = _pairwise_sq_dists(x, centroids)
    assign = dists.argmin(axis=1)
    inertia = float(dists[np.arange(m), assign].sum())
    return centroids, assign, inertia


def assign_clusters(x, centroids):
    """Nearest-centroid labels for new points."""
    return _pairwise_sq_dists(np.asarray(x, dtype=np.float64), centroids).argmin(axis=1)


# ---------------------------------------------------------------------------
# Purity and pooling
# ---------------------------------------------------------------------------


def phone_purity(cluster_labels: FrameLabels, phone_labels: FrameLabels):
    """Frame-weighted accuracy of mapping each cluster to its majority
    phone: (1/T) * sum_clusters max_phone count(cluster, phone)."""
    c = cluster_labels.labels
    p = phone_labels.labels
    if len(c) != len(p):
        raise ShapeError(f"label length mismatch: {len(c)} vs {len(p)}")
    if len(c) == 0:
        raise ShapeError("empty label sequences")
    n_c = int(c.max()) + 1
    n_p = int(p.max()) + 1
    table = np.zeros((n_c, n_p), dtype=np.int64)
    np.add.at(table, (c, p), 1)
    return float(table.max(axis=1).sum() / len(c))


def pool_phone_level(features, phone_labels: FrameLabels):
    """Mean vector per contiguous run of equal phone labels.

    Returns (pooled (P, d), segment phone ids (P,))."""
    features = np.asarray(features)
    p = phone_labels.labels
    if features.shape[0] != len(p):
        raise ShapeError(f"features/labels mismatch: {features.shape[0]} vs {len(p)}")
    boundaries = np.flatnonzero(np.diff(p)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(p)]])
    pooled = np.stack([features[s:e].mean(axis=0) for s, e in zip(starts, ends)])
    return pooled, p[starts].copy()


def pool_utterance(features):
    """Mean over the time axis."""
    features = np.asarray(features)
    if features.shape[0] < 1:
        raise ShapeError("cannot pool an empty sequence")
    return features.mean(axis=0)


def one_hot(labels: FrameLabels, n_classes):
    ids = labels.labels if isinstance(labels, FrameLabels) else np.asarray(labels)
    if ids.size and ids.max() >= n_classes:
        raise ShapeError(f"label {ids.max()} out of range for {n_classes} classes")
    out = np.zeros((len(ids), n_classes))
    out[np.arange(len(ids)), ids] = 1.0
    return out


# ---------------------------------------------------------------------------
# CCA
# ---------------------------------------------------------------------------


def cca_similarity(x, y, reg=None):
    """Mean canonical correlation between two views of the same samples.

    Solves the regularized eigenproblem via whitening: the singular values
    of (Sxx+exI)^(-1/2) Sxy (Syy+eyI)^(-1/2) are the canonical
    correlations. Returns the mean of the top r of them, clipped to
    [0, 1], where r = min(p, q) capped at the numerical rank of each
    centered view; the cap keeps one-hot label blocks (rank q-1 after
    centering) from dragging the mean down with a vacuous component.

    reg=None picks e = 1e-8 * trace(S)/dim per view; reg=0 requires
    full-rank covariances.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"sample counts differ: {x.shape[0]} vs {y.shape[0]}")
    m = x.shape[0]
    if m < 2:
        raise ShapeError("CCA needs at least 2 samples")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    sxx = xc.T @ xc / (m - 1)
    syy = yc.T @ yc / (m - 1)
    sxy = xc.T @ yc / (m - 1)
    if reg is None:
        if np.trace(sxx) <= 0 or np.trace(syy) <= 0:
            raise DegenerateDataError(
                "a view has zero variance (constant features); correlation "
                "is undefined")
        ex = 1e-8 * np.trace(sxx) / sxx.shape[0]
        ey = 1e-8 * np.trace(syy) / syy.shape[0]
    else:
        ex = ey = float(reg)
    sxx = sxx + ex * np.eye(sxx.shape[0])
    syy = syy + ey * np.eye(syy.shape[0])
    try:
        lx = np.linalg.cholesky(sxx)
        ly = np.linalg.cholesky(syy)
    except np.linalg.LinAlgError as exc:
        raise DegenerateDataError(
            "rank-deficient covariance; pass reg > 0 (or reg=None for the "
            "trace-scaled default)") from exc
    k = np.linalg.solve(lx, sxy)
    k = np.linalg.solve(ly, k.T).T
    corrs = np.clip(np.linalg.svd(k, compute_uv=False), 0.0, 1.0)
    r = min(np.linalg.matrix_rank(xc), np.linalg.matrix_rank(yc), len(corrs))
    if r == 0:
        return 0.0
    top = np.sort(corrs)[::-1][:r]
    return float(top.mean())


# ---------------------------------------------------------------------------
# Rescaled benchmark score
# ---------------------------------------------------------------------------


def superb_score(model_metrics, anchors: ScoreAnchors, tasks=None):
    """Linearly rescale each metric between its fbank and sota anchors,
    average within task, then across tasks, times 1000.

    Lower-is-better metrics need no special casing: the anchor difference
    in the denominator carries the sign.
    """
    table = anchors.table
    if tasks is None:
        tasks = sorted({task for task, _ in table})
    task_scores = []
    for task in tasks:
        metrics = sorted(metric for t, metric in table if t == task)
        if not metrics:
            raise AnchorError(f"no anchors for task {task!r}")
        vals = []
        for metric in metrics:
            if (task, metric) not in table:
                raise AnchorError(f"missing anchor for ({task}, {metric})")
            if (task, metric) not in model_metrics:
                raise AnchorError(f"missing model value for ({task}, {metric})")
            fbank, sota, _ = table[(task, metric)]
            vals.append((model_metrics[(task, metric)] - fbank) / (sota - fbank))
        task_scores.append(sum(vals) / len(vals))
    return 1000.0 * sum(task_scores) / len(task_scores)


def read_anchor_table(path):
    """CSV columns: task,metric,direction,fbank,sota."""
    table = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            table[(row["task"], row["metric"])] = (
                float(row["fbank"]), float(row["sota"]), row["direction"])
    if not table:
        raise AnchorError(f"{path}: no anchor rows")
    return ScoreAnchors(table)


def read_metric_table(path):
    """CSV columns: task,metric,value."""
    metrics = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            metrics[(row["task"], row["metric"])] = float(row["value"])
    return metrics


# ---------------------------------------------------------------------------
# Layer-wise report
# ---------------------------------------------------------------------------


def layerwise_metrics(states_by_utt, labels_by_utt, embeddings=None,
                      ks=(100, 500, 1000), seed=0):
    """Purity and CCA per layer over precomputed layer states.

    states_by_utt: list of per-utterance LayerStates (each a list of
    (L, d) arrays sharing the layer count). labels_by_utt: matching list
    of FrameLabels. embeddings: dict name -> (U, e) matrix in the same
    utterance order. Returns one row dict per layer.
    """
    embeddings = embeddings or {}
    n_states = len(states_by_utt[0])
    all_phones = np.concatenate([lab.labels for lab in labels_by_utt])
    n_phones = int(all_phones.max()) + 1

    rows = []
    for layer in range(n_states):
        feats = np.concatenate([states[layer] for states in states_by_utt])
        row = {"layer": layer}
        for k in ks:
            kk = min(k, feats.shape[0])
            _, assign, _ = kmeans(feats, kk, seed=seed)
            row[f"purity@{k}"] = phone_purity(
                FrameLabels(assign, "cluster"), FrameLabels(all_phones, "phone"))
        pooled_parts = []
        seg_id_parts = []
        utt_parts = []
        for states, lab in zip(states_by_utt, labels_by_utt):
            pooled, seg_ids = pool_phone_level(states[layer], lab)
            pooled_parts.append(pooled)
            seg_id_parts.append(seg_ids)
            utt_parts.append(pool_utterance(states[layer]))
        seg_onehot = one_hot(FrameLabels(np.concatenate(seg_id_parts), "phone"), n_phones)
        row["cca_phone"] = cca_similarity(np.concatenate(pooled_parts), seg_onehot)
        utt_mat = np.stack(utt_parts)
        for name, emb in embeddings.items():
            row[f"cca_{name}"] = cca_similarity(utt_mat, emb)
        rows.append(row)
    return rows


def layerwise_report(cfg, weights, utterances, phone_labels, embeddings=None,
                     ks=(100, 500, 1000), seed=0, workers=1):
    """Per-layer purity and CCA metrics over a corpus.

    utterances: list of (utt_id, waveform), processed in id order.
    phone_labels: dict utt_id -> FrameLabels aligned to encoder frames.
    embeddings: dict name -> dict utt_id -> vector (utterance level).
    Returns a list of row dicts, one per layer (0 = frontend output).
    """
    from .parallel import ordered_map

    states_by_utt = ordered_map(
        lambda uw: blocks.encoder_forward(uw[1], cfg, weights), utterances, workers)
    labels_by_utt = []
    for (utt_id, _), states in zip(utterances, states_by_utt):
        labels = phone_labels[utt_id]
        if len(labels) != states[0].shape[0]:
            raise ShapeError(
                f"{utt_id}: {len(labels)} phone labels vs {states[0].shape[0]} frames")
        labels_by_utt.append(labels)
    emb_matrices = {
        name: np.stack([by_id[utt_id] for utt_id, _ in utterances])
        for name, by_id in (embeddings or {}).items()
    }
    return layerwise_metrics(states_by_utt, labels_by_utt, emb_matrices, ks, seed)


def write_report_csv(path, rows):
    if not rows:
        raise ShapeError("empty report")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
