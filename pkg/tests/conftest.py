"""Shared fixtures: tiny configs, a synthetic corpus, and the
finite-difference comparison helper used by every gradient suite."""

import numpy as np
import pytest

from speechssm import blocks, corpus
from speechssm.numerics import finite_diff_grad, relative_grad_error

TINY_FRONTEND = ((4, 2, 3), (3, 2, 3), (2, 1, 3), (2, 1, 3), (2, 1, 4), (2, 1, 4), (2, 2, 4))


def tiny_config(kind, n_layers=1, d_model=6, **kw):
    defaults = dict(
        block_kind=kind, n_layers=n_layers, d_model=d_model, d_state=2,
        expand=2, conv_kernel=3, n_heads=2, mlp_ratio=2.0,
        frontend=TINY_FRONTEND, pos_conv_kernel=4, pos_conv_groups=2)
    defaults.update(kw)
    return blocks.EncoderConfig(**defaults)


def small_frontend(channels):
    return ((10, 5, channels), (3, 2, channels), (3, 2, channels), (3, 2, channels),
            (3, 2, channels), (2, 2, channels), (2, 2, channels))


def check_gradients(loss_fn, weights, analytic_grads, names=None, dx_pair=None,
                    h=1e-5):
    """Compare analytic gradients to central differences as one vector.

    loss_fn(weights) -> scalar. Returns the global relative error; fields
    whose true gradient is zero (for instance key-projection biases under
    softmax shift invariance) are handled by the shared scale.
    """
    a_parts, n_parts = [], []
    if dx_pair is not None:
        analytic_dx, fd_fn, x = dx_pair
        a_parts.append(np.asarray(analytic_dx).ravel())
        n_parts.append(finite_diff_grad(fd_fn, np.array(x, dtype=float), h).ravel())
    for name in (names or sorted(weights)):
        arr = weights[name]

        def f(v, name=name, arr=arr):
            w2 = dict(weights)
            w2[name] = v.reshape(arr.shape) if arr.shape else v
            return loss_fn(w2)

        fd = finite_diff_grad(f, np.array(arr, dtype=float), h)
        a_parts.append(np.asarray(analytic_grads.get(name, np.zeros(arr.shape))).ravel())
        n_parts.append(fd.ravel())
    return relative_grad_error(np.concatenate(a_parts), np.concatenate(n_parts))


@pytest.fixture(scope="session")
def mini_corpus(tmp_path_factory):
    """24 utterances, 5 phones, 3 speakers; session-wide."""
    root = tmp_path_factory.mktemp("minicorpus")
    corpus.generate_synthetic_corpus(24, 5, 3, seed=11, out_dir=root,
                                     min_frames=18, max_frames=36)
    return root


@pytest.fixture(scope="session")
def mini_items(mini_corpus):
    return corpus.load_corpus(mini_corpus)
