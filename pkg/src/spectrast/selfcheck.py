"""Gradient verification: analytic backward vs central finite differences.

Used both by the test suite and by the `spectrast selfcheck` command. Every
check builds a scalar loss from randomized small inputs, runs backward, and
compares each parameter gradient against a two-sided difference quotient.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .model import STConfig, forward, init
from .nn import Tensor

DEFAULT_TOL = 1e-4


def finite_difference_grads(f, tensors, h=1e-6):
    """Central differences of scalar f() w.r.t. each tensor, element by element."""
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(t.data.shape))
    return grads


def rel_error(analytic, numeric):
    # the floor absorbs FD cancellation noise when a gradient is exactly zero
    # (e.g. the key-projection bias, which softmax invariance cancels)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-3)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(loss_fn, tensors, h=1e-6):
    """Max relative error across `tensors` between backward and FD gradients."""
    for t in tensors:
        t.zero_grad()
    loss = loss_fn()
    nn.backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]
    numeric = finite_difference_grads(lambda: float(loss_fn().data), tensors, h)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


def _params(rng, *shapes):
    return [Tensor(rng.standard_normal(s), requires_grad=True) for s in shapes]


def _weighted_sum(out, rng):
    # random projection makes the scalar sensitive to every output element
    return (out * Tensor(rng.standard_normal(out.shape))).sum()


def check_linear(seed):
    rng = np.random.default_rng(seed)
    x, w, b = _params(rng, (2, 5, 3), (3, 4), (4,))
    return check_gradients(lambda: _weighted_sum(nn.linear(x, w, b), np.random.default_rng(seed + 1)), [x, w, b])


def check_layer_norm(seed):
    rng = np.random.default_rng(seed)
    x, gamma, beta = _params(rng, (2, 4, 6), (6,), (6,))
    return check_gradients(
        lambda: _weighted_sum(nn.layer_norm(x, gamma, beta), np.random.default_rng(seed + 1)),
        [x, gamma, beta],
    )


def check_gelu(seed):
    rng = np.random.default_rng(seed)
    (x,) = _params(rng, (3, 7))
    return check_gradients(
        lambda: _weighted_sum(nn.gelu(x), np.random.default_rng(seed + 1)), [x]
    )


def check_softmax(seed):
    rng = np.random.default_rng(seed)
    (x,) = _params(rng, (3, 6))
    return check_gradients(
        lambda: _weighted_sum(nn.softmax(x), np.random.default_rng(seed + 1)), [x]
    )


def check_attention(seed):
    rng = np.random.default_rng(seed)
    q, k, v = _params(rng, (2, 2, 5, 3), (2, 2, 5, 3), (2, 2, 5, 3))
    return check_gradients(
        lambda: _weighted_sum(nn.scaled_dot_attention(q, k, v), np.random.default_rng(seed + 1)),
        [q, k, v],
    )


def check_multi_head_attention(seed):
    from .model import MHAParams

    rng = np.random.default_rng(seed)
    d = 10
    x = Tensor(rng.standard_normal((2, 5, d)), requires_grad=True)
    mats = _params(rng, *([(d, d), (d,)] * 4))
    mha = MHAParams(*mats)
    tensors = [x] + mats
    return check_gradients(
        lambda: _weighted_sum(
            nn.multi_head_attention(x, mha, n_heads=2), np.random.default_rng(seed + 1)
        ),
        tensors,
    )


def check_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    (logits,) = _params(rng, (6, 4))
    labels = rng.integers(0, 4, 6)
    return check_gradients(lambda: nn.cross_entropy(logits, labels), [logits])


def check_embedding(seed):
    rng = np.random.default_rng(seed)
    cfg = STConfig(depth_i=1, heads_j=2, mlp_ratio_k=2, d_model=6,
                   n_classes=3, seq_len=8, dropout_p=0.0)
    params = init(cfg, seed)
    x = rng.random((2, cfg.seq_len))
    tensors = [params.embed_w, params.embed_b, params.pos]
    from .model import embed

    return check_gradients(
        lambda: _weighted_sum(embed(x, params, cfg), np.random.default_rng(seed + 1)),
        tensors,
    )


def check_sequence_pooling(seed):
    rng = np.random.default_rng(seed)
    h, u = _params(rng, (2, 6, 4), (4, 1))

    def loss_fn():
        scores = nn.linear(h, u)
        weights = nn.softmax(scores.transpose((0, 2, 1)))
        pooled = (weights @ h).reshape(2, 4)
        return _weighted_sum(pooled, np.random.default_rng(seed + 1))

    return check_gradients(loss_fn, [h, u])


def check_full_model(seed, h=1e-5):
    cfg = STConfig(depth_i=1, heads_j=2, mlp_ratio_k=3, d_model=8,
                   n_classes=3, seq_len=16, dropout_p=0.0)
    params = init(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.random((2, cfg.seq_len))
    labels = rng.integers(0, cfg.n_classes, 2)
    tensors = [t for _, t in params.named_parameters()]
    return check_gradients(
        lambda: nn.cross_entropy(forward(x, params, cfg, training=False), labels),
        tensors, h=h,
    )


PRIMITIVE_CHECKS = [
    ("linear", check_linear),
    ("layer_norm", check_layer_norm),
    ("gelu", check_gelu),
    ("softmax", check_softmax),
    ("attention", check_attention),
    ("multi_head_attention", check_multi_head_attention),
    ("cross_entropy", check_cross_entropy),
    ("embedding", check_embedding),
    ("sequence_pooling", check_sequence_pooling),
]


def run_selfcheck(n_seeds=20, tol=DEFAULT_TOL):
    """Run every gradient check; returns [{"name", "max_rel_err", "passed"}]."""
    results = []
    for name, check in PRIMITIVE_CHECKS:
        err = max(check(seed) for seed in range(n_seeds))
        results.append({"name": name, "max_rel_err": err, "passed": err <= tol})
    err = max(check_full_model(seed) for seed in range(n_seeds))
    results.append({"name": "full_model_st_pe_1_2_3", "max_rel_err": err,
                    "passed": err <= tol})
    return results
