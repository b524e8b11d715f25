"""Gradient verification suite: every differentiable layer and loss against
the central-difference oracle, over many random shapes and seeds."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import BN_BATCH, BN_EVAL, BN_FROZEN, BN_TRAIN, Tensor


def _t64(rng, *shape):
    return Tensor(rng.normal(size=shape).astype(np.float64), requires_grad=True)


def _check_linear(rng, eps):
    b, din, dout = int(rng.integers(2, 7)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
    params = {"x": _t64(rng, b, din), "w": _t64(rng, din, dout), "b": _t64(rng, dout)}
    mixer = rng.normal(size=(b, dout))

    def f(p):
        return ad.sum_(ad.mul(ad.linear(p["x"], p["w"], p["b"]), ad.const(mixer, dtype=np.float64)))

    return ad.grad_check(f, params, eps)


def _check_batchnorm(mode):
    def check(rng, eps):
        b, d = int(rng.integers(3, 8)), int(rng.integers(2, 5))
        params = {"x": _t64(rng, b, d), "gamma": _t64(rng, d), "beta": _t64(rng, d)}
        rm = Tensor(rng.normal(size=d).astype(np.float64))
        rv = Tensor((0.5 + rng.random(d)).astype(np.float64))
        mixer = rng.normal(size=(b, d))

        def f(p):
            y = ad.batchnorm(p["x"], p["gamma"], p["beta"], rm, rv, mode=mode)
            return ad.sum_(ad.mul(y, ad.const(mixer, dtype=np.float64)))

        return ad.grad_check(f, params, eps)

    return check


def _check_knn(rng, eps):
    n, d, k = int(rng.integers(6, 14)), int(rng.integers(2, 5)), int(rng.integers(1, 5))
    coords = rng.normal(size=(n, 3))
    params = {"feats": _t64(rng, n, d)}
    mixer = rng.normal(size=(n, d))

    def f(p):
        return ad.sum_(ad.mul(ad.knn_aggregate(coords, p["feats"], k), ad.const(mixer, dtype=np.float64)))

    return ad.grad_check(f, params, eps)


def _check_cosine(rng, eps):
    m, d = int(rng.integers(2, 8)), int(rng.integers(3, 8))
    params = {"pred": _t64(rng, m, d)}
    target = rng.normal(size=(m, d))

    def f(p):
        return ad.cosine_distill(p["pred"], target)

    return ad.grad_check(f, params, eps)


def _check_cross_entropy(rng, eps):
    n, c = int(rng.integers(3, 9)), int(rng.integers(2, 7))
    params = {"logits": _t64(rng, n, c)}
    labels = rng.integers(0, c, size=n)

    def f(p):
        return ad.cross_entropy(p["logits"], labels, smoothing=0.2)

    return ad.grad_check(f, params, eps)


def _check_entropy(rng, eps):
    n, c = int(rng.integers(3, 9)), int(rng.integers(2, 7))
    params = {"logits": _t64(rng, n, c)}

    def f(p):
        return ad.softmax_entropy(p["logits"])

    return ad.grad_check(f, params, eps)


GRADIENT_CASES = {
    "linear": _check_linear,
    "batchnorm-train": _check_batchnorm(BN_TRAIN),
    "batchnorm-eval": _check_batchnorm(BN_EVAL),
    "batchnorm-frozen": _check_batchnorm(BN_FROZEN),
    "batchnorm-batch": _check_batchnorm(BN_BATCH),
    "knn-aggregate": _check_knn,
    "cosine-distill": _check_cosine,
    "cross-entropy": _check_cross_entropy,
    "softmax-entropy": _check_entropy,
}


def gradient_suite(n_seeds: int = 20, eps: float = 1e-6, seed_base: int = 100) -> dict:
    """Max relative gradient error per op over `n_seeds` random shapes."""
    results = {}
    for name, case in GRADIENT_CASES.items():
        worst = 0.0
        for s in range(n_seeds):
            rng = np.random.default_rng(seed_base + s)
            worst = max(worst, case(rng, eps))
        results[name] = worst
    return results
