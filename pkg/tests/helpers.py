"""Shared test utilities: finite-difference gradient oracle and the registry
of differentiable primitives checked against it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from sedtriadv import autodiff as ad

FD_EPS = 1e-5


def weighted_sum(out: ad.Tensor, seed: int) -> ad.Tensor:
    """Reduce to a scalar with fixed random weights so the upstream gradient
    reaching the op under test is non-uniform."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * ad.Tensor(w)).sum()


def analytic_grads(fn: Callable, arrays: list[np.ndarray]) -> list[np.ndarray]:
    params = [ad.Parameter(a) for a in arrays]
    ad.backward(fn(*params))
    return [p.grad for p in params]


def numeric_grads(fn: Callable, arrays: list[np.ndarray],
                  eps: float = FD_EPS) -> list[np.ndarray]:
    """Central-difference gradients of the scalar fn wrt every input."""

    def value(mod: list[np.ndarray]) -> float:
        with ad.no_grad():
            return fn(*[ad.Tensor(a) for a in mod]).item()

    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for i in range(a.size):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k].reshape(-1)[i] += eps
            minus[k].reshape(-1)[i] -= eps
            g.reshape(-1)[i] = (value(plus) - value(minus)) / (2.0 * eps)
        grads.append(g)
    return grads


def max_rel_err(fn: Callable, arrays: list[np.ndarray]) -> float:
    ana = analytic_grads(fn, arrays)
    num = numeric_grads(fn, arrays)
    worst = 0.0
    for a, n in zip(ana, num):
        denom = np.maximum(np.abs(a), np.abs(n)) + 1e-6
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def _uniform(shapes, rng):
    return [rng.uniform(-1.0, 1.0, s) for s in shapes]


def _away_from_zero(shapes, rng):
    out = []
    for s in shapes:
        a = rng.uniform(-1.0, 1.0, s)
        out.append(a + np.where(a >= 0, 0.1, -0.1))
    return out


def _distinct(shapes, rng):
    # spacing >> fd epsilon so perturbations cannot flip an argmax
    out = []
    for s in shapes:
        n = int(np.prod(s))
        out.append((rng.permutation(n).astype(np.float64) / n).reshape(s))
    return out


@dataclass
class FdCase:
    """One primitive exercised through a weighted-sum scalar loss."""

    name: str
    fn: Callable
    shapes: list[tuple[int, ...]]
    sampler: Callable = field(default=_uniform)

    def sample(self, seed: int = 0) -> list[np.ndarray]:
        return self.sampler(self.shapes, np.random.default_rng(seed))


def _gru(gx, h, w, b):
    return weighted_sum(ad.gru_cell(gx, h, w, b), 31)


FD_CASES = [
    FdCase("add_broadcast", lambda a, b: weighted_sum(a + b, 11), [(3, 4), (4,)]),
    FdCase("sub", lambda a, b: weighted_sum(a - b, 12), [(2, 5), (2, 5)]),
    FdCase("neg", lambda a: weighted_sum(-a, 13), [(4, 3)]),
    FdCase("mul_broadcast", lambda a, b: weighted_sum(a * b, 14), [(3, 4), (3, 1)]),
    FdCase("scalar_affine", lambda a: weighted_sum(2.5 * a + 1.0, 15), [(3, 3)]),
    FdCase("matmul", lambda a, b: weighted_sum(a @ b, 16), [(3, 4), (4, 5)]),
    FdCase("sigmoid", lambda a: weighted_sum(ad.sigmoid(a), 17), [(3, 4)]),
    FdCase("tanh", lambda a: weighted_sum(ad.tanh(a), 18), [(3, 4)]),
    FdCase("relu", lambda a: weighted_sum(ad.relu(a), 19), [(4, 5)], _away_from_zero),
    FdCase("softmax_rows", lambda a: weighted_sum(ad.softmax(a, axis=1), 20), [(3, 5)]),
    FdCase("softmax_cols", lambda a: weighted_sum(ad.softmax(a, axis=0), 21), [(4, 3)]),
    FdCase("reshape", lambda a: weighted_sum(a.reshape(6, 2), 22), [(3, 4)]),
    FdCase("transpose", lambda a: weighted_sum(a.transpose(1, 0, 2), 23), [(2, 3, 4)]),
    FdCase("slice", lambda a: weighted_sum(a[1:3, ::2], 24), [(4, 6)]),
    FdCase("concat", lambda a, b: weighted_sum(ad.concat([a, b], axis=1), 25),
           [(3, 2), (3, 4)]),
    FdCase("stack", lambda a, b: weighted_sum(ad.stack([a, b], axis=1), 26),
           [(3, 4), (3, 4)]),
    FdCase("sum_axis", lambda a: weighted_sum(a.sum(axis=0), 27), [(4, 5)]),
    FdCase("mean_axis_keepdims", lambda a: weighted_sum(a.mean(axis=1, keepdims=True), 28),
           [(4, 5)]),
    FdCase("mean_all", lambda a: a.mean() * 3.0, [(3, 7)]),
    FdCase("conv2d", lambda x, w, b: weighted_sum(ad.conv2d(x, w, b), 29),
           [(2, 2, 5, 4), (3, 2, 3, 3), (3,)]),
    FdCase("conv2d_nobias", lambda x, w: weighted_sum(ad.conv2d(x, w), 30),
           [(1, 3, 4, 4), (2, 3, 1, 3)]),
    FdCase("conv1d", lambda x, w, b: weighted_sum(ad.conv1d(x, w, b), 32),
           [(2, 2, 6), (3, 2, 3), (3,)]),
    FdCase("max_pool2d", lambda x: weighted_sum(ad.max_pool2d(x, (2, 3)), 33),
           [(2, 2, 4, 6)], _distinct),
    FdCase("gru_cell", _gru, [(3, 9), (3, 3), (9, 3), (9,)]),
    FdCase("gru_sequence",
           lambda gx, w, b: weighted_sum(ad.gru_sequence(gx, w, b), 35),
           [(2, 4, 6), (6, 2), (6,)]),
    FdCase("gru_sequence_reverse",
           lambda gx, w, b: weighted_sum(ad.gru_sequence(gx, w, b, reverse=True), 36),
           [(2, 4, 6), (6, 2), (6,)]),
    FdCase("mlp_chain",
           lambda x, w1, w2: weighted_sum(ad.sigmoid(ad.tanh(x @ w1) @ w2), 34),
           [(4, 3), (3, 5), (5, 2)]),
]
