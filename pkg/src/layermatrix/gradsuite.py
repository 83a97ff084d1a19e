"""Finite-difference checks for every differentiable op and both losses.

Each case draws a random float64 instance away from kinks (ReLU at 0, ties
inside a max-pool window, the probability clamp) so central differences
are meaningful.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .heads import focal_loss, smooth_l1
from .tensor import ConvSpec, Tensor, conv2d, grad_check, max_pool_3x3_stride1, relu, sigmoid

TOLERANCE = 1e-4


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(-2, 2, shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _case_add(rng):
    shape = tuple(rng.integers(1, 5, 2))
    a, b, r = _t(rng.standard_normal(shape)), _t(rng.standard_normal(shape)), Tensor(rng.standard_normal(shape))
    return lambda: ((a + b) * r).sum(), [a, b]


def _case_mul(rng):
    shape = tuple(rng.integers(1, 5, 2))
    a, b, r = _t(rng.standard_normal(shape)), _t(rng.standard_normal(shape)), Tensor(rng.standard_normal(shape))
    return lambda: ((a * b) * r).sum(), [a, b]


def _case_sum(rng):
    a = _t(rng.standard_normal(tuple(rng.integers(1, 6, 3))))
    return lambda: (a * a).sum(), [a]


def _case_slice(rng):
    a = _t(rng.standard_normal((1, 6, 3, 3)))
    lo = int(rng.integers(0, 5))
    hi = int(rng.integers(lo + 1, 7))
    r = Tensor(rng.standard_normal((1, hi - lo, 3, 3)))
    return lambda: (a[:, lo:hi] * r).sum(), [a]


def _case_relu(rng):
    x = _t(_away_from_zero(rng, (3, 4)))
    r = Tensor(rng.standard_normal((3, 4)))
    return lambda: (relu(x) * r).sum(), [x]


def _case_sigmoid(rng):
    x = _t(rng.uniform(-4, 4, (3, 4)))
    r = Tensor(rng.standard_normal((3, 4)))
    return lambda: (sigmoid(x) * r).sum(), [x]


def _case_maxpool(rng):
    shape = (2, int(rng.integers(2, 6)), int(rng.integers(2, 6)))
    n = int(np.prod(shape))
    # distinct values spaced far beyond the finite-difference step
    x = _t((rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape))
    r = Tensor(rng.standard_normal(shape))
    return lambda: (max_pool_3x3_stride1(x) * r).sum(), [x]


def _case_conv(rng):
    sh, sw = (int(s) for s in rng.choice([1, 2], 2))
    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    spec = ConvSpec(cin, cout, k, k, sh, sw, k // 2, k // 2)
    h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    x = _t(rng.standard_normal((1, cin, h, w)))
    wt = _t(rng.standard_normal(spec.weight_shape))
    b = _t(rng.standard_normal(cout))
    oh, ow = spec.out_extent(h, w)
    r = Tensor(rng.standard_normal((1, cout, oh, ow)))
    return lambda: (conv2d(x, wt, b, spec) * r).sum(), [x, wt, b]


def _case_focal(rng):
    shape = (2, int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    t = rng.uniform(0, 0.95, shape)
    flat = t.reshape(-1)
    flat[rng.choice(flat.size, size=int(rng.integers(0, 3)), replace=False)] = 1.0
    p = _t(rng.uniform(0.05, 0.95, shape))
    return lambda: focal_loss(p, t), [p]


def _case_smooth_l1(rng):
    shape = (1, 2, int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    t = rng.uniform(-0.5, 0.5, shape)
    d = rng.uniform(0.05, 2.5, shape) * rng.choice([-1, 1], shape)
    d = np.where(np.abs(np.abs(d) - 1) < 0.05, d * 1.2, d)  # stay off the |d| = 1 seam
    p = _t(t + d)
    mask = rng.uniform(size=(1,) + shape[2:]) < 0.6
    return lambda: smooth_l1(p, t, mask), [p]


CASES: dict[str, Callable] = {
    "add": _case_add,
    "mul": _case_mul,
    "sum": _case_sum,
    "slice": _case_slice,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "maxpool3x3": _case_maxpool,
    "conv2d": _case_conv,
    "focal_loss": _case_focal,
    "smooth_l1": _case_smooth_l1,
}


@dataclass
class OpResult:
    op: str
    instances: int
    max_rel_error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE

    def to_dict(self) -> dict:
        return {"op": self.op, "instances": self.instances, "max_rel_error": self.max_rel_error,
                "seconds": round(self.seconds, 3), "ok": self.ok}


def run_suite(instances: int = 20, seed: int = 0, ops=None) -> list[OpResult]:
    results = []
    for k, name in enumerate(ops or CASES):
        rng = np.random.default_rng([seed, k])
        tic = time.perf_counter()
        worst = 0.0
        for _ in range(instances):
            f, params = CASES[name](rng)
            worst = max(worst, grad_check(f, params))
        results.append(OpResult(name, instances, worst, time.perf_counter() - tic))
    return results
