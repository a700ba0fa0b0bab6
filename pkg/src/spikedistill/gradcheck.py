"""Finite-difference verification of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    passed: bool
    location: tuple | None = None  # (input index, element index) of the worst element
    message: str = ""
    trials: int = 1

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" at {self.location}" if self.location is not None and not self.passed else ""
        extra = f" ({self.message})" if self.message else ""
        return f"{status} {self.name:<22} trials={self.trials:<4d} max_rel_err={self.max_rel_error:.3e}{where}{extra}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries meaningful."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-3,
               tol: float = 1e-4, name: str = "f") -> GradCheckReport:
    """Compare backward() against central differences of ``f(*tensors)``.

    ``f`` must rebuild its graph on every call and return a scalar tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    out = f(*leaves)
    out.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(a)
                for leaf, a in zip(leaves, arrays)]

    worst, where = 0.0, None
    with tn.no_grad():
        for k, base in enumerate(arrays):
            numeric = np.zeros_like(base)
            for idx in np.ndindex(base.shape):
                orig = base[idx]
                base[idx] = orig + eps
                hi = f(*[Tensor(a) for a in arrays]).item()
                base[idx] = orig - eps
                lo = f(*[Tensor(a) for a in arrays]).item()
                base[idx] = orig
                numeric[idx] = (hi - lo) / (2 * eps)
            a = analytic[k]
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(numeric))):
                bad = np.argwhere(~(np.isfinite(a) & np.isfinite(numeric)))[0]
                return GradCheckReport(name, float("nan"), False, (k, tuple(int(i) for i in bad)), "non-finite gradient")
            err = relative_error(a, numeric)
            if err.size and err.max() > worst:
                worst = float(err.max())
                where = (k, tuple(int(i) for i in np.unravel_index(err.argmax(), err.shape)))
    return GradCheckReport(name, worst, worst < tol, where)


# -- randomized suite -------------------------------------------------------------
def _away_from(rng, shape, lo=-2.0, hi=2.0, margin=0.01):
    x = rng.uniform(lo, hi, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def _distinct(rng, shape, gap=0.01):
    n = int(np.prod(shape))
    vals = rng.permutation(n) * gap * 3 + rng.uniform(0, gap, size=n)
    return (vals - vals.mean()).reshape(shape) / max(1.0, n * gap)


def _weighted(rng, y_shape):
    w = Tensor(rng.normal(size=y_shape))
    return lambda y: tn.reduce_sum(tn.mul(y, w))


@dataclass
class _Case:
    name: str
    make: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]
    note: str = field(default="")


def _cases() -> list[_Case]:
    def unary(op, sample):
        def make(rng):
            x = sample(rng)
            head = _weighted(rng, op(Tensor(x)).shape)
            return (lambda t: head(op(t))), [x]
        return make

    def binary(op):
        def make(rng):
            shape = tuple(rng.integers(1, 4, size=2))
            a, b = rng.normal(size=shape), rng.normal(size=shape)
            head = _weighted(rng, shape)
            return (lambda s, t: head(op(s, t))), [a, b]
        return make

    def matmul(rng):
        m, k, n = rng.integers(1, 4, size=3)
        head = _weighted(rng, (m, n))
        return (lambda a, b: head(tn.matmul(a, b))), [rng.normal(size=(m, k)), rng.normal(size=(k, n))]

    def conv(rng):
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        k = int(rng.choice([1, 3]))
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(3, 2, k, k))
        b = rng.normal(size=(3,))
        y = tn.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, floor=True)
        head = _weighted(rng, y.shape)
        return (lambda xx, ww, bb: head(tn.conv2d(xx, ww, bb, stride, pad, floor=True))), [x, w, b]

    def softmax(rng):
        x = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(2, 5))))
        alpha = float(rng.uniform(0.5, 3.0))
        head = _weighted(rng, x.shape)
        return (lambda t: head(tn.softmax(t, alpha))), [x]

    def log_softmax(rng):
        x = rng.normal(size=(int(rng.integers(1, 4)), int(rng.integers(2, 5))))
        alpha = float(rng.uniform(0.5, 3.0))
        head = _weighted(rng, x.shape)
        return (lambda t: head(tn.log_softmax(t, alpha))), [x]

    def cross_entropy(rng):
        n, c = int(rng.integers(1, 4)), int(rng.integers(2, 5))
        labels = rng.integers(0, c, size=n)
        onehot = Tensor(np.eye(c)[labels])

        def f(t):
            return tn.scale(tn.reduce_sum(tn.mul(tn.log(tn.softmax(t)), onehot)), -1.0 / n)
        return f, [rng.normal(size=(n, c))]

    def sum_axes(rng):
        x = rng.normal(size=(2, 3, 2))
        axis = [None, 0, 1, 2, (0, 2)][int(rng.integers(0, 5))]
        head = _weighted(rng, x.sum(axis=axis).shape)
        return (lambda t: head(tn.reduce_sum(t, axis))), [x]

    def mean_axes(rng):
        x = rng.normal(size=(2, 3, 2))
        axis = [None, 0, 1, 2, (1, 2)][int(rng.integers(0, 5))]
        head = _weighted(rng, x.mean(axis=axis).shape)
        return (lambda t: head(tn.reduce_mean(t, axis))), [x]

    def reshape(rng):
        x = rng.normal(size=(2, 3, 2))
        head = _weighted(rng, (3, 4))
        return (lambda t: head(tn.reshape(t, (3, 4)))), [x]

    def transpose(rng):
        x = rng.normal(size=(2, 3))
        head = _weighted(rng, (3, 2))
        return (lambda t: head(tn.transpose(t))), [x]

    def bias_add(rng):
        x, b = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(3,))
        head = _weighted(rng, x.shape)
        return (lambda t, bb: head(tn.bias_add(t, bb))), [x, b]

    def take(rng):
        x = rng.normal(size=(4, 3))
        col = int(rng.integers(0, 3))
        head = _weighted(rng, (4,))
        return (lambda t: head(tn.take(t, (slice(None), col)))), [x]

    def stack(rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        head = _weighted(rng, (2, 2, 3))
        return (lambda s, t: head(tn.stack([s, t], axis=1))), [a, b]

    def concat(rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(1, 3))
        head = _weighted(rng, (3, 3))
        return (lambda s, t: head(tn.concat([s, t], axis=0))), [a, b]

    def einsum(rng):
        q, k = rng.normal(size=(3, 2, 4)), rng.normal(size=(2, 2, 4))
        head = _weighted(rng, (3, 2, 2))
        return (lambda s, t: head(tn.einsum("nbd,abd->nba", s, t))), [q, k]

    def square(rng):
        x = rng.normal(size=(3, 3))
        head = _weighted(rng, x.shape)
        return (lambda t: head(tn.square(t))), [x]

    def avg_pool(rng):
        x = rng.normal(size=(1, 2, 4, 4))
        head = _weighted(rng, (1, 2, 2, 2))
        return (lambda t: head(tn.avg_pool2d(t, 2))), [x]

    def max_pool(rng):
        x = _distinct(rng, (1, 2, 4, 4))
        head = _weighted(rng, (1, 2, 2, 2))
        return (lambda t: head(tn.max_pool2d(t, 2))), [x]

    def upsample(rng):
        x = rng.normal(size=(1, 2, 2, 2))
        head = _weighted(rng, (1, 2, 4, 4))
        return (lambda t: head(tn.upsample_nearest(t, 2))), [x]

    def similarity(rng):
        f = rng.normal(size=(3, 2, 2, 2))
        head = _weighted(rng, (3, 3))

        def g(t):
            r = tn.flatten(t)
            return head(tn.matmul(r, tn.transpose(r)))
        return g, [f]

    def mlp_relu(rng):
        while True:
            x, w1, w2 = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
            # keep pre-activations clear of the relu kink
            if np.all(np.abs(x @ w1) > 0.02):
                break
        head = _weighted(rng, (3, 2))
        return (lambda a, b, c: head(tn.matmul(tn.relu(tn.matmul(a, b)), c))), [x, w1, w2]

    return [
        _Case("add", binary(tn.add)),
        _Case("sub", binary(tn.sub)),
        _Case("mul", binary(tn.mul)),
        _Case("scale", unary(lambda t: tn.scale(t, -1.7), lambda r: r.normal(size=(3, 2)))),
        _Case("relu", unary(tn.relu, lambda r: _away_from(r, (4, 3)))),
        _Case("exp", unary(tn.exp, lambda r: r.uniform(-2, 2, size=(3, 3)))),
        _Case("log", unary(tn.log, lambda r: r.uniform(0.5, 3.0, size=(3, 3)))),
        _Case("matmul", matmul),
        _Case("conv2d", conv),
        _Case("softmax", softmax),
        _Case("log_softmax", log_softmax),
        _Case("cross_entropy", cross_entropy),
        _Case("sum", sum_axes),
        _Case("mean", mean_axes),
        _Case("reshape", reshape),
        _Case("transpose", transpose),
        _Case("bias_add", bias_add),
        _Case("take", take),
        _Case("stack", stack),
        _Case("concat", concat),
        _Case("einsum", einsum),
        _Case("square", square),
        _Case("avg_pool2d", avg_pool),
        _Case("max_pool2d", max_pool),
        _Case("upsample_nearest", upsample),
        _Case("similarity_matrix", similarity),
        _Case("matmul_relu_chain", mlp_relu),
    ]


def run_suite(trials: int = 100, eps: float = 1e-3, tol: float = 1e-4, seed: int = 0) -> list[GradCheckReport]:
    """Randomized grad check of every differentiable op (the spike op is excluded by design)."""
    rng = np.random.default_rng(seed)
    reports = []
    for case in _cases():
        worst: GradCheckReport | None = None
        for _ in range(trials):
            f, inputs = case.make(rng)
            rep = grad_check(f, inputs, eps, tol, case.name)
            if worst is None or not rep.passed or rep.max_rel_error > worst.max_rel_error:
                worst = rep
            if not rep.passed:
                break
        worst.trials = trials
        reports.append(worst)
    return reports
