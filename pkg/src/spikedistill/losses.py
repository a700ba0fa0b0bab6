"""Composite distillation objective.

    total = kd + beta * feature
    kd    = CE(y, softmax(O_s)) + alpha^2 * KL(softmax(O_a / alpha) || softmax(O_s / alpha))

The feature term is the calibration-weighted sum of per-instance MSEs
between teacher maps and projected student maps over all steps and pairs.
Instance sums are averaged by the batch size unless ``reduction="sum"``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .calibration import AttentionAllocation, CalibrationResult
from .tensor import ContractError, DimensionError, Tensor


@dataclass
class LossBreakdown:
    l_sastc: float
    l_kd: float
    l_ce: float
    l_kl: float
    l_total: float
    alpha: float
    beta: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def check(self, tol: float = 1e-9) -> None:
        if abs(self.l_total - (self.l_kd + self.beta * self.l_sastc)) > tol:
            raise AssertionError(f"l_total identity broken: {self}")
        if abs(self.l_kd - (self.l_ce + self.alpha ** 2 * self.l_kl)) > tol:
            raise AssertionError(f"l_kd identity broken: {self}")


def _batch_reduce(per_instance_sum: Tensor, b: int, reduction: str) -> Tensor:
    if reduction == "mean":
        return tn.scale(per_instance_sum, 1.0 / b)
    if reduction == "sum":
        return per_instance_sum
    raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def per_instance_mse(target: Tensor | np.ndarray, pred: Tensor) -> Tensor:
    """Mean squared difference over all non-batch elements -> shape (b,)."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if target.shape != pred.shape:
        raise DimensionError(f"mse: target {target.shape} vs prediction {pred.shape}")
    d = tn.sub(pred, target)
    return tn.reduce_mean(tn.reshape(tn.square(d), (pred.shape[0], -1)), axis=1)


def pair_mse_table(result: CalibrationResult, teacher_maps: list[Tensor],
                   similarity_space: bool = False) -> Tensor:
    """Per-(t, s, i, a) distances as a (T, s_L, b, a_L) tensor.

    Pairs absent from ``result.projected`` contribute zeros.
    """
    T, b = result.T, result.b
    s_L = len(result.student_sim[0])
    a_L = len(teacher_maps)
    zero = Tensor(np.zeros((T, b)))
    rows = []
    for s in range(s_L):
        cols = []
        for a in range(a_L):
            pred = result.projected.get((s, a))
            if pred is None:
                cols.append(zero)
                continue
            target = teacher_maps[a].data
            if similarity_space:
                per_t = []
                for t in range(T):
                    r = tn.flatten(tn.take(pred, slice(t * b, (t + 1) * b)))
                    gram = tn.matmul(r, tn.transpose(r))
                    per_t.append(per_instance_mse(result.teacher_sim[a].data, gram))
                cols.append(tn.stack(per_t, axis=0))
            else:
                tiled = np.concatenate([target] * T, axis=0) if T > 1 else target
                cols.append(tn.reshape(per_instance_mse(tiled, pred), (T, b)))
        rows.append(tn.stack(cols, axis=-1))  # (T, b, a_L)
    return tn.stack(rows, axis=1)  # (T, s_L, b, a_L)


def sastc_loss(eta: AttentionAllocation | Tensor, mse_table: Tensor, reduction: str = "mean") -> Tensor:
    """Sum over (t, s, a) of eta-weighted per-instance MSE; instances averaged by b."""
    e = eta.eta if isinstance(eta, AttentionAllocation) else eta
    if e.shape != mse_table.shape:
        raise ContractError(f"calibration weights {e.shape} do not index the distance table {mse_table.shape}")
    b = e.shape[2]
    return _batch_reduce(tn.reduce_sum(tn.mul(e, mse_table)), b, reduction)


def cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    b, n = logits.shape
    onehot = _one_hot(labels, n)
    nll = tn.scale(tn.reduce_sum(tn.mul(tn.log_softmax(logits), Tensor(onehot))), -1.0)
    return _batch_reduce(nll, b, reduction)


def kl_divergence(teacher_logits: Tensor | np.ndarray, student_logits: Tensor, alpha: float,
                  reduction: str = "mean") -> Tensor:
    """KL(P_a || P_s) of the temperature-softened distributions; teacher side is constant."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t.shape != student_logits.shape:
        raise DimensionError(f"kl: teacher logits {t.shape} vs student logits {student_logits.shape}")
    with tn.no_grad():
        log_p = tn.log_softmax(Tensor(t), alpha).data
    p = np.exp(log_p)
    log_q = tn.log_softmax(student_logits, alpha)
    # sum p*log p is a constant; sum p*(log p - log q)
    const = float(np.sum(np.where(p > 0, p * log_p, 0.0)))
    cross = tn.reduce_sum(tn.mul(log_q, Tensor(p)))
    kl = tn.sub(Tensor(const), cross)
    return _batch_reduce(kl, t.shape[0], reduction)


def kd_loss(student_logits: Tensor, teacher_logits, labels: np.ndarray, alpha: float = 1.0,
            reduction: str = "mean", with_kl: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    ce = cross_entropy(student_logits, labels, reduction)
    if not with_kl:
        kl = Tensor(0.0)
        return ce, ce, kl
    kl = kl_divergence(teacher_logits, student_logits, alpha, reduction)
    return tn.add(ce, tn.scale(kl, alpha * alpha)), ce, kl


def total_loss(l_kd: Tensor, l_sastc: Tensor | float, beta: float) -> Tensor:
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return tn.add(l_kd, tn.scale(tn.as_tensor(l_sastc), beta))


def _one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape[1] != n:
            raise DimensionError(f"one-hot targets have {labels.shape[1]} classes, logits have {n}")
        return labels.astype(tn.get_default_dtype())
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
        raise DimensionError(f"labels outside [0, {n})")
    out = np.zeros((labels.shape[0], n), dtype=tn.get_default_dtype())
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
