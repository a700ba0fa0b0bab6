"""Self-attentive spatio-temporal calibration of student layers against teacher layers.

For a batch of size b every tapped map (student layer s at step t, teacher
layer a) is reduced to its b x b Gram matrix. A shared query MLP embeds the
student Gram rows, a shared key MLP the teacher rows, and a softmax of the
per-instance dot products over teacher layers yields the calibration weight
``eta[t, s, i, a]``. Student maps are projected onto every teacher layer's
shape so that weighted feature distances can be computed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .models import FeaturePattern
from .nn import Conv2d, Linear, Module
from .tensor import DimensionError, Tensor


class CalibrationConfigError(ValueError):
    pass


@dataclass
class SimilarityMatrix:
    a: Tensor
    model: str = "student"
    layer: int = 0
    t: int | None = None


def similarity_matrix(f: Tensor) -> Tensor:
    """Gram matrix of the batch: flatten non-batch dims, then ``R @ R.T``."""
    r = tn.flatten(f) if f.ndim > 2 else f
    return tn.matmul(r, tn.transpose(r))


class QKProjector(Module):
    """Row-wise two-layer perceptron b -> d_h -> d_k."""

    def __init__(self, b: int, d_h: int, d_k: int, rng: np.random.Generator, zero_final: bool = False):
        self.b = b
        self.fc1 = Linear(b, d_h, rng)
        self.fc2 = Linear(d_h, d_k, rng)
        if zero_final:
            self.fc2.weight.data[...] = 0.0
            self.fc2.bias.data[...] = 0.0

    def forward(self, a: Tensor) -> Tensor:
        if a.shape[-1] != self.b:
            raise DimensionError(f"similarity rows have width {a.shape[-1]}, perceptron expects b={self.b}")
        return self.fc2(tn.relu(self.fc1(a)))


class Projector(Module):
    """Maps a student map onto one teacher layer's shape.

    Spatial to spatial: optional nearest upsampling, a 3x3 conv (strided when
    downsampling) changing channels, then a 1x1 conv. If either side is flat,
    a single affine map to the target width is used instead.
    """

    def __init__(self, src: tuple[int, ...], dst: tuple[int, ...], rng: np.random.Generator,
                 zero_final: bool = False):
        self.src, self.dst = tuple(src), tuple(dst)
        self.up, self.stride = 1, 1
        if len(src) == 3 and len(dst) == 3:
            (cs, hs, ws), (ca, ha, wa) = src, dst
            if hs == ha and ws == wa:
                pass
            elif hs > ha and hs % ha == 0 and ws % wa == 0 and hs // ha == ws // wa:
                self.stride = hs // ha
            elif ha > hs and ha % hs == 0 and wa % ws == 0 and ha // hs == wa // ws:
                self.up = ha // hs
            else:
                raise CalibrationConfigError(f"no integer resampling from {src} to {dst}")
            self.conv3 = Conv2d(cs, ca, 3, rng, stride=self.stride, padding=1)
            self.conv1 = Conv2d(ca, ca, 1, rng)
            self.fc = None
        else:
            self.conv3 = self.conv1 = None
            self.fc = Linear(int(np.prod(src)), int(np.prod(dst)), rng)
        if zero_final:
            # starts as a constant predictor, so early feature loss does not push on the student
            (self.fc or self.conv1).weight.data[...] = 0.0

    def forward(self, f: Tensor) -> Tensor:
        if self.fc is not None:
            y = self.fc(tn.flatten(f) if f.ndim > 2 else f)
            return tn.reshape(y, (f.shape[0],) + self.dst)
        x = tn.upsample_nearest(f, self.up) if self.up > 1 else f
        y = self.conv1(self.conv3(x))
        if tuple(y.shape[1:]) != self.dst:
            raise DimensionError(f"projector produced {y.shape[1:]} instead of {self.dst}")
        return y

    def set_identity(self) -> None:
        """Delta 3x3 kernel and identity 1x1 (only meaningful for equal shapes)."""
        if self.src != self.dst or self.fc is not None:
            raise CalibrationConfigError("identity init needs equal spatial shapes")
        c = self.src[0]
        self.conv3.weight.data[...] = 0.0
        self.conv3.weight.data[np.arange(c), np.arange(c), 1, 1] = 1.0
        self.conv1.weight.data[...] = np.eye(c).reshape(c, c, 1, 1)
        self.conv3.bias.data[...] = 0.0
        self.conv1.bias.data[...] = 0.0


def project_student_feature(f: Tensor, pair: tuple[int, int], projectors: dict[str, Projector]) -> Tensor:
    key = pair_key(*pair)
    if key not in projectors:
        raise CalibrationConfigError(f"no projector for student layer {pair[0]} -> teacher layer {pair[1]}")
    return projectors[key](f)


def pair_key(s: int, a: int) -> str:
    return f"s{s}_a{a}"


@dataclass
class AttentionAllocation:
    """Calibration weights as a (T, s_L, b, a_L) tensor; softmax over the last axis."""

    eta: Tensor

    def table(self) -> np.ndarray:
        """Numpy view indexed [instance, t, s_l, a_l]."""
        return self.eta.data.transpose(2, 0, 1, 3)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        T, s, b, a = self.eta.shape
        return b, T, s, a


def attention_weights(queries: Tensor, keys: Tensor) -> AttentionAllocation:
    """queries (T, s_L, b, d_k), keys (a_L, b, d_k) -> eta (T, s_L, b, a_L).

    Plain dot products, no 1/sqrt(d_k) scaling.
    """
    if queries.shape[-1] != keys.shape[-1]:
        raise DimensionError(f"query width {queries.shape[-1]} != key width {keys.shape[-1]}")
    T, s_L, b, d = queries.shape
    q = tn.reshape(queries, (T * s_L, b, d))
    dots = tn.einsum("nbd,abd->nba", q, keys)
    eta = tn.softmax(tn.reshape(dots, (T, s_L, b, keys.shape[0])), axis=-1)
    return AttentionAllocation(eta)


@dataclass
class CalibrationResult:
    allocation: AttentionAllocation
    # (s_l, a_l) -> projected student maps for all steps, stacked time-major: (T*b, c_a, h_a, w_a)
    projected: dict[tuple[int, int], Tensor]
    student_sim: list[list[Tensor]]  # [t][s]
    teacher_sim: list[Tensor]  # [a]
    T: int
    b: int

    def projected_at(self, t: int, s: int, a: int) -> Tensor:
        b = self.b
        return tn.take(self.projected[(s, a)], slice(t * b, (t + 1) * b))


class Calibrator(Module):
    """Owns the query/key perceptrons and one projector per (student, teacher) layer pair."""

    def __init__(self, student_shapes, teacher_shapes, b: int, rng: np.random.Generator,
                 d_h: int = 64, d_k: int = 32, per_layer_qk: bool = False, zero_init_query: bool = False,
                 zero_init_projector: bool = False):
        self.student_shapes = [tuple(s) for s in student_shapes]
        self.teacher_shapes = [tuple(s) for s in teacher_shapes]
        self.b = b
        self.per_layer_qk = per_layer_qk
        n_q = len(self.student_shapes) if per_layer_qk else 1
        n_k = len(self.teacher_shapes) if per_layer_qk else 1
        self.mlp_q = [QKProjector(b, d_h, d_k, rng, zero_init_query) for _ in range(n_q)]
        self.mlp_k = [QKProjector(b, d_h, d_k, rng) for _ in range(n_k)]
        self.projectors = {
            pair_key(s, a): Projector(ss, ts, rng, zero_init_projector)
            for s, ss in enumerate(self.student_shapes)
            for a, ts in enumerate(self.teacher_shapes)
        }

    @property
    def s_L(self) -> int:
        return len(self.student_shapes)

    @property
    def a_L(self) -> int:
        return len(self.teacher_shapes)

    def queries(self, sims: list[list[Tensor]]) -> Tensor:
        T, s_L, b = len(sims), self.s_L, self.b
        if not self.per_layer_qk:
            rows = tn.concat([sims[t][s] for t in range(T) for s in range(s_L)], axis=0)
            return tn.reshape(self.mlp_q[0](rows), (T, s_L, b, -1))
        per_layer = []
        for s in range(s_L):
            rows = tn.concat([sims[t][s] for t in range(T)], axis=0)
            per_layer.append(tn.reshape(self.mlp_q[s](rows), (T, b, -1)))
        return tn.stack(per_layer, axis=1)

    def keys(self, sims: list[Tensor]) -> Tensor:
        b = self.b
        if not self.per_layer_qk:
            rows = tn.concat(sims, axis=0)
            return tn.reshape(self.mlp_k[0](rows), (len(sims), b, -1))
        return tn.stack([self.mlp_k[a](m) for a, m in enumerate(sims)], axis=0)

    def calibrate(self, student: list[FeaturePattern], teacher: FeaturePattern,
                  pairs: list[tuple[int, int]] | None = None, attention: bool = True) -> CalibrationResult:
        """Similarities, attention over teacher layers and projections for every step.

        ``pairs`` restricts projection to specific layer pairs (fixed-pair
        distillation); ``attention=False`` skips the query/key path.
        """
        if not student or not len(teacher):
            raise CalibrationConfigError("calibration needs non-empty feature patterns")
        T = len(student)
        for p in student:
            if len(p) != self.s_L:
                raise CalibrationConfigError(f"student pattern has {len(p)} maps, calibrator expects {self.s_L}")
        if len(teacher) != self.a_L:
            raise CalibrationConfigError(f"teacher pattern has {len(teacher)} maps, calibrator expects {self.a_L}")
        b = student[0][0].shape[0]

        s_sims = [[similarity_matrix(p[s]) for s in range(self.s_L)] for p in student]
        t_sims = [similarity_matrix(teacher[a].detach()) for a in range(self.a_L)]
        if attention:
            alloc = attention_weights(self.queries(s_sims), self.keys(t_sims))
        else:
            alloc = AttentionAllocation(Tensor(np.full((T, self.s_L, b, self.a_L), 1.0 / self.a_L)))

        wanted = pairs if pairs is not None else [(s, a) for s in range(self.s_L) for a in range(self.a_L)]
        projected = {}
        stacked = {}
        for s, a in wanted:
            if s not in stacked:
                stacked[s] = tn.concat([p[s] for p in student], axis=0) if T > 1 else student[0][s]
            projected[(s, a)] = project_student_feature(stacked[s], (s, a), self.projectors)
        return CalibrationResult(alloc, projected, s_sims, t_sims, T, b)
