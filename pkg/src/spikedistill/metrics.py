"""Spatio-temporal mismatch (STM) score, accuracy, firing rates and the metrics stream.

Metrics stream format: one record per line, whitespace-separated ``key=value``
tokens. Keys never contain ``=`` or spaces; floats are written with ``repr``
so they round-trip exactly; ``-inf`` marks an undefined log score. Stable keys:

    kind      step | epoch | summary
    epoch     epoch index (0-based)
    step      global optimizer step
    split     train | test
    l_total l_kd l_ce l_kl l_sastc alpha beta   loss breakdown (per step)
    acc       top-1 accuracy
    stm_raw   raw STM score, stm_ln its natural log
    rate.<k>  mean firing rate of the k-th spiking layer
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .calibration import similarity_matrix
from .models import FeaturePattern
from .tensor import ContractError, DomainError, Tensor

NEG_INF = float("-inf")


def default_pairing(s_L: int, a_L: int) -> list[tuple[int, int]]:
    """Pair the last min(s_L, a_L) tapped layers of both models in depth order."""
    k = min(s_L, a_L)
    return [(s_L - k + i, a_L - k + i) for i in range(k)]


def _sim(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return similarity_matrix(x.detach()).data
    x = np.asarray(x)
    r = x.reshape(x.shape[0], -1)
    return r @ r.T


def stm_score(student: Sequence[FeaturePattern] | Sequence[Sequence], teacher: FeaturePattern | Sequence,
              pairing: Sequence[tuple[int, int]]) -> float:
    """Average over steps and pairs of the mean squared difference of the b x b Gram matrices."""
    pairing = list(pairing)
    if not pairing:
        raise DomainError("STM score needs at least one layer pair")
    t_maps = teacher.maps if isinstance(teacher, FeaturePattern) else list(teacher)
    t_sims = {a: _sim(t_maps[a]) for _, a in pairing}
    total = 0.0
    for pattern in student:
        maps = pattern.maps if isinstance(pattern, FeaturePattern) else list(pattern)
        for s, a in pairing:
            d = _sim(maps[s]) - t_sims[a]
            total += float(np.mean(d * d))
    return total / (len(student) * len(pairing))


def stm_from_similarities(student_sims: Sequence[Sequence[np.ndarray]], teacher_sims: Sequence[np.ndarray],
                          pairing: Sequence[tuple[int, int]]) -> float:
    """Same score computed from precomputed Gram matrices ([t][s] and [a])."""
    if not pairing:
        raise DomainError("STM score needs at least one layer pair")
    total = 0.0
    for per_t in student_sims:
        for s, a in pairing:
            d = np.asarray(per_t[s]) - np.asarray(teacher_sims[a])
            total += float(np.mean(d * d))
    return total / (len(student_sims) * len(pairing))


def safe_log(x: float) -> float:
    return math.log(x) if x > 0 else NEG_INF


@dataclass
class StmReport:
    raw: list[float]
    log_score: list[float]
    window: int
    pairing: list[tuple[int, int]] = field(default_factory=list)
    headline: float = float("nan")
    partial_window: bool = False


def stm_epoch_report(history: Sequence[float], window: int = 10,
                     pairing: Sequence[tuple[int, int]] = ()) -> StmReport:
    """Headline = mean of ln(raw) over the trailing ``window`` epochs (zero scores are skipped)."""
    if window < 1:
        raise DomainError(f"window must be >= 1, got {window}")
    raw = [float(x) for x in history]
    if any(x < 0 for x in raw):
        raise DomainError("STM scores are non-negative")
    logs = [safe_log(x) for x in raw]
    partial = len(raw) < window
    if partial:
        warnings.warn(f"only {len(raw)} epochs available for a {window}-epoch STM window", stacklevel=2)
    tail = [v for v in logs[-window:] if v != NEG_INF]
    headline = float(np.mean(tail)) if tail else NEG_INF
    return StmReport(raw, logs, window, list(pairing), headline, partial)


def top1_accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax hits the label; ties go to the lowest class index."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    if z.ndim != 2 or z.shape[0] != labels.shape[0]:
        raise ContractError(f"logits {z.shape} vs labels {labels.shape}")
    if z.shape[0] == 0:
        return 0.0
    return float(np.mean(np.argmax(z, axis=1) == labels))


def spike_rate(trains) -> float:
    """Mean firing rate over batch, time and neurons of one layer's spike trains."""
    arrays = [t.data if isinstance(t, Tensor) else np.asarray(t) for t in trains]
    arr = np.stack(arrays) if arrays else np.zeros(0)
    if not np.all((arr == 0) | (arr == 1)):
        raise ContractError("spike trains must be binary")
    return float(arr.mean()) if arr.size else 0.0


# -- metrics stream ----------------------------------------------------------------
def format_record(record: dict) -> str:
    parts = []
    for key, value in record.items():
        if " " in key or "=" in key:
            raise ValueError(f"bad metrics key {key!r}")
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, (int, np.integer)):
            text = str(int(value))
        elif isinstance(value, (float, np.floating)):
            text = repr(float(value))
        else:
            text = str(value)
            if not text or any(c.isspace() for c in text) or "=" in text:
                raise ValueError(f"metrics value for {key!r} must be a bare token, got {text!r}")
        parts.append(f"{key}={text}")
    return " ".join(parts)


def _parse_value(text: str):
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def parse_record(line: str) -> dict:
    out = {}
    for tok in line.split():
        key, sep, value = tok.partition("=")
        if not sep:
            raise ValueError(f"malformed metrics token {tok!r}")
        out[key] = _parse_value(value)
    return out


class MetricsWriter:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(dict(record))
        if self.path:
            with self.path.open("a") as fh:
                fh.write(format_record(record) + "\n")


def read_records(path: str | Path) -> list[dict]:
    return [parse_record(line) for line in Path(path).read_text().splitlines() if line.strip()]


def select(records: Iterable[dict], **match) -> list[dict]:
    return [r for r in records if all(r.get(k) == v for k, v in match.items())]
