"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

Run alone with ``pytest -v -s tests/test_acceptance.py``; the lines are also
repeated in the pytest terminal summary. The directional experiments share a
module-scoped cache so that each (mode, seed, noise) run is trained once.
"""

import dataclasses
import math
import statistics
import time

import numpy as np
import pytest

from spikedistill import tensor as tn
from spikedistill import trainer
from spikedistill.calibration import Calibrator, similarity_matrix
from spikedistill.config import RunConfig
from spikedistill.gradcheck import run_suite
from spikedistill.losses import LossBreakdown, kd_loss
from spikedistill.models import FeaturePattern
from spikedistill.neuron import LifParams, lif_unroll, spike
from spikedistill.tensor import Tensor

SEEDS = (0, 1, 2, 3, 4)
RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}"
    RESULTS.append(line)
    print(line)


class Experiments:
    """Default-task runs keyed by (mode, seed, label noise), trained on demand and kept."""

    def __init__(self):
        self.cfg = RunConfig().validate()
        self.train, self.test = trainer.make_datasets(self.cfg)
        t0 = time.perf_counter()
        self.teacher = trainer.train_teacher(self.cfg, self.train, self.test)
        self.teacher_seconds = time.perf_counter() - t0
        self.runs: dict = {}
        self.seconds: dict = {}
        self.noisy_train = {}

    def config(self, mode, seed, noise=0.0, **kw):
        return dataclasses.replace(self.cfg, mode=mode, label_noise=noise,
                                   seeds=dataclasses.replace(self.cfg.seeds, init=seed), **kw)

    def run(self, mode, seed, noise=0.0, pairs=()):
        key = (mode, seed, noise, tuple(pairs))
        if key not in self.runs:
            if noise not in self.noisy_train:
                self.noisy_train[noise] = trainer.make_datasets(self.cfg, label_noise=noise)[0]
            cfg = self.config(mode, seed, noise, feature_pairs=list(pairs))
            t0 = time.perf_counter()
            self.runs[key] = trainer.distill(cfg, self.teacher.net, self.noisy_train[noise], self.test).summary
            self.seconds[key] = time.perf_counter() - t0
        return self.runs[key]


@pytest.fixture(scope="module")
def exp():
    return Experiments()


def test_criterion_01_autodiff_grad_check():
    t0 = time.perf_counter()
    reports = run_suite(trials=100, eps=1e-3, tol=1e-4)
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in reports if not r.passed]
    worst = max(r.max_rel_error for r in reports)
    ok = not failed and elapsed < 120.0
    report(1, ok, f"{len(reports)} ops x 100 trials, worst rel err {worst:.2e}, {elapsed:.1f}s"
                  + (f", failing {failed}" if failed else ""))
    assert ok


def test_criterion_02_lif_trace():
    out = lif_unroll([Tensor(np.array([0.6]))] * 7, LifParams(lam=0.5, v_th=1.0, u0=0.0))
    spikes = [int(o.data[0]) for o in out]
    steps = [t + 1 for t, s in enumerate(spikes) if s]
    ok = steps == [3, 6]
    report(2, ok, f"constant input 0.6 over T=7 spikes at steps {steps}")
    assert ok


def test_criterion_03_surrogate_exact():
    gamma, v_th = 0.3, 1.0
    params = LifParams(v_th=v_th, gamma=gamma)
    u = np.random.default_rng(11).uniform(v_th - 2 * gamma, v_th + 2 * gamma, size=1000)
    x = Tensor(u, requires_grad=True)
    tn.reduce_sum(spike(x, params)).backward()
    expected = (1.0 / (gamma * gamma)) * np.maximum(0.0, gamma - np.abs(u - v_th))
    peak = Tensor(np.array([v_th]), requires_grad=True)
    tn.reduce_sum(spike(peak, params)).backward()
    # the triangle evaluated at its apex is (1/gamma^2) * gamma, which rounds differently from 1/gamma
    ulps = abs(peak.grad[0] - 1.0 / gamma) / np.spacing(1.0 / gamma)
    ok = np.array_equal(x.grad, expected) and ulps <= 2
    report(3, ok, f"1000 points bit-exact={np.array_equal(x.grad, expected)}, "
                  f"peak {float(peak.grad[0])!r} is {ulps:.0f} ulp from 1/gamma")
    assert ok


def test_criterion_04_attention_normalisation():
    rng = np.random.default_rng(4)
    worst_sum, in_range, single_ok = 0.0, True, True
    for _ in range(200):
        b, T = int(rng.choice([4, 8, 16])), int(rng.integers(1, 4))
        s_L, a_L = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        s_shapes = [(int(rng.integers(1, 4)), 2, 2) for _ in range(s_L)]
        a_shapes = [(int(rng.integers(1, 4)), 2, 2) for _ in range(a_L)]

        def draw(shape):
            # entries scaled so that Gram entries are of order one
            return Tensor(rng.normal(size=(b,) + shape) / math.sqrt(np.prod(shape)))

        student = [FeaturePattern([(i, draw(s)) for i, s in enumerate(s_shapes)], t) for t in range(T)]
        teacher = FeaturePattern([(i, draw(s)) for i, s in enumerate(a_shapes)])
        cal = Calibrator(s_shapes, a_shapes, b, rng, d_h=16, d_k=8)
        with tn.no_grad():
            eta = cal.calibrate(student, teacher).allocation.eta.data
        worst_sum = max(worst_sum, float(np.abs(eta.sum(-1) - 1.0).max()))
        in_range &= bool(np.all((eta > 0) & (eta < 1))) if a_L > 1 else True
        if a_L == 1:
            single_ok &= bool(np.all(eta == 1.0))
    ok = worst_sum <= 1e-6 and in_range and single_ok
    report(4, ok, f"200 draws, max |sum-1| {worst_sum:.1e}, open interval {in_range}, a_L=1 -> 1 {single_ok}")
    assert ok


def test_criterion_05_similarity_properties():
    rng = np.random.default_rng(5)
    symmetric, min_eig = True, np.inf
    for _ in range(100):
        b = int(rng.integers(1, 9))
        f = rng.normal(size=(b, int(rng.integers(1, 4)), 3, 3))
        a = similarity_matrix(Tensor(f)).data
        symmetric &= bool(np.array_equal(a, a.T))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(a).min()))
    ok = symmetric and min_eig >= -1e-8
    report(5, ok, f"100 draws, exact symmetry {symmetric}, min eigenvalue {min_eig:.2e}")
    assert ok


def test_criterion_06_loss_identities(exp):
    cfg = exp.config("sastc", 0, epochs=5)
    run = trainer.distill(cfg, exp.teacher.net, exp.train, exp.test)
    worst_total = worst_kd = 0.0
    for r in run.steps():
        worst_total = max(worst_total, abs(r["l_total"] - (r["l_kd"] + r["beta"] * r["l_sastc"])))
        worst_kd = max(worst_kd, abs(r["l_kd"] - (r["l_ce"] + r["alpha"] ** 2 * r["l_kl"])))
        LossBreakdown(**{k: r[k] for k in ("l_sastc", "l_kd", "l_ce", "l_kl", "l_total", "alpha", "beta")}).check(1e-9)
    z = np.random.default_rng(6).normal(size=(8, 3))
    _, _, kl = kd_loss(Tensor(z.copy()), z, np.zeros(8, dtype=int), alpha=1.0)
    ok = worst_total <= 1e-9 and worst_kd <= 1e-9 and abs(float(kl.data)) == 0.0
    report(6, ok, f"{len(run.steps())} steps, max residuals {worst_total:.1e} / {worst_kd:.1e}, "
                  f"copied-logit KL {float(kl.data):.1e}")
    assert ok


def test_criterion_07_kd_equals_sastc_at_zero_beta(exp):
    kd = trainer.distill(exp.config("kd", 0, epochs=1), exp.teacher.net, exp.train, exp.test)
    sastc = trainer.distill(exp.config("sastc", 0, epochs=1, beta=0.0), exp.teacher.net, exp.train, exp.test)
    a, b = [r["l_total"] for r in kd.steps()], [r["l_total"] for r in sastc.steps()]
    ok = a == b
    report(7, ok, f"first epoch, {len(a)} steps, identical per-step l_total {ok}")
    assert ok


def test_criterion_08_distillation_gain(exp):
    acc = {m: [exp.run(m, s)["test_acc"] for s in SEEDS] for m in ("baseline", "kd", "sastc")}
    wins = sum(s >= b for s, b in zip(acc["sastc"], acc["baseline"]))
    mean_s, mean_k = statistics.mean(acc["sastc"]), statistics.mean(acc["kd"])
    seconds = exp.teacher_seconds + sum(exp.seconds[(m, s, 0.0, ())] for m in acc for s in SEEDS)
    ok = wins >= 4 and mean_s >= mean_k and seconds < 1800
    table = " ".join(f"s{s}:{b:.3f}/{k:.3f}/{a:.3f}" for s, b, k, a in zip(SEEDS, acc["baseline"], acc["kd"],
                                                                            acc["sastc"]))
    report(8, ok, f"sastc>=baseline on {wins}/5, mean sastc {mean_s:.4f} vs kd {mean_k:.4f}, "
                  f"{seconds / 60:.1f} min [baseline/kd/sastc {table}]")
    assert ok


def test_criterion_09_stm_trend(exp):
    pairs = [(exp.run("sastc", s)["stm_ln"], exp.run("baseline", s)["stm_ln"]) for s in SEEDS]
    lower = sum(a < b for a, b in pairs)
    ok = lower >= 3
    detail = " ".join(f"s{s}:{a:.3f}{'<' if a < b else '>='}{b:.3f}" for s, (a, b) in zip(SEEDS, pairs))
    report(9, ok, f"sastc ln-STM below baseline on {lower}/5 [{detail}]")
    assert ok


def test_criterion_10_negative_regularisation(exp):
    seed = exp.cfg.seeds.init
    fixed = {f"{s}:{a}": exp.run("feature_kd", seed, pairs=[(s, a)])["test_acc"] for s in range(2) for a in range(3)}
    kd, sastc = exp.run("kd", seed)["test_acc"], exp.run("sastc", seed)["test_acc"]
    below = [p for p, v in fixed.items() if v < kd]
    median = statistics.median(fixed.values())
    ok = bool(below) and sastc >= median
    detail = " ".join(f"{p}={v:.3f}" for p, v in fixed.items())
    report(10, ok, f"pairs below kd {kd:.3f}: {below}; sastc {sastc:.3f} vs median {median:.3f} [{detail}]")
    assert ok


def test_criterion_11_noisy_label_trend(exp):
    drops = []
    for s in SEEDS:
        d_s = exp.run("sastc", s)["test_acc"] - exp.run("sastc", s, 0.3)["test_acc"]
        d_b = exp.run("baseline", s)["test_acc"] - exp.run("baseline", s, 0.3)["test_acc"]
        drops.append((d_s, d_b))
    wins = sum(a <= b for a, b in drops)
    ok = wins >= 3
    detail = " ".join(f"s{s}:{a:+.3f}/{b:+.3f}" for s, (a, b) in zip(SEEDS, drops))
    report(11, ok, f"sastc drop <= baseline drop on {wins}/5 at p=0.3 [sastc/baseline {detail}]")
    assert ok


def test_criterion_12_determinism(exp, tmp_path):
    cfg = exp.config("sastc", 3, 0.1, epochs=2, dump_diagnostics=True)
    noisy = trainer.make_datasets(cfg)[0]
    a = trainer.distill(cfg, exp.teacher.net, noisy, exp.test, tmp_path / "a")
    b = trainer.distill(cfg, exp.teacher.net, noisy, exp.test, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    same_files = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    again = trainer.train_teacher(exp.cfg, exp.train, exp.test)
    same_teacher = all(again.checkpoint.tensors[k].tobytes() == v.tobytes()
                       for k, v in exp.teacher.checkpoint.tensors.items())
    ok = same_files and a.records == b.records and same_teacher
    report(12, ok, f"{len(files)} run files byte-identical {same_files}, teacher checkpoint identical {same_teacher}")
    assert ok
