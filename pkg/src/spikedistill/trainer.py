"""Teacher pretraining, distillation in four modes, evaluation and the experiment suites.

Run directory layout (all optional, written only when a directory is given)::

    config.cfg        config echo, reparses to an equal RunConfig
    teacher.ckpt      teacher weights, accuracies in the manifest meta
    student.ckpt      student weights (plus calibrator.* when keep_training_modules)
    metrics.log       step / epoch / summary records
    summary.log       the summary record alone
    diagnostics/      per-epoch attention weights and similarity matrices
"""

from __future__ import annotations

import contextlib
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from . import tensor_io
from .calibration import Calibrator
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config
from .data import BatchPlan, Dataset, batch_indices, corrupt_labels, load_dataset, synth_splits
from .losses import LossBreakdown, cross_entropy, kd_loss, pair_mse_table, sastc_loss, total_loss
from .metrics import MetricsWriter, default_pairing, format_record, spike_rate, stm_epoch_report, stm_score
from .models import FeaturePattern, Network, SpikingNetwork, build_teacher, data_dependent_init
from .neuron import LifParams
from .optim import Optimizer
from .tensor import ContractError, Tensor


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, component: str, value: float):
        super().__init__(f"non-finite {component}={value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.component, self.value = epoch, batch, component, value


@contextlib.contextmanager
def numeric_mode(cfg: RunConfig):
    """Apply the config's float width and log policy for the duration of a run."""
    old_dtype = tn.get_default_dtype()
    old_log = tn._LOG_MODE
    tn.set_default_dtype(cfg.dtype)
    tn.set_log_mode(cfg.log_mode)
    try:
        yield
    finally:
        tn.set_default_dtype("f32" if old_dtype == np.float32 else "f64")
        tn.set_log_mode(old_log)


def _cast(ds: Dataset) -> Dataset:
    dtype = tn.get_default_dtype()
    if ds.images.dtype == dtype:
        return ds
    return dataclasses.replace(ds, images=ds.images.astype(dtype))


def make_datasets(cfg: RunConfig, label_noise: float | None = None) -> tuple[Dataset, Dataset]:
    """Train/test splits per the data section; label noise is applied to the train split only."""
    d = cfg.data
    if d.source == "synth":
        train, test = synth_splits(d.classes, d.train_per_class, d.test_per_class, d.size, cfg.seeds.data,
                                   d.channels, d.noise_std)
    else:
        train = load_dataset(d.train_images, d.train_labels, d.source, d.classes, "train")
        test = load_dataset(d.test_images, d.test_labels, d.source, d.classes, "test")
    p = cfg.label_noise if label_noise is None else label_noise
    if p > 0:
        train = corrupt_labels(train, p, cfg.seeds.noise)
    return train, test


# -- evaluation ---------------------------------------------------------------------------------
@dataclass
class EvalResult:
    accuracy: float
    spike_rates: dict[int, float] = field(default_factory=dict)
    n: int = 0


def evaluate(net: Network, ds: Dataset, T: int | None = None, batch_size: int = 100) -> EvalResult:
    """Top-1 accuracy (and spike rates for spiking nets) without gradients, any batch size."""
    if tuple(ds.image_shape) != net.in_shape:
        raise tn.DimensionError(f"dataset images {ds.image_shape} do not match network input {net.in_shape}")
    ds = _cast(ds)
    correct, fired, counts = 0, {}, {}
    with tn.no_grad():
        for start in range(0, len(ds), batch_size):
            x = Tensor(ds.images[start:start + batch_size])
            y = ds.labels[start:start + batch_size]
            if net.spiking:
                out = net(x, T)
                logits = out.logits
                lif_layers = sorted(out.spikes)
                for k, layer in enumerate(lif_layers):
                    trains = out.spikes[layer]
                    fired[k] = fired.get(k, 0.0) + spike_rate(trains) * y.shape[0]
                    counts[k] = counts.get(k, 0) + y.shape[0]
            else:
                _, logits = net(x)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
    rates = {k: fired[k] / counts[k] for k in fired}
    return EvalResult(correct / len(ds), rates, len(ds))


# -- checkpoints -------------------------------------------------------------------------------
def _lif_meta(p: LifParams) -> dict:
    return dataclasses.asdict(p)


def network_checkpoint(net: Network, meta: dict, config_text: str = "",
                       extra: dict[str, np.ndarray] | None = None) -> Checkpoint:
    tensors = {f"model.{k}": v for k, v in net.state_dict().items()}
    for k, v in (extra or {}).items():
        tensors[k] = v
    info = {"arch": net.arch, "in_shape": list(net.in_shape), "num_classes": net.num_classes,
            "spiking": net.spiking}
    if net.spiking:
        info.update(T=net.T, lif=_lif_meta(net.lif))
    info.update(meta)
    return Checkpoint(tensors, info, config_text)


def network_from_checkpoint(ckpt: Checkpoint, T: int | None = None) -> Network:
    """Rebuild the network described by the manifest and load its weights."""
    m = ckpt.meta
    try:
        if m.get("spiking"):
            net: Network = SpikingNetwork(m["arch"], tuple(m["in_shape"]), m["num_classes"],
                                          np.random.default_rng(0), LifParams(**m["lif"]), T or m["T"])
        else:
            net = Network(m["arch"], tuple(m["in_shape"]), m["num_classes"], np.random.default_rng(0))
    except KeyError as exc:
        raise ContractError(f"checkpoint manifest lacks {exc}") from exc
    net.load_state_dict(ckpt.subset("model."))
    return net


def load_network(path: str | Path, T: int | None = None) -> Network:
    return network_from_checkpoint(load_checkpoint(path), T)


# -- teacher -----------------------------------------------------------------------------------
@dataclass
class TeacherRun:
    net: Network
    train_acc: float
    test_acc: float
    losses: list[float]
    checkpoint: Checkpoint


def train_teacher(cfg: RunConfig, train: Dataset, test: Dataset, run_dir: str | Path | None = None) -> TeacherRun:
    """Cross-entropy training of the ANN teacher with the configured optimizer family."""
    cfg.validate()
    run_dir = Path(run_dir) if run_dir else None
    with numeric_mode(cfg):
        train, test = _cast(train), _cast(test)
        net = build_teacher(cfg.teacher.arch, train.image_shape, train.num_classes, cfg.seeds.teacher)
        plan = BatchPlan(min(cfg.teacher.batch, len(train)), seed=cfg.seeds.teacher, drop_last=False)
        steps = cfg.teacher.epochs * len(batch_indices(len(train), plan))
        o = cfg.optim
        opt = Optimizer(net.parameters(), o.kind, cfg.teacher.lr, o.momentum, (o.beta1, o.beta2),
                        weight_decay=o.weight_decay, total_steps=steps, schedule=o.schedule)
        losses = []
        last_good = net.state_dict()
        for epoch in range(cfg.teacher.epochs):
            for k, idx in enumerate(batch_indices(len(train), plan, epoch)):
                _, logits = net(Tensor(train.images[idx]))
                loss = cross_entropy(logits, train.labels[idx])
                value = float(loss.data)
                if not math.isfinite(value):
                    net.load_state_dict(last_good)
                    if run_dir:
                        ckpt = network_checkpoint(net, {"role": "teacher", "diverged": True, "epoch": epoch},
                                                  dump_config(cfg))
                        save_checkpoint(run_dir / "teacher.ckpt", ckpt)
                    raise TrainingDiverged(epoch, k, "l_ce", value)
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(value)
            last_good = net.state_dict()
        net.zero_grad()
        train_acc = evaluate(net, train, batch_size=cfg.eval_batch).accuracy
        test_acc = evaluate(net, test, batch_size=cfg.eval_batch).accuracy
        ckpt = network_checkpoint(net, {"role": "teacher", "train_acc": train_acc, "test_acc": test_acc,
                                        "epochs": cfg.teacher.epochs}, dump_config(cfg))
        if run_dir:
            run_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(run_dir / "teacher.ckpt", ckpt)
    return TeacherRun(net, train_acc, test_acc, losses, ckpt)


# -- distillation ---------------------------------------------------------------------------------
@dataclass
class TeacherCache:
    """Frozen teacher outputs for every training instance, computed once per run."""
    tap_layers: list[int]
    maps: list[np.ndarray]
    logits: np.ndarray

    @classmethod
    def build(cls, teacher: Network, ds: Dataset, batch_size: int = 100) -> "TeacherCache":
        maps: list[list[np.ndarray]] = [[] for _ in range(teacher.num_taps)]
        logits = []
        with tn.no_grad():
            for start in range(0, len(ds), batch_size):
                pattern, z = teacher(Tensor(ds.images[start:start + batch_size]))
                for a, m in enumerate(pattern.maps):
                    maps[a].append(m.data)
                logits.append(z.data)
        return cls(list(teacher.tap_index), [np.concatenate(m) for m in maps], np.concatenate(logits))

    def pattern(self, idx: np.ndarray) -> FeaturePattern:
        return FeaturePattern([(layer, Tensor(m[idx])) for layer, m in zip(self.tap_layers, self.maps)])


@dataclass
class DistillRun:
    student: SpikingNetwork
    calibrator: Calibrator | None
    records: list[dict]
    summary: dict
    stm_history: list[float]
    checkpoint: Checkpoint
    run_dir: Path | None = None

    def steps(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "step"]

    def epochs(self) -> list[dict]:
        return [r for r in self.records if r["kind"] == "epoch"]


def _fingerprint(net: Network) -> list[bytes]:
    return [p.data.tobytes() for p in net.parameters()]


def _rng(cfg: RunConfig, stream: int) -> np.random.Generator:
    # independent streams per component so that every mode starts from the same student
    return np.random.default_rng([cfg.seeds.init, stream])


def _check(value: float, component: str, epoch: int, batch: int) -> float:
    if not math.isfinite(value):
        raise TrainingDiverged(epoch, batch, component, value)
    return value


def _fixed_pair_weights(pairs, T: int, s_L: int, b: int, a_L: int) -> Tensor:
    w = np.zeros((T, s_L, b, a_L))
    for s, a in pairs:
        w[:, s, :, a] = 1.0
    return Tensor(w)


def _dump(run_dir: Path, epoch: int, name: str, array) -> None:
    out = run_dir / "diagnostics"
    out.mkdir(parents=True, exist_ok=True)
    tensor_io.save(out / f"epoch{epoch:03d}_{name}.stns", array)


def distill(cfg: RunConfig, teacher: Network, train: Dataset, test: Dataset,
            run_dir: str | Path | None = None) -> DistillRun:
    """Train a spiking student against a frozen teacher in the configured mode."""
    cfg.validate()
    run_dir = Path(run_dir) if run_dir else None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.cfg").write_text(dump_config(cfg))
    writer = MetricsWriter(run_dir / "metrics.log" if run_dir else None)
    with numeric_mode(cfg):
        train, test = _cast(train), _cast(test)
        if len(train) < cfg.b:
            raise tn.DomainError(f"batch size {cfg.b} exceeds the {len(train)} training instances")
        before = _fingerprint(teacher)
        cache = TeacherCache.build(teacher, train, cfg.eval_batch)

        student = SpikingNetwork(cfg.student.arch, train.image_shape, train.num_classes, _rng(cfg, 1), cfg.lif, cfg.T)
        plan = BatchPlan(cfg.b, seed=int(np.random.SeedSequence([cfg.seeds.init, 3]).generate_state(1)[0]))
        if cfg.student.init_std > 0:
            data_dependent_init(student, train.images[batch_indices(len(train), plan)[0]], cfg.student.init_std)
        s_L, a_L = student.num_taps, teacher.num_taps
        for s, a in list(cfg.feature_pairs) + list(cfg.stm_pairs):
            if not (0 <= s < s_L and 0 <= a < a_L):
                raise ContractError(f"layer pair ({s}, {a}) outside {s_L} student x {a_L} teacher taps")
        calibrator = None
        params = student.parameters()
        if cfg.mode in ("feature_kd", "sastc"):
            calibrator = Calibrator(student.tap_shapes, teacher.tap_shapes, cfg.b, _rng(cfg, 2),
                                    cfg.qk.d_h, cfg.qk.d_k, cfg.qk.per_layer, cfg.qk.zero_init_query,
                                    cfg.qk.zero_init_projector)
            params = params + calibrator.parameters()
        pairing = list(cfg.stm_pairs) or default_pairing(s_L, a_L)

        per_epoch = len(batch_indices(len(train), plan))
        o = cfg.optim
        opt = Optimizer(params, o.kind, o.lr, o.momentum, (o.beta1, o.beta2), weight_decay=o.weight_decay,
                        total_steps=cfg.epochs * per_epoch, schedule=o.schedule, clip_norm=o.clip_norm)

        stm_history, step = [], 0
        test_acc = float("nan")
        for epoch in range(cfg.epochs):
            correct, seen, stm_sum = 0, 0, 0.0
            fired: dict[int, float] = {}
            for k, idx in enumerate(batch_indices(len(train), plan, epoch)):
                x, y = Tensor(train.images[idx]), train.labels[idx]
                t_pattern = cache.pattern(idx)
                t_logits = cache.logits[idx]
                out = student(x)

                zero = Tensor(0.0)
                if cfg.mode == "baseline":
                    ce = cross_entropy(out.logits, y, cfg.loss_reduction)
                    l_kd, kl, l_s = ce, zero, zero
                else:
                    l_kd, ce, kl = kd_loss(out.logits, t_logits, y, cfg.alpha, cfg.loss_reduction)
                    l_s = zero
                if cfg.mode == "sastc":
                    result = calibrator.calibrate(out.patterns, t_pattern)
                    table = pair_mse_table(result, t_pattern.maps, cfg.similarity_space_loss)
                    l_s = sastc_loss(result.allocation, table, cfg.loss_reduction)
                    if run_dir and cfg.dump_diagnostics and k == 0:
                        _dump(run_dir, epoch, "eta", result.allocation.eta.data)
                        _dump(run_dir, epoch, "pair_mse", table.data)
                        for a, m in enumerate(result.teacher_sim):
                            _dump(run_dir, epoch, f"teacher_sim_a{a}", m.data)
                        for t, per_t in enumerate(result.student_sim):
                            for s, m in enumerate(per_t):
                                _dump(run_dir, epoch, f"student_sim_t{t}_s{s}", m.data)
                elif cfg.mode == "feature_kd":
                    result = calibrator.calibrate(out.patterns, t_pattern, pairs=list(cfg.feature_pairs),
                                                  attention=False)
                    table = pair_mse_table(result, t_pattern.maps, cfg.similarity_space_loss)
                    weights = _fixed_pair_weights(cfg.feature_pairs, cfg.T, s_L, cfg.b, a_L)
                    l_s = tn.scale(sastc_loss(weights, table, cfg.loss_reduction), 1.0 / cfg.T)
                beta = cfg.beta if cfg.mode in ("feature_kd", "sastc") else 0.0
                l_total = total_loss(l_kd, l_s, beta) if cfg.mode != "baseline" else ce

                parts = LossBreakdown(
                    l_sastc=_check(float(l_s.data), "l_sastc", epoch, k),
                    l_kd=_check(float(l_kd.data), "l_kd", epoch, k),
                    l_ce=_check(float(ce.data), "l_ce", epoch, k),
                    l_kl=_check(float(kl.data), "l_kl", epoch, k),
                    l_total=_check(float(l_total.data), "l_total", epoch, k),
                    alpha=cfg.alpha if cfg.mode != "baseline" else 0.0,
                    beta=beta,
                )
                opt.zero_grad()
                l_total.backward()
                opt.step()

                with tn.no_grad():
                    stm_sum += stm_score(out.patterns, t_pattern, pairing)
                correct += int(np.sum(np.argmax(out.logits.data, axis=1) == y))
                seen += y.shape[0]
                for j, layer in enumerate(sorted(out.spikes)):
                    fired[j] = fired.get(j, 0.0) + spike_rate(out.spikes[layer])
                writer.write({"kind": "step", "epoch": epoch, "step": step, **parts.as_dict()})
                step += 1

            stm_raw = stm_sum / per_epoch
            stm_history.append(stm_raw)
            record = {"kind": "epoch", "epoch": epoch, "split": "train", "acc": correct / seen,
                      "stm_raw": stm_raw, "stm_ln": math.log(stm_raw) if stm_raw > 0 else float("-inf")}
            record.update({f"rate.{j}": v / per_epoch for j, v in fired.items()})
            last = epoch == cfg.epochs - 1
            if last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0):
                test_acc = evaluate(student, test, batch_size=cfg.eval_batch).accuracy
                record["test_acc"] = test_acc
            writer.write(record)

        if _fingerprint(teacher) != before:
            raise ContractError("teacher parameters changed during distillation")
        report = stm_epoch_report(stm_history, cfg.stm_window, pairing)
        train_acc = evaluate(student, train, batch_size=cfg.eval_batch).accuracy
        summary = {"kind": "summary", "mode": cfg.mode, "T": cfg.T, "seed": cfg.seeds.init,
                   "data_seed": cfg.seeds.data, "noise_seed": cfg.seeds.noise, "label_noise": cfg.label_noise,
                   "epochs": cfg.epochs, "train_acc": train_acc, "test_acc": test_acc,
                   "stm_ln": report.headline, "stm_raw_last": stm_history[-1]}
        writer.write(summary)
        extra = {}
        if calibrator is not None and cfg.keep_training_modules:
            extra = {f"calibrator.{k}": v for k, v in calibrator.state_dict().items()}
        meta = {"role": "student", "mode": cfg.mode, "train_acc": train_acc, "test_acc": test_acc,
                "stm_ln": report.headline}
        ckpt = network_checkpoint(student, meta, dump_config(cfg), extra)
        if run_dir:
            save_checkpoint(run_dir / "student.ckpt", ckpt)
            (run_dir / "summary.log").write_text(format_record(summary) + "\n")
    return DistillRun(student, calibrator, writer.records, summary, stm_history, ckpt, run_dir)


# -- suites -----------------------------------------------------------------------------------------
def _run_dir(root: Path | None, name: str) -> Path | None:
    return root / name if root else None


def ablation_fixed_pairs(cfg: RunConfig, teacher: Network, train: Dataset, test: Dataset,
                         out_root: str | Path | None = None) -> list[dict]:
    """One feature_kd run per (student tap, teacher tap) pair plus kd and sastc references."""
    root = Path(out_root) if out_root else None
    probe = SpikingNetwork(cfg.student.arch, train.image_shape, train.num_classes, np.random.default_rng(0),
                           cfg.lif, cfg.T)
    rows = []
    for s in range(probe.num_taps):
        for a in range(teacher.num_taps):
            run_cfg = dataclasses.replace(cfg, mode="feature_kd", feature_pairs=[(s, a)])
            run = distill(run_cfg, teacher, train, test, _run_dir(root, f"pair_s{s}_a{a}"))
            rows.append({"kind": "ablation", "mode": "feature_kd", "pair": f"{s}:{a}", "seed": cfg.seeds.init,
                         "test_acc": run.summary["test_acc"], "stm_ln": run.summary["stm_ln"]})
    for mode in ("kd", "sastc"):
        run = distill(dataclasses.replace(cfg, mode=mode), teacher, train, test, _run_dir(root, mode))
        rows.append({"kind": "ablation", "mode": mode, "pair": "-", "seed": cfg.seeds.init,
                     "test_acc": run.summary["test_acc"], "stm_ln": run.summary["stm_ln"]})
    return rows


def noisy_label_suite(cfg: RunConfig, fractions, modes=("baseline", "kd", "sastc"), teacher: Network | None = None,
                      out_root: str | Path | None = None) -> list[dict]:
    """Distill per (noise fraction, mode) on corrupted train labels, scored on the clean test split.

    The teacher is trained once on clean labels unless ``retrain_teacher_on_noise`` is set.
    """
    root = Path(out_root) if out_root else None
    clean_train, test = make_datasets(cfg, label_noise=0.0)
    if teacher is None and not cfg.retrain_teacher_on_noise:
        teacher = train_teacher(cfg, clean_train, test, _run_dir(root, "teacher")).net
    rows = []
    for p in fractions:
        noisy_train, _ = make_datasets(cfg, label_noise=p)
        t_net = teacher
        if cfg.retrain_teacher_on_noise:
            t_net = train_teacher(cfg, noisy_train, test, _run_dir(root, f"teacher_p{p}")).net
        for mode in modes:
            run_cfg = dataclasses.replace(cfg, mode=mode, label_noise=p)
            run = distill(run_cfg, t_net, noisy_train, test, _run_dir(root, f"p{p}_{mode}"))
            rows.append({"kind": "noisy", "mode": mode, "fraction": p, "seed": cfg.seeds.init,
                         "test_acc": run.summary["test_acc"]})
    return rows


def obtain_teacher(cfg: RunConfig, train: Dataset, test: Dataset, run_dir: str | Path | None = None) -> Network:
    """Load the configured teacher checkpoint, or train one when none is given."""
    if cfg.teacher.checkpoint:
        net = load_network(cfg.teacher.checkpoint)
        if net.spiking:
            raise ContractError(f"{cfg.teacher.checkpoint} holds a spiking network, not a teacher")
        return net
    return train_teacher(cfg, train, test, run_dir).net
