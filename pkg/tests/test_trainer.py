import dataclasses

import numpy as np
import pytest

from spikedistill import tensor as tn
from spikedistill import tensor_io, trainer
from spikedistill.config import RunConfig, apply_overrides, load_config
from spikedistill.losses import LossBreakdown
from spikedistill.metrics import read_records, select


def tiny(*overrides):
    base = ["data.train_per_class=24", "data.test_per_class=10", "data.size=8", "b=16", "epochs=2",
            "teacher.epochs=3", "eval_batch=50", "qk.d_h=8", "qk.d_k=4", "stm_window=2"]
    return apply_overrides(RunConfig(), base + list(overrides)).validate()


@pytest.fixture(scope="module")
def setup():
    cfg = tiny()
    train, test = trainer.make_datasets(cfg)
    teacher = trainer.train_teacher(cfg, train, test)
    return cfg, train, test, teacher


def with_mode(cfg, mode, **kw):
    return dataclasses.replace(cfg, mode=mode, **kw)


@pytest.mark.parametrize("mode", ["baseline", "kd", "feature_kd", "sastc"])
def test_every_step_satisfies_the_loss_identities(setup, mode):
    cfg, train, test, teacher = setup
    run = trainer.distill(with_mode(cfg, mode, feature_pairs=[(1, 2)]), teacher.net, train, test)
    steps = run.steps()
    assert len(steps) == 2 * (72 // 16)
    for rec in steps:
        parts = LossBreakdown(**{k: rec[k] for k in ("l_sastc", "l_kd", "l_ce", "l_kl", "l_total", "alpha", "beta")})
        parts.check(1e-9)
        assert min(parts.l_sastc, parts.l_kd, parts.l_ce) >= 0 and parts.l_kl >= -1e-12
    if mode == "baseline":
        assert all(r["l_kl"] == 0 and r["l_sastc"] == 0 and r["l_total"] == r["l_ce"] for r in steps)
    if mode == "kd":
        assert all(r["l_sastc"] == 0 and r["l_total"] == r["l_kd"] for r in steps)
    if mode in ("feature_kd", "sastc"):
        assert all(r["l_sastc"] > 0 for r in steps)


def test_kd_equals_sastc_without_feature_weight(setup):
    cfg, train, test, teacher = setup
    kd = trainer.distill(with_mode(cfg, "kd"), teacher.net, train, test)
    sastc = trainer.distill(with_mode(cfg, "sastc", beta=0.0), teacher.net, train, test)
    assert [r["l_total"] for r in kd.steps()] == [r["l_total"] for r in sastc.steps()]
    assert kd.summary["test_acc"] == sastc.summary["test_acc"]


def test_zero_init_query_first_batch_uniform_eta(setup, tmp_path):
    cfg, train, test, teacher = setup
    run = trainer.distill(with_mode(cfg, "sastc", dump_diagnostics=True, epochs=1), teacher.net, train, test, tmp_path)
    eta = tensor_io.load(tmp_path / "diagnostics" / "epoch000_eta.stns")
    table = tensor_io.load(tmp_path / "diagnostics" / "epoch000_pair_mse.stns")
    assert eta.shape == table.shape == (cfg.T, 2, cfg.b, 3)
    np.testing.assert_allclose(eta, 1.0 / 3.0, rtol=0, atol=1e-15)
    # average over teacher layers, summed over steps and student layers, mean over the batch
    expected = table.mean(axis=-1).sum(axis=(0, 1)).mean()
    assert run.steps()[0]["l_sastc"] == pytest.approx(expected, rel=1e-12)


def test_teacher_is_frozen(setup):
    cfg, train, test, teacher = setup
    before = {k: v.copy() for k, v in teacher.net.state_dict().items()}
    trainer.distill(with_mode(cfg, "sastc", epochs=1), teacher.net, train, test)
    for k, v in teacher.net.state_dict().items():
        assert v.tobytes() == before[k].tobytes()
    assert all(p.grad is None for p in teacher.net.parameters())


def test_distill_is_deterministic(setup):
    cfg, train, test, teacher = setup
    c = with_mode(cfg, "sastc", epochs=1)
    a = trainer.distill(c, teacher.net, train, test).checkpoint
    b = trainer.distill(c, teacher.net, train, test).checkpoint
    assert all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)


def test_evaluate_matches_logged_test_accuracy(setup, tmp_path):
    cfg, train, test, teacher = setup
    run = trainer.distill(with_mode(cfg, "kd"), teacher.net, train, test, tmp_path)
    assert trainer.evaluate(run.student, test).accuracy == run.summary["test_acc"]
    reloaded = trainer.load_network(tmp_path / "student.ckpt")
    assert trainer.evaluate(reloaded, test, batch_size=7).accuracy == run.summary["test_acc"]
    assert run.epochs()[-1]["test_acc"] == run.summary["test_acc"]


def test_run_directory_contents(setup, tmp_path):
    cfg, train, test, teacher = setup
    c = with_mode(cfg, "sastc", epochs=1, keep_training_modules=True)
    run = trainer.distill(c, teacher.net, train, test, tmp_path)
    assert load_config(tmp_path / "config.cfg") == c
    recs = read_records(tmp_path / "metrics.log")
    assert select(recs, kind="summary") == [run.summary]
    assert len(select(recs, kind="epoch")) == 1
    assert any(k.startswith("calibrator.") for k in run.checkpoint.tensors)
    lean = trainer.distill(dataclasses.replace(c, keep_training_modules=False), teacher.net, train, test)
    assert all(k.startswith("model.") for k in lean.checkpoint.tensors)


def test_eval_time_steps_override(setup):
    cfg, train, test, teacher = setup
    run = trainer.distill(with_mode(cfg, "kd", epochs=1), teacher.net, train, test)
    net = trainer.network_from_checkpoint(run.checkpoint, T=1)
    assert net.T == 1
    x = tn.Tensor(test.images[:4])
    with tn.no_grad():
        out3 = run.student(x)
        out1 = run.student(x, 1)
    np.testing.assert_allclose(out1.logits.data, out3.step_logits[0].data)


def test_untrained_student_near_chance():
    cfg = RunConfig()
    train, test = trainer.make_datasets(cfg)
    net = trainer.SpikingNetwork(cfg.student.arch, train.image_shape, 3, np.random.default_rng([0, 1]), cfg.lif, cfg.T)
    assert abs(trainer.evaluate(net, test).accuracy - 1 / 3) <= 0.10


def test_teacher_determinism_and_zero_lr(setup):
    cfg, train, test, teacher = setup
    again = trainer.train_teacher(cfg, train, test)
    assert all(teacher.checkpoint.tensors[k].tobytes() == again.checkpoint.tensors[k].tobytes()
               for k in teacher.checkpoint.tensors)
    frozen = trainer.train_teacher(dataclasses.replace(cfg, teacher=dataclasses.replace(cfg.teacher, lr=0.0)),
                                   train, test)
    init = trainer.build_teacher(cfg.teacher.arch, train.image_shape, 3, cfg.seeds.teacher)
    for k, v in init.state_dict().items():
        np.testing.assert_array_equal(frozen.net.state_dict()[k], v)


def test_teacher_divergence_keeps_last_good_checkpoint(setup, tmp_path):
    cfg, train, test, _ = setup
    hot = dataclasses.replace(cfg, teacher=dataclasses.replace(cfg.teacher, lr=1e9))
    with pytest.raises(trainer.TrainingDiverged) as exc:
        trainer.train_teacher(hot, train, test, tmp_path)
    assert exc.value.component == "l_ce"
    ckpt = trainer.load_checkpoint(tmp_path / "teacher.ckpt")
    assert ckpt.meta["diverged"] and all(np.all(np.isfinite(v)) for v in ckpt.tensors.values())


def test_student_divergence_names_the_component(setup):
    cfg, train, test, teacher = setup
    broken = trainer.network_from_checkpoint(teacher.checkpoint)
    broken.head.bias.data[0] = np.nan
    with pytest.raises(trainer.TrainingDiverged) as exc:
        trainer.distill(with_mode(cfg, "kd"), broken, train, test)
    assert (exc.value.component, exc.value.epoch, exc.value.batch) == ("l_kd", 0, 0)


def test_pair_outside_taps_rejected(setup):
    cfg, train, test, teacher = setup
    with pytest.raises(trainer.ContractError):
        trainer.distill(with_mode(cfg, "feature_kd", feature_pairs=[(2, 0)]), teacher.net, train, test)


def test_ablation_covers_every_pair_once(setup):
    cfg, train, test, teacher = setup
    rows = trainer.ablation_fixed_pairs(dataclasses.replace(cfg, epochs=1), teacher.net, train, test)
    pairs = [r["pair"] for r in rows if r["mode"] == "feature_kd"]
    assert sorted(pairs) == [f"{s}:{a}" for s in range(2) for a in range(3)]
    assert [r["mode"] for r in rows[6:]] == ["kd", "sastc"] and len(rows) == 8


def test_noise_suite_clean_column_is_the_standard_run(setup):
    cfg, train, test, teacher = setup
    c = dataclasses.replace(cfg, epochs=1)
    rows = trainer.noisy_label_suite(c, [0.0, 0.3], ["kd"], teacher.net)
    standard = trainer.distill(with_mode(c, "kd"), teacher.net, train, test)
    assert rows[0]["test_acc"] == standard.summary["test_acc"]
    assert [(r["fraction"], r["mode"]) for r in rows] == [(0.0, "kd"), (0.3, "kd")]


def test_label_noise_touches_train_split_only():
    cfg = tiny("label_noise=0.5")
    clean_train, clean_test = trainer.make_datasets(tiny())
    train, test = trainer.make_datasets(cfg)
    assert np.array_equal(test.labels, clean_test.labels)
    assert int(np.sum(train.labels != clean_train.labels)) == 36
