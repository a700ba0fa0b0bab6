import math

import numpy as np
import pytest

from spikedistill.checkpoint import (
    Checkpoint,
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from spikedistill.nn import Parameter
from spikedistill.optim import Optimizer


def sample():
    return Checkpoint({"model.w": np.arange(6.0).reshape(2, 3), "model.b": np.array([1.5], dtype=np.float32),
                       "calibrator.x": np.zeros((0, 2))}, {"arch": "conv8+", "T": 3}, "[run]\nT = 3\n")


def test_checkpoint_roundtrip(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", sample())
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.meta == {"arch": "conv8+", "T": 3} and back.config_text == "[run]\nT = 3\n"
    for k, v in sample().tensors.items():
        assert back.tensors[k].dtype == v.dtype and np.array_equal(back.tensors[k], v)
    assert set(back.subset("model.")) == {"w", "b"}
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_errors_carry_offsets():
    blob = encode_checkpoint(sample())
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"NOPE" + blob[4:])
    with pytest.raises(CheckpointError, match="byte"):
        decode_checkpoint(blob[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(blob + b"x")
    with pytest.raises(CheckpointError, match="byte"):
        decode_checkpoint(blob[:10])


def test_payloads_are_tensor_files():
    from spikedistill import tensor_io

    ckpt = Checkpoint({"a": np.ones(4)})
    blob = encode_checkpoint(ckpt)
    mlen = int.from_bytes(blob[8:16], "little")
    arr, end = tensor_io.decode(blob, 16 + mlen)
    assert np.array_equal(arr, np.ones(4)) and end == len(blob)


def param(values, grad):
    p = Parameter(np.asarray(values, dtype=float))
    p.grad = np.asarray(grad, dtype=float)
    return p


def test_sgd_momentum_by_hand():
    p = param([1.0], [0.5])
    opt = Optimizer([p], lr=0.1, momentum=0.9, weight_decay=0.0, schedule="constant")
    opt.step()
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.5)
    p.grad = np.array([0.5])
    opt.step()
    assert p.data[0] == pytest.approx(0.95 - 0.1 * (0.9 * 0.5 + 0.5))


def test_weight_decay_folds_into_gradient():
    p = param([2.0], [0.0])
    Optimizer([p], lr=0.1, momentum=0.0, weight_decay=0.5, schedule="constant").step()
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 1.0)


def test_adam_first_step_moves_by_lr():
    p = param([1.0, -1.0], [3.0, -0.01])
    Optimizer([p], kind="adam", lr=0.01, weight_decay=0.0, schedule="constant").step()
    np.testing.assert_allclose(p.data, [0.99, -0.99], atol=1e-6)


def test_cosine_schedule_endpoints():
    opt = Optimizer([], lr=0.2, total_steps=100)
    assert opt.lr_at(0) == 0.2 and opt.lr_at(50) == pytest.approx(0.1) and opt.lr_at(100) == pytest.approx(0.0)


def test_clip_scales_global_norm():
    a, b = param([0.0], [3.0]), param([0.0], [4.0])
    opt = Optimizer([a, b], lr=1.0, momentum=0.0, weight_decay=0.0, schedule="constant", clip_norm=1.0)
    assert opt.grad_norm() == 5.0
    opt.step()
    np.testing.assert_allclose([a.data[0], b.data[0]], [-0.6, -0.8])
    assert math.hypot(a.data[0], b.data[0]) == pytest.approx(1.0)


def test_zero_lr_and_missing_grads_leave_params():
    p, q = param([1.0], [5.0]), Parameter(np.array([2.0]))
    Optimizer([p, q], lr=0.0).step()
    assert p.data[0] == 1.0 and q.data[0] == 2.0
