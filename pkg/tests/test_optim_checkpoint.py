import numpy as np
import pytest

from wsod.nn import Adam, CheckpointError, OptimizerConfig, load_checkpoint, save_checkpoint, sgd_update


def test_sgd_arithmetic():
    cfg = OptimizerConfig(0.001)
    assert sgd_update(np.array([1.0]), np.array([0.5]), 0, cfg)[0] == pytest.approx(0.9995)
    np.testing.assert_array_equal(sgd_update(np.array([1.0, 2.0]), np.zeros(2), 0, cfg), [1.0, 2.0])


def test_schedule_boundary():
    cfg = OptimizerConfig(0.001, [(100, 0.0005)])
    assert cfg.lr_at(99) == 0.001
    assert cfg.lr_at(100) == 0.0005


@pytest.mark.parametrize("schedule", [[(10, 0.1), (10, 0.2)], [(10, 0.1), (5, 0.2)], [(3, -1.0)]])
def test_schedule_validation(schedule):
    with pytest.raises(ValueError):
        OptimizerConfig(0.01, schedule)


def test_batch_norm_step():
    assert not OptimizerConfig(0.1).batch_norm_active(10 ** 6)
    cfg = OptimizerConfig(0.1, batch_norm_enabled_from_step=5)
    assert not cfg.batch_norm_active(4) and cfg.batch_norm_active(5)


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_update(np.zeros(2), np.zeros(3), 0, OptimizerConfig())


def test_adam_first_step_is_lr_times_sign():
    opt = Adam(OptimizerConfig(0.01))
    out = opt.update("w", np.array([1.0, 1.0]), np.array([3.0, -0.2]), 0)
    np.testing.assert_allclose(out, [0.99, 1.01], rtol=1e-6)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(2, 3)), "scalar": np.array(4.0), "ü": np.arange(5.0), "empty": np.zeros((0, 2))}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tensors)
    back = load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
        assert back[k].shape == tensors[k].shape


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOTACKPT")
    with pytest.raises(CheckpointError, match="header"):
        load_checkpoint(path)
    save_checkpoint(path, {"w": np.ones(10)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
