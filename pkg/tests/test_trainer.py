import struct
import zlib

import numpy as np
import pytest

from tbpinn.datagen import generate_dataset
from tbpinn.errors import ConfigMismatchError, DivergenceError, EmptySplitError, FormatError
from tbpinn.loss import AlphaSchedule, LossConfig, ScheduleKind
from tbpinn.network import Formulation, NetworkConfig
from tbpinn.trainer import (
    AdamState,
    Checkpoint,
    StopReason,
    TrainConfig,
    adam_update,
    assemble_pairs,
    clip_grad_norm,
    read_checkpoint,
    split_dataset,
    train,
    write_checkpoint,
)

TINY = NetworkConfig("dnn", 2, 16, "relu", "nar")


@pytest.fixture(scope="module")
def sims():
    ds = generate_dataset(64, 2024)
    assert len(ds.converged()) >= 50
    return ds


@pytest.fixture(scope="module")
def fifty(sims):
    return sims.converged()[:50]


def test_split_counts_and_determinism(sims):
    recs = sims.converged()
    many = (recs * 3)[:100]
    many = [r.__class__(i, r.ic, r.trajectory) for i, r in enumerate(many)]
    train_part, val_part = split_dataset(many, 0.95, 1)
    assert (len(train_part), len(val_part)) == (95, 5)
    again = split_dataset(many, 0.95, 1)
    assert [r.sim_id for r in again[1]] == [r.sim_id for r in val_part]
    assert {r.sim_id for r in train_part}.isdisjoint(r.sim_id for r in val_part)


def test_split_smallest_case(fifty):
    a, b = split_dataset(fifty[:2], 0.5, 0)
    assert len(a) == len(b) == 1


def test_split_rejects_empty_side(fifty):
    with pytest.raises(EmptySplitError):
        split_dataset(fifty[:1], 0.5, 0)
    with pytest.raises(EmptySplitError):
        split_dataset(fifty[:10], 0.99, 0)


def test_adam_first_step():
    state, p = adam_update(AdamState.zeros(1), np.array([0.0]), np.array([1.0]), 0.001)
    assert p[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
    assert state.step_count == 1


def test_adam_zero_gradient_keeps_params():
    p0 = np.array([0.3, -1.2])
    _, p = adam_update(AdamState.zeros(2), p0, np.zeros(2), 0.01)
    np.testing.assert_array_equal(p, p0)


def test_adam_decoupled_decay():
    p0 = np.array([0.3, -1.2, 4.0])
    _, p = adam_update(AdamState.zeros(3), p0, np.zeros(3), 7.5e-4, 1e-5)
    np.testing.assert_array_equal(p, p0 * (1 - 7.5e-9))


def test_clip_examples():
    g = np.array([6.0, 8.0])
    np.testing.assert_allclose(clip_grad_norm(g, 5.0), [3.0, 4.0])
    g = np.array([0.0, 3.0])
    assert clip_grad_norm(g, 5.0) is not None and np.array_equal(clip_grad_norm(g, 5.0), g)
    np.testing.assert_array_equal(clip_grad_norm(np.zeros(4), 5.0), np.zeros(4))


def test_nar_pairs(fifty):
    X, Y = assemble_pairs(fifty[:3], Formulation.NON_AUTOREGRESSIVE)
    assert X.shape == (3 * 256, 7) and Y.shape == (3 * 256, 12)
    V = fifty[1].trajectory.vectors()
    rows = slice(256, 512)
    np.testing.assert_array_equal(X[rows, :6], np.tile(V[0, :6], (256, 1)))
    np.testing.assert_array_equal(X[rows, 6], fifty[1].trajectory.times()[1:])
    np.testing.assert_array_equal(Y[rows], V[1:])
    assert np.all(X[:, 6] > 0)


def test_ar_pairs(fifty):
    X, Y = assemble_pairs(fifty[:2], Formulation.AUTOREGRESSIVE)
    assert X.shape == (512, 13)
    V = fifty[0].trajectory.vectors()
    np.testing.assert_array_equal(X[:256, :12], V[:-1])
    np.testing.assert_array_equal(Y[:256], V[1:])
    assert np.all(X[:, 12] == fifty[0].trajectory.dt)


def test_smoke_training_reduces_data_loss(fifty):
    ck, report = train(
        fifty, TINY, LossConfig(AlphaSchedule.off()), TrainConfig(max_epochs=30, seed=3, learning_rate=2e-3)
    )
    losses = [r.train_data_loss for r in report.rows[:5]]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert report.rows[report.best_epoch].val_total_loss == min(r.val_total_loss for r in report.rows)
    assert ck.epoch == report.best_epoch


def test_training_is_deterministic(fifty):
    cfg = TrainConfig(max_epochs=4, seed=9)
    loss = LossConfig(AlphaSchedule(ScheduleKind.LINEAR, 0.001, 0.1, 4))
    a = train(fifty[:20], TINY, loss, cfg)
    b = train(fifty[:20], TINY, loss, cfg)
    assert a[1] == b[1]
    assert a[0] == b[0]


def test_zero_alpha_matches_physics_free_run(fifty):
    cfg = TrainConfig(max_epochs=3, seed=4)
    a, ra = train(fifty[:20], TINY, LossConfig(AlphaSchedule.off()), cfg)
    b, rb = train(fifty[:20], TINY, LossConfig(AlphaSchedule.off()), cfg, with_physics=False)
    np.testing.assert_array_equal(a.params, b.params)
    assert [r.train_data_loss for r in ra.rows] == [r.train_data_loss for r in rb.rows]


def test_non_binding_clip_changes_nothing(fifty):
    loss = LossConfig(AlphaSchedule(ScheduleKind.LINEAR, 0.001, 0.1, 3))
    a, _ = train(fifty[:20], TINY, loss, TrainConfig(max_epochs=3, seed=4, grad_clip_norm=None))
    b, _ = train(fifty[:20], TINY, loss, TrainConfig(max_epochs=3, seed=4, grad_clip_norm=1e300))
    np.testing.assert_array_equal(a.params, b.params)


def test_learning_rate_schedule_and_early_stop(fifty):
    # a learning rate this small barely moves the loss, so plateaus and early stopping both fire
    cfg = TrainConfig(max_epochs=60, seed=5, learning_rate=1e-9)
    _, report = train(fifty[:20], TINY, LossConfig(AlphaSchedule.off()), cfg)
    lrs = [r.learning_rate for r in report.rows]
    assert lrs[0] == 1e-9
    for a, b in zip(lrs, lrs[1:]):
        assert b == a or b == a * 0.7
    assert any(b < a for a, b in zip(lrs, lrs[1:]))
    assert report.stopped_reason is StopReason.EARLY_STOP
    assert len(report.rows) <= report.best_epoch + cfg.early_stop_patience + 1


def test_sharp_warmup_spikes_loss(fifty):
    pinn = NetworkConfig("dnn", 2, 16, "tanh", "nar")
    sched = AlphaSchedule(ScheduleKind.WARMUP, 0.0, 10.0, warmup_epochs=5)
    _, report = train(fifty[:20], pinn, LossConfig(sched), TrainConfig(max_epochs=7, seed=2))
    total = [r.train_data_loss + r.alpha * r.train_physics_loss for r in report.rows]
    assert report.rows[5].alpha == 10.0 and report.rows[4].alpha == 0.0
    assert total[5] > 2 * max(total[:5])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(fifty):
    with pytest.raises(DivergenceError) as info:
        train(fifty[:20], TINY, LossConfig(AlphaSchedule.off()), TrainConfig(max_epochs=3, learning_rate=1e300))
    assert info.value.epoch is not None


def test_training_needs_two_simulations(fifty):
    with pytest.raises(EmptySplitError):
        train(fifty[:1], TINY, LossConfig(), TrainConfig(max_epochs=1))


@pytest.fixture
def checkpoint(fifty):
    ck, _ = train(fifty[:20], TINY, LossConfig(), TrainConfig(max_epochs=2, seed=1))
    return ck


def test_checkpoint_round_trip(checkpoint, tmp_path):
    path = tmp_path / "m.tbpc"
    write_checkpoint(checkpoint, path)
    back = read_checkpoint(path)
    assert back == checkpoint
    np.testing.assert_array_equal(back.params, checkpoint.params)
    assert back.network == checkpoint.network and back.loss == checkpoint.loss
    assert back.dt == checkpoint.dt


def test_checkpoint_truncated(checkpoint, tmp_path):
    path = tmp_path / "m.tbpc"
    write_checkpoint(checkpoint, path)
    path.write_bytes(path.read_bytes()[:-50])
    with pytest.raises(FormatError):
        read_checkpoint(path)


def test_checkpoint_bad_version(checkpoint, tmp_path):
    path = tmp_path / "m.tbpc"
    write_checkpoint(checkpoint, path)
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack("<I", 2)
    body = bytes(data[:-4])
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(FormatError, match="version"):
        read_checkpoint(path)


def test_edited_config_block_mismatches(checkpoint, tmp_path):
    path = tmp_path / "m.tbpc"
    write_checkpoint(checkpoint, path)
    data = path.read_bytes()[:-4]
    edited = data.replace(b"activation=relu", b"activation=gelu")
    assert edited != data
    path.write_bytes(edited + struct.pack("<I", zlib.crc32(edited)))
    back = read_checkpoint(path)
    with pytest.raises(ConfigMismatchError):
        back.require(TINY)
    checkpoint.require(TINY)


def test_checkpoint_formulation_and_dt_checks(checkpoint):
    with pytest.raises(ConfigMismatchError):
        checkpoint.require(formulation=Formulation.AUTOREGRESSIVE)
    with pytest.raises(ConfigMismatchError):
        checkpoint.require(dt=0.05)


def test_checkpoint_rejects_wrong_parameter_length():
    with pytest.raises(ValueError):
        Checkpoint(TINY, LossConfig(), np.zeros(3))
