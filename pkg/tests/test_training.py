import numpy as np
import pytest

from gtvseg import ops
from gtvseg.autograd import GradTape, Tensor, backward, grad_check
from gtvseg.errors import NonFiniteError, ShapeError
from gtvseg.fileio import encode_checkpoint
from gtvseg.nn import NetworkConfig
from gtvseg.phantom import PhantomSpec, generate_phantom
from gtvseg.training import (
    AdamState,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    dice_loss,
    format_loss_log,
    lr_schedule,
    parse_loss_log,
    train,
)
from gtvseg.volume import Volume

SMALL = NetworkConfig(base_channels=(2, 4, 4, 4), patch_shape=(4, 8, 8))


def _probs(fg):
    fg = np.asarray(fg, np.float64).reshape(1, 1, 1, 1, -1)
    return Tensor(np.concatenate([1 - fg, fg], axis=1))


def test_dice_loss_values():
    g = np.array([1, 1, 0, 0]).reshape(1, 1, 1, 4)
    assert dice_loss(_probs([1, 1, 0, 0]), g).item() == pytest.approx(0.0, abs=1e-9)
    # sum pg = 1, sum p^2 = 1, sum g^2 = 2
    assert dice_loss(_probs([1, 0, 0, 0]), g).item() == pytest.approx(1 - (2 + 1e-5) / (3 + 1e-5))
    # empty target and empty prediction keep the loss defined
    assert dice_loss(_probs([0, 0, 0, 0]), np.zeros((1, 1, 1, 4))).item() == pytest.approx(0.0)


def test_dice_loss_shape_checked():
    with pytest.raises(ShapeError):
        dice_loss(_probs([0.5, 0.5]), np.zeros((1, 1, 1, 3)))


def test_dice_loss_gradient_through_softmax():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.standard_normal((2, 2, 2, 3, 3)))
    g = (rng.random((2, 2, 3, 3)) > 0.6).astype(np.uint8)
    assert grad_check(lambda z: dice_loss(ops.softmax_channels(z), g), logits) < 1e-6


def test_lr_schedule_steps():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 1e-4
    assert lr_schedule(9999, cfg) == 1e-4
    assert lr_schedule(10000, cfg) == pytest.approx(9e-5)
    assert lr_schedule(25000, cfg) == pytest.approx(1e-4 * 0.81)


def test_adam_matches_hand_update():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState.create({"w": w})
    g = np.array([0.5, 0.1])
    adam_step({"w": w}, state, lr=0.1, weight_decay=0.01, grads={"w": g})
    gd = g + 0.01 * np.array([1.0, -2.0])
    m = 0.1 * gd / (1 - 0.9)
    v = 0.001 * gd**2 / (1 - 0.999)
    np.testing.assert_allclose(w.data, np.array([1.0, -2.0]) - 0.1 * m / (np.sqrt(v) + 1e-8))
    assert state.step == 1


def test_adam_rejects_nonfinite_gradient_without_change():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    state = AdamState.create({"w": w})
    with pytest.raises(NonFiniteError):
        adam_step({"w": w}, state, 0.1, grads={"w": np.array([np.nan, 0.0])})
    assert w.data.tolist() == [1.0, 2.0] and state.step == 0


def test_adam_minimises_quadratic():
    w = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    state = AdamState.create({"w": w})
    for _ in range(500):
        w.grad = None
        with GradTape() as tape:
            loss = ops.sum(ops.mul(w, w))
        backward(loss, tape)
        adam_step({"w": w}, state, 0.05)
    assert np.abs(w.data).max() < 0.05


def test_train_config_validation():
    with pytest.raises(ValueError, match="local, middle, global"):
        TrainConfig(scale="coastal")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


@pytest.fixture(scope="module")
def tiny_data():
    out = []
    for s in range(2):
        spec = PhantomSpec.separable(dims=(12, 32, 32), gtv_radii=(1.5, 3.0, 3.0), seed=s)
        out.append(generate_phantom(spec))
    return out


def test_train_is_deterministic_and_logs_every_iteration(tiny_data):
    cfg = TrainConfig(total_iterations=4, batch_size=2, seed=3, lr0=1e-3)
    a = train(tiny_data, cfg, SMALL)
    b = train(tiny_data, cfg, SMALL)
    assert encode_checkpoint(a.params) == encode_checkpoint(b.params)
    assert [r[0] for r in a.log] == [0, 1, 2, 3]
    assert parse_loss_log(format_loss_log(a.log)) == a.log
    c = train(tiny_data, TrainConfig(total_iterations=4, batch_size=2, seed=4, lr0=1e-3), SMALL)
    assert encode_checkpoint(a.params) != encode_checkpoint(c.params)


def test_train_reduces_loss(tiny_data):
    cfg = TrainConfig(total_iterations=40, batch_size=2, seed=0, lr0=3e-3, fg_prob=1.0)
    log = train(tiny_data, cfg, SMALL).log
    first = np.mean([r[2] for r in log[:5]])
    last = np.mean([r[2] for r in log[-5:]])
    assert last < first


def test_train_aborts_on_nonfinite_loss(tiny_data, monkeypatch):
    import gtvseg.training as tr

    real = tr.dice_loss
    calls = []

    def flaky(probs, target):
        calls.append(1)
        out = real(probs, target)
        if len(calls) == 3:
            out.data = np.asarray(np.nan, dtype=out.dtype)
        return out

    monkeypatch.setattr(tr, "dice_loss", flaky)
    with pytest.raises(TrainingDivergedError) as err:
        train(tiny_data, TrainConfig(total_iterations=5, batch_size=1), SMALL)
    assert err.value.iteration == 2 and "iteration 2" in str(err.value)


def test_train_clips_infinite_hu(tiny_data):
    v, m = tiny_data[0]
    bad = v.data.copy()
    bad[0, 0, 0] = np.inf
    log = train([(Volume(bad, v.spacing), m)], TrainConfig(total_iterations=2, batch_size=1), SMALL).log
    assert all(np.isfinite(r[2]) for r in log)
