import numpy as np
import pytest

from salora.errors import ConfigurationError, ShapeError
from salora.adapters import safety_basis
from salora.model import ToyModel, forward
from salora.probe import build_world
from salora.trainer import (
    LossKind,
    Method,
    OptimizerState,
    TrainConfig,
    adamw_step,
    attach_adapters,
    batch_indices,
    collect_contexts,
    derive_seed,
    fine_tune,
    frozen_digest,
    gradient_audit,
    loss_and_grad,
    loss_and_output_grad,
    write_loss_csv,
)


def _world(seed=0):
    return build_world(dims=8, layers=2, planted_rank=2, n_benign=64, n_protected=16, seed=seed, teacher_rank=1)


def _contexts(world):
    return collect_contexts(world.model, world.protected_inputs, world.benign_inputs, r_s=2, r_t=2)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)
    assert TrainConfig(loss="cross_entropy").loss is LossKind.CROSS_ENTROPY


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.batch_size, cfg.epochs) == (2e-4, 16, 1)
    assert (cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay) == (0.9, 0.999, 1e-8, 0.01)


@pytest.mark.parametrize("kind", ["mse", "cross_entropy"])
def test_targets_equal_outputs_mse_zero(kind):
    out = np.random.default_rng(0).standard_normal((3, 4))
    if kind == "mse":
        loss, g = loss_and_output_grad(out, out.copy(), kind)
        assert loss == 0.0 and not g.any()
    else:
        # one-hot targets at the argmax of a very peaked output: loss ~ 0
        peaked = np.eye(3)[:, [0, 1, 2, 0]] * 50.0
        loss, g = loss_and_output_grad(peaked, np.eye(3)[:, [0, 1, 2, 0]], kind)
        assert loss < 1e-20 and np.abs(g).max() < 1e-20


def test_mse_hand_case():
    # single linear layer y = W x, 2x1 output
    w, x, t = np.array([[1.0], [2.0]]), np.array([[3.0]]), np.array([[1.0], [1.0]])
    y = w @ x
    loss, g = loss_and_output_grad(y, t, "mse")
    assert loss == pytest.approx(((3 - 1) ** 2 + (6 - 1) ** 2) / 2)
    assert np.allclose(g, [[2.0], [5.0]])


def test_cross_entropy_against_direct_formula():
    rng = np.random.default_rng(0)
    out = rng.standard_normal((4, 5))
    t = np.eye(4)[:, rng.integers(0, 4, 5)]
    p = np.exp(out) / np.exp(out).sum(axis=0)
    loss, g = loss_and_output_grad(out, t, "cross_entropy")
    assert loss == pytest.approx(-np.sum(t * np.log(p)) / 5, rel=1e-12)
    assert np.allclose(g, (p - t) / 5)


def test_loss_shape_error():
    with pytest.raises(ShapeError):
        loss_and_output_grad(np.ones((2, 2)), np.ones((2, 3)), "mse")


@pytest.mark.parametrize("method", list(Method))
@pytest.mark.parametrize("loss", ["mse", "cross_entropy"])
@pytest.mark.parametrize("seed", range(2))
def test_gradient_audit(method, loss, seed):
    world = _world(seed)
    model = attach_adapters(world.model, method, 2, _contexts(world), seed=seed)
    rng = np.random.default_rng(seed)
    for i in model.adapted():
        slot = model.layers[i].adapter
        slot.b = slot.b + 0.1 * rng.standard_normal(slot.b.shape)
    x = world.benign_inputs[:, :6]
    y = world.benign_targets[:, :6] if loss == "mse" else np.eye(8)[:, rng.integers(0, 8, 6)]
    assert gradient_audit(model, x, y, loss) < 1e-5


def test_adamw_zero_grad_zero_decay_is_identity():
    p = {"w": np.array([[1.5, -2.0]])}
    new, state = adamw_step(p, {"w": np.zeros((1, 2))}, OptimizerState(), TrainConfig(weight_decay=0.0, learning_rate=0.1))
    assert np.array_equal(new["w"], p["w"]) and state.step == 1


def test_adamw_first_step_scalar():
    cfg = TrainConfig(learning_rate=0.01, weight_decay=0.1)
    new, state = adamw_step({"x": np.array([[2.0]])}, {"x": np.array([[0.5]])}, OptimizerState(), cfg)
    # m_hat = g, v_hat = g^2 after bias correction
    expected = 2.0 - 0.01 * 0.1 * 2.0 - 0.01 * 0.5 / (0.5 + 1e-8)
    assert new["x"][0, 0] == pytest.approx(expected, abs=1e-15)
    assert state.m["x"][0, 0] == pytest.approx(0.05) and state.v["x"][0, 0] == pytest.approx(0.00025)


def test_adamw_does_not_mutate_inputs():
    p = {"x": np.ones((2, 2))}
    adamw_step(p, {"x": np.ones((2, 2))}, OptimizerState(), TrainConfig(learning_rate=0.1))
    assert np.array_equal(p["x"], np.ones((2, 2)))


def test_adamw_converges_on_quadratic():
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.0)
    p, state = {"x": np.zeros((1, 1))}, OptimizerState()
    for _ in range(100):
        p, state = adamw_step(p, {"x": 2.0 * (p["x"] - 3.0)}, state, cfg)
    assert abs(p["x"][0, 0] - 3.0) < 0.1


def test_adamw_shape_error():
    with pytest.raises(ShapeError):
        adamw_step({"x": np.ones((2, 2))}, {"x": np.ones((2, 1))}, OptimizerState(), TrainConfig())


def test_batches_cover_everything_and_keep_partial():
    batches = batch_indices(37, 16, seed=3, epoch=0)
    assert [len(b) for b in batches] == [16, 16, 5]
    assert sorted(np.concatenate(batches).tolist()) == list(range(37))
    again = batch_indices(37, 16, seed=3, epoch=0)
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))
    assert not np.array_equal(np.concatenate(batches), np.concatenate(batch_indices(37, 16, 3, 1)))


def test_derive_seed_labels():
    assert derive_seed(0, "world") == derive_seed(0, "world")
    assert len({derive_seed(0, "world"), derive_seed(0, "init/0"), derive_seed(1, "world")}) == 3
    assert 0 <= derive_seed(5, "x") < 2**63


def test_salora_needs_contexts():
    with pytest.raises(ConfigurationError):
        attach_adapters(_world().model, "salora", 2)


@pytest.mark.parametrize("method", list(Method))
def test_attach_preserves_outputs(method):
    world = _world(1)
    model = attach_adapters(world.model, method, 2, _contexts(world))
    a, _ = forward(world.model, world.benign_inputs)
    b, _ = forward(model, world.benign_inputs)
    assert np.abs(a - b).max() < 1e-8
    assert world.model.adapted() == []


def test_zero_learning_rate_keeps_adapters():
    world = _world(2)
    cfg = TrainConfig(learning_rate=0.0, epochs=2, seed=2)
    res = fine_tune(world.model, (world.benign_inputs, world.benign_targets), "salora", cfg, _contexts(world), r=2)
    for before, after in zip(res.initial_model.layers, res.model.layers):
        assert before.adapter.a.tobytes() == after.adapter.a.tobytes()
        assert before.adapter.b.tobytes() == after.adapter.b.tobytes()


@pytest.mark.parametrize("method", list(Method))
def test_training_reduces_loss_and_keeps_frozen(method):
    world = _world(3)
    cfg = TrainConfig(learning_rate=1e-2, epochs=3, seed=3)
    digests = []
    res = fine_tune(world.model, (world.benign_inputs, world.benign_targets), method, cfg, _contexts(world), r=2,
                    on_step=lambda step, m: digests.append(frozen_digest(m)))
    assert res.final_loss < res.initial_loss
    assert len(set(digests)) == 1 and len(digests) == len(res.loss_curve) + 1
    assert [p.step for p in res.loss_curve] == list(range(1, len(res.loss_curve) + 1))


def test_salora_update_never_enters_safety_subspace():
    world = _world(4)
    ctx = _contexts(world)
    checks = []

    bases = [safety_basis(layer.weight, ctx.safety[i]) for i, layer in enumerate(world.model.layers)]

    def on_step(step, model):
        for u_c, layer in zip(bases, model.layers):
            slot = layer.adapter
            checks.append(np.linalg.norm(u_c.T @ slot.c @ slot.b @ slot.a))

    cfg = TrainConfig(learning_rate=1e-2, epochs=2, seed=4)
    fine_tune(world.model, (world.benign_inputs, world.benign_targets), "salora", cfg, ctx, r=2, on_step=on_step)
    assert all(u.shape[1] == 2 for u in bases)
    assert checks and max(checks) < 1e-8


def test_training_is_deterministic():
    world = _world(5)
    cfg = TrainConfig(learning_rate=1e-2, epochs=2, seed=5)
    runs = [fine_tune(world.model, (world.benign_inputs, world.benign_targets), "salora", cfg, _contexts(world), r=2)
            for _ in range(2)]
    for l0, l1 in zip(runs[0].model.layers, runs[1].model.layers):
        assert l0.adapter.a.tobytes() == l1.adapter.a.tobytes()
        assert l0.adapter.b.tobytes() == l1.adapter.b.tobytes()


def test_train_requires_adapters():
    from salora.trainer import train
    with pytest.raises(ConfigurationError):
        train(ToyModel.from_weights([np.eye(2)]), np.ones((2, 2)), np.ones((2, 2)), TrainConfig())


def test_loss_and_grad_structure():
    world = _world(0)
    model = attach_adapters(world.model, "lora", 2, seed=0)
    loss, grads = loss_and_grad(model, world.benign_inputs[:, :4], world.benign_targets[:, :4], "mse")
    assert loss > 0 and all(set(g) == {"a", "b"} for g in grads)


def test_loss_csv(tmp_path):
    from salora.trainer import LossPoint
    write_loss_csv(tmp_path / "l.csv", [LossPoint(1, 0, 0.123456789), LossPoint(2, 1, 1e-7)])
    assert (tmp_path / "l.csv").read_bytes() == b"step,epoch,loss\n1,0,0.123457\n2,1,1e-07\n"
