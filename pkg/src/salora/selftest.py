"""Fast end-to-end sanity checks behind ``salora selftest``."""
import numpy as np

from . import mtx
from ._backend import BACKEND
from .adapters import SafetyContext, compute_safety_projector, export_record, assemble_for_inference
from .linalg import matmul, svd
from .model import forward
from .probe import build_world
from .trainer import Method, TrainConfig, attach_adapters, collect_contexts, fine_tune, gradient_audit


def _check_svd(rng):
    m = rng.standard_normal((12, 7))
    res = svd(m)
    recon = np.abs(res.reconstruct() - m).max()
    ortho = np.abs(res.u.T @ res.u - np.eye(7)).max()
    return recon < 1e-10 and ortho < 1e-10, f"reconstruction {recon:.1e}, orthogonality {ortho:.1e}"


def _check_projector(rng):
    w = rng.standard_normal((10, 10))
    c = compute_safety_projector(w, SafetyContext(rng.standard_normal((10, 20)), 3))
    err = max(np.abs(c - c.T).max(), np.abs(matmul(c, c) - c).max())
    return err < 1e-9, f"symmetry/idempotency {err:.1e}"


def _check_mtx(rng):
    m = rng.standard_normal((3, 5))
    back = mtx.from_bytes(mtx.to_bytes(m))
    return back.tobytes() == m.tobytes(), "bit-exact round trip"


def _small_world(seed):
    return build_world(dims=8, layers=2, planted_rank=2, n_benign=48, n_protected=16, seed=seed, teacher_rank=1)


def _check_init(seed):
    world = _small_world(seed)
    ctx = collect_contexts(world.model, world.protected_inputs, world.benign_inputs, 2, 2)
    base, _ = forward(world.model, world.benign_inputs)
    worst = 0.0
    for method in Method:
        out, _ = forward(attach_adapters(world.model, method, 2, ctx, seed=seed), world.benign_inputs)
        worst = max(worst, float(np.abs(out - base).max()))
    return worst < 1e-8, f"max output deviation at init {worst:.1e}"


def _check_gradients(seed):
    world = _small_world(seed)
    ctx = collect_contexts(world.model, world.protected_inputs, world.benign_inputs, 2, 2)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for method in Method:
        model = attach_adapters(world.model, method, 2, ctx, seed=seed)
        for i in model.adapted():
            slot = model.layers[i].adapter
            slot.b = slot.b + 0.1 * rng.standard_normal(slot.b.shape)
        x, y = world.benign_inputs[:, :6], world.benign_targets[:, :6]
        worst = max(worst, gradient_audit(model, x, y, "mse"))
    return worst < 1e-5, f"worst relative gradient error {worst:.1e}"


def _check_merge(seed):
    world = _small_world(seed)
    ctx = collect_contexts(world.model, world.protected_inputs, world.benign_inputs, 2, 2)
    cfg = TrainConfig(learning_rate=1e-2, epochs=2, seed=seed)
    res = fine_tune(world.model, (world.benign_inputs, world.benign_targets), "salora", cfg, ctx, r=2)
    x = np.random.default_rng(seed).standard_normal((8, 10))
    trained, _ = forward(res.model, x)
    weights = [assemble_for_inference(w, export_record(layer.adapter))
               for w, layer in zip(world.model.weights, res.model.layers)]
    h = x
    for i, w in enumerate(weights):
        h = matmul(w, h)
        if i < len(weights) - 1:
            h = np.tanh(h)
    err = float(np.abs(h - trained).max())
    return err < 1e-9 and res.final_loss < res.initial_loss, f"merge error {err:.1e}, loss {res.initial_loss:.3g} -> {res.final_loss:.3g}"


def run(seed=0, out=print):
    rng = np.random.default_rng(seed)
    checks = [
        ("svd", lambda: _check_svd(rng)),
        ("projector", lambda: _check_projector(rng)),
        ("mtx", lambda: _check_mtx(rng)),
        ("init-preservation", lambda: _check_init(seed)),
        ("gradients", lambda: _check_gradients(seed)),
        ("merge", lambda: _check_merge(seed)),
    ]
    out(f"backend: {BACKEND}")
    ok = True
    for name, check in checks:
        passed, detail = check()
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return ok
