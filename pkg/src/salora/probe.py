"""Synthetic planted-subspace worlds, linear probes and drift measurements.

Each layer of a world's model is ``W = V diag(alpha) V^T + P_perp G P_perp``:
a planted component on an orthonormal basis ``V`` plus a generic random
weight confined to the orthogonal complement of ``V``. Protected inputs sit
mostly in ``span(V)`` at every layer, so the planted component carries their
features. Benign targets come from a teacher that (a) subtracts a rank-k term
whose factors lean towards the mean protected input/output directions and
(b) shrinks the leading singular directions of each weight. Part (a) pulls
fine-tuning into the protected features; part (b) is the task-relevant
principal update.
"""
import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mtx
from .errors import ConfigurationError, ShapeError, ValidationError
from .linalg import frobenius_norm, matmul, svd
from .model import ACTIVATIONS, LinearLayer, ToyModel, forward, load_model, output_grads, save_model
from .trainer import derive_seed, loss_and_output_grad

PROBE_L2 = 1e-4
PROP1_TOL = 1e-12


@dataclass
class SyntheticWorld:
    model: ToyModel
    benign_inputs: np.ndarray
    benign_targets: np.ndarray
    protected_inputs: np.ndarray
    planted_subspace: list
    planted_components: list
    gammas: list
    seed: int

    @property
    def planted_rank(self):
        return self.planted_subspace[0].shape[1]

    def probe_inputs(self):
        """Protected inputs (label 1) followed by as many benign inputs (label 0)."""
        n = self.protected_inputs.shape[1]
        benign = self.benign_inputs[:, :n]
        x = np.hstack([self.protected_inputs, benign])
        labels = np.concatenate([np.ones(n, dtype=int), np.zeros(benign.shape[1], dtype=int)])
        return x, labels


def _orthonormal(rng, d, k):
    if k == 0:
        return np.zeros((d, 0))
    q, r = np.linalg.qr(rng.standard_normal((d, k)))
    return q * np.sign(np.diag(r))


def _aligned_pair(rng, dims, rank, towards, alignment):
    # orthonormal dims x rank; column 0 has cosine `alignment` with unit vector `towards`
    cols = _orthonormal(rng, dims, rank)
    if towards is None or rank == 0:
        return cols
    first = cols[:, 0] - towards * (towards @ cols[:, 0])
    first /= np.linalg.norm(first)
    cols[:, 0] = alignment * towards + np.sqrt(1.0 - alignment**2) * first
    q, r = np.linalg.qr(cols)
    return q * np.sign(np.diag(r))


def build_world(dims=32, layers=3, planted_rank=4, n_benign=512, n_protected=64, seed=0,
                activation="tanh", weight_scale=0.8, planted_strength=(0.8, 1.2),
                protected_mean=0.5, protected_noise=0.1,
                teacher_rank=2, teacher_strength=2.0, teacher_alignment=0.7,
                teacher_principal=0.8):
    """Generate a seeded planted-subspace world.

    ``dims`` is the width of every layer (input, hidden and output). The
    teacher behind the benign targets adds ``-teacher_strength * P Q^T`` of
    rank ``teacher_rank`` to each layer; the leading columns of ``Q`` and
    ``P`` have cosine ``teacher_alignment`` with the mean protected input
    and output directions of that layer. It also subtracts
    ``teacher_principal`` times the rank-``teacher_rank`` truncated SVD of
    the layer weight. Small ``protected_mean`` and ``planted_strength`` keep
    the protected pre-activations in the near-linear range of ``tanh``, so
    complement-only updates at one layer stay (nearly) out of the next
    layer's planted subspace.
    """
    if planted_rank < 0 or planted_rank >= dims:
        raise ConfigurationError(f"planted_rank {planted_rank} must lie in [0, {dims})")
    if layers < 1 or n_benign < 1 or n_protected < 1:
        raise ConfigurationError("layers, n_benign and n_protected must be positive")
    if not 1 <= teacher_rank <= dims:
        raise ConfigurationError(f"teacher_rank {teacher_rank} must lie in [1, {dims}]")
    rng = np.random.default_rng(derive_seed(seed, "world"))
    k = planted_rank

    benign = rng.standard_normal((dims, n_benign))
    noise = rng.standard_normal((dims, n_protected))
    basis0 = _orthonormal(rng, dims, k)
    if k:
        latent = protected_mean + 0.5 * rng.standard_normal((k, n_protected))
        protected = basis0 @ latent + protected_noise * noise
    else:
        protected = noise

    act = ACTIVATIONS[activation][0]
    weights, bases, components, teacher = [], [], [], []
    h = protected
    for i in range(layers):
        if i == 0:
            basis = basis0
        elif k:
            basis = np.ascontiguousarray(svd(h).u[:, :k])
        else:
            basis = np.zeros((dims, 0))
        alpha = rng.uniform(*planted_strength, size=k)
        comp = (basis * alpha) @ basis.T
        perp = np.eye(dims) - basis @ basis.T
        w = comp + weight_scale * perp @ rng.standard_normal((dims, dims)) @ perp / np.sqrt(dims)
        m_in = m_out = None
        if k:
            m_in = h.mean(axis=1)
            m_in /= np.linalg.norm(m_in)
            m_out = w @ m_in
            m_out /= np.linalg.norm(m_out)
        p = _aligned_pair(rng, dims, teacher_rank, m_out, teacher_alignment)
        q = _aligned_pair(rng, dims, teacher_rank, m_in, teacher_alignment)
        top = svd(w)
        principal = (top.u[:, :teacher_rank] * top.s[:teacher_rank]) @ top.v[:, :teacher_rank].T
        teacher.append(w - teacher_strength * (p @ q.T) - teacher_principal * principal)
        weights.append(w)
        bases.append(basis)
        components.append(comp)
        h = act(w @ h)

    model = ToyModel.from_weights(weights, activation)
    targets, _ = forward(ToyModel.from_weights(teacher, activation), benign)
    gammas = _gammas(model, protected, components)
    return SyntheticWorld(model, benign, targets, protected, bases, components, gammas, seed)


def _gammas(model, protected, components):
    _, trace = forward(model, protected, capture=True)
    out = []
    for comp, x in zip(components, trace.per_layer_inputs):
        act_norms = np.sqrt(np.sum(matmul(comp, x) ** 2, axis=0))
        out.append(float(act_norms.min()))
    return out


def recompute_gammas(world):
    """Minimum protected activation norm per layer, recomputed from stored matrices."""
    return _gammas(world.model, world.protected_inputs, world.planted_components)


def save_world(path, world):
    path = Path(path)
    save_model(path / "model", world.model)
    data = path / "data"
    data.mkdir(parents=True, exist_ok=True)
    mtx.save(data / "benign_inputs.mtx", world.benign_inputs)
    mtx.save(data / "benign_targets.mtx", world.benign_targets)
    mtx.save(data / "protected_inputs.mtx", world.protected_inputs)
    planted = path / "planted"
    planted.mkdir(exist_ok=True)
    manifest = {
        "format": "salora-world-1",
        "seed": world.seed,
        "layers": len(world.model.layers),
        "planted_rank": world.planted_rank,
    }
    for i, (basis, comp, gamma) in enumerate(zip(world.planted_subspace, world.planted_components, world.gammas)):
        mtx.save(planted / f"layer_{i}_basis.mtx", basis)
        mtx.save(planted / f"layer_{i}_component.mtx", comp)
        manifest[f"layer.{i}.gamma"] = repr(gamma)
    mtx.write_manifest(path / "manifest.txt", manifest)


def load_world(path):
    path = Path(path)
    manifest_path = path / "manifest.txt"
    if not manifest_path.is_file():
        raise ConfigurationError(f"no world manifest at {manifest_path}")
    manifest = mtx.read_manifest(manifest_path)
    n = int(manifest["layers"])
    planted = path / "planted"
    return SyntheticWorld(
        model=load_model(path / "model"),
        benign_inputs=mtx.load(path / "data" / "benign_inputs.mtx"),
        benign_targets=mtx.load(path / "data" / "benign_targets.mtx"),
        protected_inputs=mtx.load(path / "data" / "protected_inputs.mtx"),
        planted_subspace=[mtx.load(planted / f"layer_{i}_basis.mtx") for i in range(n)],
        planted_components=[mtx.load(planted / f"layer_{i}_component.mtx") for i in range(n)],
        gammas=[float(manifest[f"layer.{i}.gamma"]) for i in range(n)],
        seed=int(manifest["seed"]),
    )


@dataclass
class ProbeDataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.shape[1] != self.labels.size:
            raise ShapeError(f"{self.features.shape[1]} feature columns but {self.labels.size} labels")


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: float


def probe_dataset(model, inputs, labels, layer, timesteps=1):
    """Layer-``layer`` pre-activation outputs, averaged over runs of ``timesteps`` columns."""
    _, trace = forward(model, inputs, capture=True)
    feats = trace.per_layer_outputs[layer]
    labels = np.asarray(labels, dtype=int)
    if timesteps > 1:
        n = feats.shape[1] // timesteps
        feats = feats[:, : n * timesteps].reshape(feats.shape[0], n, timesteps).mean(axis=2)
        labels = labels[: n * timesteps : timesteps]
    return ProbeDataset(feats, labels)


def _sigmoid(t):
    return 1.0 / (1.0 + np.exp(-t))


def train_probe(data, iters=500, lr=0.1):
    """Logistic-regression probe by full-batch gradient descent from zero.

    L2 penalty ``1e-4`` on the weight; the bias is not penalized.
    """
    labels = data.labels
    if np.unique(labels).size < 2:
        raise ValidationError("probe training needs both labels present")
    x = data.features
    n = x.shape[1]
    w = np.zeros(x.shape[0])
    b = 0.0
    y = labels.astype(np.float64)
    for _ in range(iters):
        err = _sigmoid(w @ x + b) - y
        w = w - lr * (x @ err / n + PROBE_L2 * w)
        b = b - lr * float(err.mean())
    return LinearProbe(w.reshape(1, -1), b)


def probe_accuracy(probe, data):
    """Fraction of samples where ``sigmoid(w x + b) >= 0.5`` agrees with the label."""
    if probe.weight.shape[1] != data.features.shape[0]:
        raise ShapeError(f"probe width {probe.weight.shape[1]} vs feature dim {data.features.shape[0]}")
    pred = (_sigmoid(probe.weight[0] @ data.features + probe.bias) >= 0.5).astype(int)
    return float(np.mean(pred == data.labels))


@dataclass
class DriftRow:
    layer: int
    acc_before: float
    acc_after: float
    output_drift: float
    subspace_perturbation: float

    @property
    def drop(self):
        return self.acc_before - self.acc_after


def _check_same_architecture(a, b):
    if a.activation != b.activation or [l.weight.shape for l in a.layers] != [l.weight.shape for l in b.layers]:
        raise ConfigurationError("models do not share an architecture")


def drift_report(world, model_before, model_after, probe_iters=500, probe_lr=0.1):
    """Per-layer probe accuracy before/after, protected output drift and planted perturbation."""
    _check_same_architecture(model_before, model_after)
    x, labels = world.probe_inputs()
    _, before = forward(model_before, world.protected_inputs, capture=True)
    _, after = forward(model_after, world.protected_inputs, capture=True)
    w_before = model_before.effective_weights()
    w_after = model_after.effective_weights()
    rows = []
    for i in range(len(model_before.layers)):
        data_before = probe_dataset(model_before, x, labels, i)
        data_after = probe_dataset(model_after, x, labels, i)
        probe = train_probe(data_before, probe_iters, probe_lr)
        y0 = before.per_layer_outputs[i]
        y1 = after.per_layer_outputs[i]
        denom = frobenius_norm(y0)
        drift = frobenius_norm(y1 - y0) / denom if denom > 0 else 0.0
        basis = world.planted_subspace[i]
        perturb = frobenius_norm(matmul(basis.T, w_after[i] - w_before[i])) if basis.shape[1] else 0.0
        rows.append(DriftRow(i, probe_accuracy(probe, data_before), probe_accuracy(probe, data_after),
                             drift, perturb))
    return rows


@dataclass
class Prop1Row:
    instance: int
    lhs: float
    rhs: float
    vacuous: bool
    passed: bool
    activation: float = float("nan")
    sigma_min: float = float("nan")


def min_column_singular_value(g):
    """Smallest singular value of ``g`` acting on its columns: zero when ``g`` is wide."""
    if g.shape[1] > g.shape[0]:
        return 0.0
    return float(svd(g).s[-1])


def proposition1_instance(w_s, x, grad_y, gamma, instance=0):
    """Evaluate ``||W_S grad^T||_F >= gamma * sigma_min(grad_Y)`` for one layer.

    ``grad = grad_Y @ x.T`` is the gradient of a low-rank update under
    ``Y = (W + dW) x``. An instance is vacuous when ``sigma_min`` is zero or
    the activation ``||W_S x||_F`` does not exceed ``gamma``; vacuous
    instances always pass.
    """
    if grad_y.shape[1] != x.shape[1]:
        raise ShapeError(f"output gradient {grad_y.shape} and inputs {x.shape} disagree on batch")
    grad = matmul(grad_y, x.T)
    lhs = frobenius_norm(matmul(w_s, grad.T))
    sigma = min_column_singular_value(grad_y)
    rhs = gamma * sigma
    activation = frobenius_norm(matmul(w_s, x))
    vacuous = sigma == 0.0 or not activation > gamma
    passed = vacuous or lhs >= rhs - PROP1_TOL
    return Prop1Row(instance, lhs, rhs, vacuous, passed, activation, sigma)


def proposition1_check(world, model, inputs, targets=None, loss_kind="mse", loss_grad_at_output=None):
    """Run the bound at every layer for a benign batch.

    The output gradient is taken from ``loss_grad_at_output`` when given,
    otherwise from the loss against ``targets``; it is propagated back to
    each layer's pre-activation output.
    """
    if not world.planted_components:
        raise ConfigurationError("world has no planted components")
    out, trace = forward(model, inputs, capture=True)
    if loss_grad_at_output is None:
        if targets is None:
            raise ConfigurationError("need targets or an explicit output gradient")
        _, loss_grad_at_output = loss_and_output_grad(out, np.asarray(targets, dtype=np.float64), loss_kind)
    grads = output_grads(model, trace, np.asarray(loss_grad_at_output, dtype=np.float64))
    return [
        proposition1_instance(world.planted_components[i], trace.per_layer_inputs[i], grads[i],
                              world.gammas[i], instance=i)
        for i in range(len(model.layers))
    ]


DRIFT_COLUMNS = ["layer", "acc_before", "acc_after", "output_drift", "subspace_perturbation"]
PROP1_COLUMNS = ["instance", "lhs", "rhs", "vacuous", "pass"]


def write_drift_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DRIFT_COLUMNS)
        for r in rows:
            writer.writerow([r.layer, f"{r.acc_before:.6g}", f"{r.acc_after:.6g}",
                             f"{r.output_drift:.6g}", f"{r.subspace_perturbation:.6g}"])


def write_prop1_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PROP1_COLUMNS)
        for r in rows:
            writer.writerow([r.instance, f"{r.lhs:.6g}", f"{r.rhs:.6g}", int(r.vacuous), int(r.passed)])


def model_with_layers(template, weights):
    """Plain model with ``template``'s activation and the given weights."""
    return ToyModel([LinearLayer(w) for w in weights], template.activation)
