"""Fine-tuning loop: losses, AdamW, seeded batching and a gradient auditor."""
import csv
import hashlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .adapters import (
    SafetyContext,
    TaskContext,
    assemble_salora,
    init_lora,
    init_pissa,
)
from .errors import ConfigurationError, ShapeError
from .model import adapter_grads, forward


class Method(str, Enum):
    LORA = "lora"
    PISSA = "pissa"
    SALORA = "salora"
    SALORA_NO_TASK_INIT = "salora_no_init"


class LossKind(str, Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 16
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    loss: LossKind = LossKind.MSE

    def __post_init__(self):
        self.loss = LossKind(self.loss)
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigurationError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.learning_rate < 0.0:
            raise ConfigurationError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")


@dataclass
class OptimizerState:
    """First/second moments keyed like the parameters, plus the step count."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def derive_seed(seed, label):
    """Stable 63-bit child seed for a labelled consumer of randomness."""
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def loss_and_output_grad(out, target, kind):
    """Scalar loss and its gradient with respect to ``out``.

    ``mse`` averages over every output entry; ``cross_entropy`` applies a
    softmax down each column and averages over columns.
    """
    kind = LossKind(kind)
    if out.shape != target.shape:
        raise ShapeError(f"output {out.shape} and target {target.shape} differ")
    if kind is LossKind.MSE:
        diff = out - target
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    shifted = out - out.max(axis=0, keepdims=True)
    logp = shifted - np.log(np.sum(np.exp(shifted), axis=0, keepdims=True))
    n = out.shape[1]
    loss = -float(np.sum(target * logp)) / n
    grad = (np.exp(logp) * target.sum(axis=0, keepdims=True) - target) / n
    return loss, grad


def loss_and_grad(model, batch_inputs, batch_targets, loss_kind):
    """Loss on one batch and the adapter gradients (see ``model.backward``)."""
    out, trace = forward(model, batch_inputs, capture=True)
    loss, g = loss_and_output_grad(out, np.asarray(batch_targets, dtype=np.float64), loss_kind)
    return loss, adapter_grads(model, trace, g)


def evaluate_loss(model, inputs, targets, loss_kind):
    out, _ = forward(model, inputs)
    return loss_and_output_grad(out, np.asarray(targets, dtype=np.float64), loss_kind)[0]


def adamw_step(params, grads, state, config):
    """One AdamW update with bias correction and decoupled weight decay.

    ``params`` and ``grads`` are dicts of arrays with matching keys; returns
    ``(new_params, state)``. Input arrays are not modified.
    """
    state.step += 1
    t = state.step
    lr = config.learning_rate
    b1, b2 = config.beta1, config.beta2
    new = {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {key} {p.shape}")
        m = state.m.get(key, np.zeros_like(p))
        v = state.v.get(key, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[key], state.v[key] = m, v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        decayed = p - lr * config.weight_decay * p
        new[key] = decayed - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return new, state


def batch_indices(n, batch_size, seed, epoch):
    """Seeded permutation of ``range(n)`` cut into batches; the last may be short."""
    perm = np.random.default_rng(derive_seed(seed, f"shuffle/{epoch}")).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class LayerContexts:
    """Per-layer safety and task contexts, indexed like the model's layers."""

    safety: list
    task: list


def collect_contexts(model, protected_inputs, task_inputs, r_s, r_t=None):
    """Capture every layer's input features on the protected and task sets.

    All features come from one pass through ``model`` as given (normally the
    pre-trained model without adapters).
    """
    _, h_trace = forward(model, protected_inputs, capture=True)
    _, t_trace = forward(model, task_inputs, capture=True)
    return LayerContexts(
        safety=[SafetyContext(x, r_s) for x in h_trace.per_layer_inputs],
        task=[TaskContext(x, r_t) for x in t_trace.per_layer_inputs],
    )


def attach_adapters(model, method, r, contexts=None, seed=0, layers=None):
    """Copy of ``model`` with a freshly initialized slot on each chosen layer."""
    method = Method(method)
    if method in (Method.SALORA, Method.SALORA_NO_TASK_INIT) and contexts is None:
        raise ConfigurationError(f"method {method.value} needs safety/task contexts")
    adapted = model.without_adapters()
    for i in range(len(adapted.layers)) if layers is None else layers:
        layer = adapted.layers[i]
        w = layer.weight
        init_seed = derive_seed(seed, f"init/{i}")
        if method is Method.LORA:
            layer.adapter = init_lora(w.shape[0], w.shape[1], r, init_seed)
        elif method is Method.PISSA:
            layer.adapter = init_pissa(w, r)[0]
        else:
            layer.adapter = assemble_salora(
                w, contexts.safety[i], contexts.task[i], r,
                task_init=method is Method.SALORA, seed=init_seed,
            )
    return adapted


@dataclass
class LossPoint:
    step: int
    epoch: int
    loss: float


@dataclass
class FineTuneResult:
    model: object
    initial_model: object
    loss_curve: list
    initial_loss: float
    final_loss: float


def train(model, inputs, targets, config, on_step=None):
    """Train the adapter factors of ``model`` in place; returns the per-step loss curve.

    ``on_step(step, model)`` is called before the first update (step 0) and
    after every update.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    adapted = model.adapted()
    if not adapted:
        raise ConfigurationError("nothing to train: model has no adapter slots")
    state = OptimizerState()
    curve = []
    step = 0
    if on_step is not None:
        on_step(0, model)
    for epoch in range(config.epochs):
        for idx in batch_indices(inputs.shape[1], config.batch_size, config.seed, epoch):
            loss, grads = loss_and_grad(model, inputs[:, idx], targets[:, idx], config.loss)
            params = {}
            flat_grads = {}
            for i in adapted:
                slot = model.layers[i].adapter
                for name, p in slot.trainable().items():
                    params[(i, name)] = p
                    flat_grads[(i, name)] = grads[i][name]
            new, state = adamw_step(params, flat_grads, state, config)
            for (i, name), p in new.items():
                setattr(model.layers[i].adapter, name, p)
            step += 1
            curve.append(LossPoint(step, epoch, loss))
            if on_step is not None:
                on_step(step, model)
    return curve


def fine_tune(model, dataset, method, config, contexts=None, r=4, on_step=None):
    """Attach adapters for ``method`` and train them on ``dataset = (inputs, targets)``.

    The input model is not modified. Initial and final losses are measured
    on the whole dataset.
    """
    inputs, targets = dataset
    tuned = attach_adapters(model, method, r, contexts, seed=config.seed)
    initial = tuned.copy()
    initial_loss = evaluate_loss(tuned, inputs, targets, config.loss)
    curve = train(tuned, inputs, targets, config, on_step=on_step)
    final_loss = evaluate_loss(tuned, inputs, targets, config.loss)
    return FineTuneResult(tuned, initial, curve, initial_loss, final_loss)


def frozen_digest(model):
    """SHA-256 over every frozen matrix: base weights, projectors, initial copies, residuals."""
    h = hashlib.sha256()
    for i, layer in enumerate(model.layers):
        h.update(f"layer{i}:{layer.weight.shape}".encode())
        h.update(np.ascontiguousarray(layer.weight).tobytes())
        if layer.adapter is not None:
            for name, m in sorted(layer.adapter.frozen().items()):
                h.update(f"{name}:{m.shape}".encode())
                h.update(np.ascontiguousarray(m).tobytes())
    return h.hexdigest()


def finite_difference_grads(model, inputs, targets, loss_kind, h=1e-5):
    """Central-difference estimate of every adapter gradient entry.

    Mutates each entry temporarily and restores its exact original value.
    """
    result = [None] * len(model.layers)
    for i in model.adapted():
        slot = model.layers[i].adapter
        layer_grads = {}
        for name in ("a", "b"):
            p = getattr(slot, name)
            g = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                orig = p[idx]
                p[idx] = orig + h
                plus = evaluate_loss(model, inputs, targets, loss_kind)
                p[idx] = orig - h
                minus = evaluate_loss(model, inputs, targets, loss_kind)
                p[idx] = orig
                g[idx] = (plus - minus) / (2.0 * h)
            layer_grads[name] = g
        result[i] = layer_grads
    return result


def gradient_audit(model, inputs, targets, loss_kind, h=1e-5):
    """Largest ``|analytic - fd| / (1e-8 + |fd|)`` over all adapter entries."""
    _, analytic = loss_and_grad(model, inputs, targets, loss_kind)
    numeric = finite_difference_grads(model, inputs, targets, loss_kind, h)
    worst = 0.0
    for an, fd in zip(analytic, numeric):
        if an is None:
            continue
        for name in ("a", "b"):
            err = np.abs(an[name] - fd[name]) / (1e-8 + np.abs(fd[name]))
            worst = max(worst, float(err.max()))
    return worst


def write_loss_csv(path, curve):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "epoch", "loss"])
        for point in curve:
            writer.writerow([point.step, point.epoch, f"{point.loss:.6g}"])

