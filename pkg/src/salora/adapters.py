"""Adapter slots: vanilla LoRA, PiSSA and SaLoRA.

A SaLoRA slot adds ``C @ B @ A`` to a frozen residual weight, where
``C = I - U_C U_C^T`` removes the dominant output directions of the
protected features. Training only moves ``A`` and ``B``; the residual is
chosen so the slot reproduces the pre-trained weight at initialization.
"""
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import mtx
from .errors import ConfigurationError, FormatError, RankError, ShapeError
from .linalg import (
    as_matrix,
    matmul,
    numerical_rank,
    svd,
    top_left_singular_vectors,
)

SAFETY_RANK_TOL = 1e-10


class AdapterKind(str, Enum):
    LORA = "lora"
    PISSA = "pissa"
    SALORA = "salora"


@dataclass
class AdapterSlot:
    """Trainable low-rank factors plus the frozen pieces each kind needs.

    ``residual_w`` replaces the layer's base weight while the slot is
    attached (PiSSA and SaLoRA); ``c``, ``a0`` and ``b0`` are SaLoRA-only.
    """

    kind: AdapterKind
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray | None = None
    a0: np.ndarray | None = None
    b0: np.ndarray | None = None
    residual_w: np.ndarray | None = None
    r_s: int = 0

    def __post_init__(self):
        self.kind = AdapterKind(self.kind)
        if self.b.shape[1] != self.a.shape[0]:
            raise ShapeError(f"adapter factors do not chain: b {self.b.shape}, a {self.a.shape}")
        if self.rank > min(self.out_dim, self.in_dim):
            raise RankError(f"rank {self.rank} exceeds min{(self.out_dim, self.in_dim)}")
        if self.c is not None and self.c.shape != (self.out_dim, self.out_dim):
            raise ShapeError(f"projector {self.c.shape} does not match out_dim {self.out_dim}")

    @property
    def rank(self):
        return self.a.shape[0]

    @property
    def out_dim(self):
        return self.b.shape[0]

    @property
    def in_dim(self):
        return self.a.shape[1]

    def base(self, w):
        return w if self.residual_w is None else self.residual_w

    def delta(self):
        ba = matmul(self.b, self.a)
        return ba if self.c is None else matmul(self.c, ba)

    def effective_weight(self, w):
        return self.base(w) + self.delta()

    def apply(self, w, x):
        """Layer output ``base @ x + C @ (B @ (A @ x))`` without forming the full update."""
        out = matmul(self.b, matmul(self.a, x))
        if self.c is not None:
            out = matmul(self.c, out)
        return matmul(self.base(w), x) + out

    def trainable(self):
        return {"a": self.a, "b": self.b}

    def frozen(self):
        return {
            name: getattr(self, name)
            for name in ("c", "a0", "b0", "residual_w")
            if getattr(self, name) is not None
        }

    def copy(self):
        def cp(m):
            return None if m is None else m.copy()

        return AdapterSlot(
            self.kind, self.a.copy(), self.b.copy(), cp(self.c), cp(self.a0),
            cp(self.b0), cp(self.residual_w), self.r_s,
        )


@dataclass(frozen=True)
class SafetyContext:
    """Per-layer input features of protected samples, ``in_dim x n_h``."""

    x_h: np.ndarray
    r_s: int


@dataclass(frozen=True)
class TaskContext:
    """Per-layer input features of fine-tuning samples, ``in_dim x n_t``."""

    x_t: np.ndarray
    r_t: int | None = None


def _check_rank(r, out_dim, in_dim):
    if not 1 <= r <= min(out_dim, in_dim):
        raise RankError(f"adapter rank {r} outside [1, {min(out_dim, in_dim)}]")


def init_lora(out_dim, in_dim, r, seed):
    """Zero ``b`` and Gaussian ``a`` with std ``1/sqrt(in_dim)``."""
    _check_rank(r, out_dim, in_dim)
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((r, in_dim)) / np.sqrt(in_dim)
    return AdapterSlot(AdapterKind.LORA, a=a, b=np.zeros((out_dim, r)))


def init_pissa(w, r):
    """Split ``w`` into its top-``r`` principal part ``b @ a`` and a frozen residual."""
    w = as_matrix(w, "w")
    _check_rank(r, *w.shape)
    u, s, v = svd(w)
    root = np.sqrt(s[:r])
    b = np.ascontiguousarray(u[:, :r] * root)
    a = np.ascontiguousarray(root[:, None] * v[:, :r].T)
    residual = w - matmul(b, a)
    slot = AdapterSlot(AdapterKind.PISSA, a=a, b=b, residual_w=residual)
    return slot, residual


def safety_basis(w, ctx):
    """Orthonormal ``U_C``: top left singular vectors of ``w @ x_h``.

    The requested safety rank is clamped to the numerical rank of the
    feature matrix (singular values above ``1e-10 * s_max``); the result may
    have zero columns.
    """
    w = as_matrix(w, "w")
    x_h = as_matrix(ctx.x_h, "x_h")
    if w.shape[1] != x_h.shape[0]:
        raise ShapeError(f"w {w.shape} cannot act on protected features {x_h.shape}")
    if ctx.r_s <= 0:
        return np.zeros((w.shape[0], 0))
    feats = matmul(w, x_h)
    res = svd(feats)
    r_eff = min(ctx.r_s, numerical_rank(res.s, SAFETY_RANK_TOL))
    return np.ascontiguousarray(res.u[:, :r_eff])


def projector_from_basis(u_c):
    d = u_c.shape[0]
    if u_c.shape[1] == 0:
        return np.eye(d)
    return np.eye(d) - matmul(u_c, np.ascontiguousarray(u_c.T))


def compute_safety_projector(w, ctx):
    """``C = I - U_C U_C^T``, the projector onto the complement of the protected outputs."""
    return projector_from_basis(safety_basis(w, ctx))


def task_specific_init(w, ctx, r):
    """Task-aligned, norm-balanced factors.

    ``b = U U^T Ubar_r sqrt(Sbar_r)`` and ``a = sqrt(Sbar_r) Vbar_r^T`` where
    ``U`` spans the top task output directions of ``w @ x_t`` and
    ``Ubar, Sbar, Vbar`` is the SVD of ``w``.
    """
    w = as_matrix(w, "w")
    x_t = as_matrix(ctx.x_t, "x_t")
    _check_rank(r, *w.shape)
    if w.shape[1] != x_t.shape[0]:
        raise ShapeError(f"w {w.shape} cannot act on task features {x_t.shape}")
    r_t = r if ctx.r_t is None else ctx.r_t
    r_t = min(r_t, w.shape[0], x_t.shape[1])
    if r_t < 1:
        raise RankError(f"task rank {r_t} must be positive")
    u = top_left_singular_vectors(matmul(w, x_t), r_t)
    ubar, sbar, vbar = svd(w)
    root = np.sqrt(sbar[:r])
    proj = matmul(u, np.ascontiguousarray(u.T))
    b = matmul(proj, np.ascontiguousarray(ubar[:, :r] * root))
    a = np.ascontiguousarray(root[:, None] * vbar[:, :r].T)
    return b, a


def assemble_salora(w, safety, task, r, *, task_init=True, seed=0):
    """Build a SaLoRA slot whose initial effective weight equals ``w``.

    With ``task_init=False`` the factors get the vanilla LoRA initialization
    (seeded by ``seed``) behind the same projector.
    """
    w = as_matrix(w, "w")
    u_c = safety_basis(w, safety)
    c = projector_from_basis(u_c)
    if task_init:
        b, a = task_specific_init(w, task, r)
    else:
        lora = init_lora(w.shape[0], w.shape[1], r, seed)
        b, a = lora.b, lora.a
    residual = w - matmul(c, matmul(b, a))
    return AdapterSlot(
        AdapterKind.SALORA, a=a, b=b, c=c, a0=a.copy(), b0=b.copy(),
        residual_w=residual, r_s=u_c.shape[1],
    )


@dataclass
class AdapterRecord:
    """What gets written to disk for one adapted layer.

    For SaLoRA, ``b`` and ``b0`` already include the projector
    (``b' = C b``); the projector and residual are never saved.
    """

    kind: AdapterKind
    a: np.ndarray
    b: np.ndarray
    a0: np.ndarray | None = None
    b0: np.ndarray | None = None
    residual: np.ndarray | None = None
    r_s: int = 0

    @property
    def rank(self):
        return self.a.shape[0]

    @property
    def out_dim(self):
        return self.b.shape[0]

    @property
    def in_dim(self):
        return self.a.shape[1]

    def matrices(self):
        if self.kind is AdapterKind.SALORA:
            return {"b_prime": self.b, "a": self.a, "b0_prime": self.b0, "a0": self.a0}
        out = {"b": self.b, "a": self.a}
        if self.residual is not None:
            out["residual"] = self.residual
        return out


def merge_for_saving(slot):
    """Fold the SaLoRA projector into the ``B`` factors: ``b' = C b``, ``b0' = C b0``."""
    if slot.kind is not AdapterKind.SALORA:
        raise ConfigurationError(f"merge_for_saving needs a salora slot, got {slot.kind.value}")
    return AdapterRecord(
        AdapterKind.SALORA,
        a=slot.a.copy(),
        b=matmul(slot.c, slot.b),
        a0=slot.a0.copy(),
        b0=matmul(slot.c, slot.b0),
        r_s=slot.r_s,
    )


def export_record(slot):
    """Checkpoint record for any slot kind."""
    if slot.kind is AdapterKind.SALORA:
        return merge_for_saving(slot)
    residual = None if slot.residual_w is None else slot.residual_w.copy()
    return AdapterRecord(slot.kind, a=slot.a.copy(), b=slot.b.copy(), residual=residual)


def assemble_for_inference(w_pretrained, record):
    """Effective inference weight from the pre-trained weight and a saved record.

    SaLoRA: ``w - b0' a0 + b' a``; LoRA: ``w + b a``; PiSSA: ``residual + b a``.
    """
    w = as_matrix(w_pretrained, "w_pretrained")
    if (record.out_dim, record.in_dim) != w.shape:
        raise ShapeError(
            f"adapter is {record.out_dim}x{record.in_dim} but weight is {w.shape[0]}x{w.shape[1]}"
        )
    if record.kind is AdapterKind.SALORA:
        return w - matmul(record.b0, record.a0) + matmul(record.b, record.a)
    if record.kind is AdapterKind.PISSA:
        if record.residual is None:
            raise ConfigurationError("pissa record is missing its residual")
        return record.residual + matmul(record.b, record.a)
    return w + matmul(record.b, record.a)


def save_adapters(path, records):
    """Write ``{layer_index: AdapterRecord}`` as one subdirectory of MTX1 files per layer."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "salora-adapters-1", "layers": ",".join(str(i) for i in sorted(records))}
    for i in sorted(records):
        rec = records[i]
        layer_dir = path / f"layer_{i}"
        layer_dir.mkdir(exist_ok=True)
        for name, m in rec.matrices().items():
            mtx.save(layer_dir / f"{name}.mtx", m)
        manifest[f"layer.{i}.kind"] = rec.kind.value
        manifest[f"layer.{i}.r"] = rec.rank
        manifest[f"layer.{i}.r_s"] = rec.r_s
        manifest[f"layer.{i}.dims"] = f"{rec.out_dim},{rec.in_dim}"
    mtx.write_manifest(path / "manifest.txt", manifest)


def load_adapters(path):
    path = Path(path)
    if not (path / "manifest.txt").is_file():
        raise FormatError(f"no adapter manifest in {path}")
    manifest = mtx.read_manifest(path / "manifest.txt")
    layers = [int(i) for i in manifest.get("layers", "").split(",") if i]
    records = {}
    for i in layers:
        kind = AdapterKind(manifest[f"layer.{i}.kind"])
        layer_dir = path / f"layer_{i}"
        if kind is AdapterKind.SALORA:
            rec = AdapterRecord(
                kind,
                a=mtx.load(layer_dir / "a.mtx"),
                b=mtx.load(layer_dir / "b_prime.mtx"),
                a0=mtx.load(layer_dir / "a0.mtx"),
                b0=mtx.load(layer_dir / "b0_prime.mtx"),
                r_s=int(manifest[f"layer.{i}.r_s"]),
            )
        else:
            residual = layer_dir / "residual.mtx"
            rec = AdapterRecord(
                kind,
                a=mtx.load(layer_dir / "a.mtx"),
                b=mtx.load(layer_dir / "b.mtx"),
                residual=mtx.load(residual) if residual.exists() else None,
            )
        records[i] = rec
    return records
