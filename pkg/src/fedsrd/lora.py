"""Low-rank adapter state, synthetic client tasks, and the update algebra.

A layer's trainable update is the product b @ a of a (d_out x r) left
factor and an (r x d_in) right factor riding on a frozen base weight.
Synthetic clients are teacher-student linear regression tasks: each
client owns per-layer teacher matrices (the frozen base plus a
client-specific low-rank shift), and local training runs plain gradient
descent on the factors against freshly sampled Gaussian input batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, InvalidInputError, ShapeError
from .linalg import as_matrix
from .wire import SparseDelta


@dataclass(frozen=True)
class LayerSpec:
    """Shape and frozen base weight of one adapted layer."""

    d_out: int
    d_in: int
    rank: int
    frozen_base: np.ndarray

    def __post_init__(self):
        base = as_matrix(self.frozen_base, "frozen_base")
        if base.shape != (self.d_out, self.d_in):
            raise ShapeError(
                f"frozen_base shape {base.shape} != ({self.d_out}, {self.d_in})"
            )
        if not 1 <= self.rank <= min(self.d_out, self.d_in):
            raise InvalidInputError(
                f"rank {self.rank} outside [1, {min(self.d_out, self.d_in)}]"
            )
        object.__setattr__(self, "frozen_base", base)


@dataclass(frozen=True)
class LoraPair:
    """One layer's adapter factors b (d_out x r) and a (r x d_in)."""

    b: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        b = as_matrix(self.b, "b")
        a = as_matrix(self.a, "a")
        if b.shape[1] != a.shape[0]:
            raise ShapeError(f"b cols {b.shape[1]} != a rows {a.shape[0]}")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    def product(self) -> np.ndarray:
        return self.b @ self.a


@dataclass(frozen=True)
class DeltaPair:
    """Additive updates to both factors of a LoraPair."""

    delta_b: np.ndarray
    delta_a: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "delta_b", as_matrix(self.delta_b, "delta_b"))
        object.__setattr__(self, "delta_a", as_matrix(self.delta_a, "delta_a"))


@dataclass(frozen=True)
class ClientTask:
    """A client's private regression task: per-layer teacher weights plus batch sampling.

    The rng_seed drives batch sampling only and is fixed at construction;
    the harness builds a fresh task object per round with a derived seed.
    """

    client_id: int
    teachers: tuple[np.ndarray, ...]
    input_dim: int
    batch_size: int
    rng_seed: int

    def __post_init__(self):
        teachers = tuple(as_matrix(t, "teacher") for t in self.teachers)
        for t in teachers:
            if t.shape[1] != self.input_dim:
                raise ShapeError(
                    f"teacher cols {t.shape[1]} != input_dim {self.input_dim}"
                )
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        object.__setattr__(self, "teachers", teachers)


def init_lora(spec: LayerSpec, seed: int, scale: float = 1.0) -> LoraPair:
    """Zero left factor, Gaussian right factor with std scale/sqrt(rank).

    The 1/sqrt(rank) shape keeps the product's early growth
    rank-independent; scale shrinks the right factor toward the working
    scale of the trained product, which plain gradient descent needs to
    train both factors on comparable timescales.
    """
    rng = np.random.default_rng(seed)
    b = np.zeros((spec.d_out, spec.rank))
    a = rng.standard_normal((spec.rank, spec.d_in)) * (scale / np.sqrt(spec.rank))
    return LoraPair(b, a)


def effective_weight(spec: LayerSpec, pair: LoraPair) -> np.ndarray:
    """frozen_base + b @ a."""
    if pair.b.shape[0] != spec.d_out or pair.a.shape[1] != spec.d_in:
        raise ShapeError(
            f"pair shapes ({pair.b.shape}, {pair.a.shape}) do not fit "
            f"({spec.d_out}, {spec.d_in})"
        )
    return spec.frozen_base + pair.product()


def random_low_rank(d_out: int, d_in: int, rank: int, seed: int) -> np.ndarray:
    """Random matrix of rank min(rank, dims), normalized to unit Frobenius norm."""
    k = min(rank, d_out, d_in)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((d_out, k)) @ rng.standard_normal((k, d_in))
    return g / np.linalg.norm(g)


def make_teacher_shift(
    d_out: int,
    d_in: int,
    rank: int,
    shared_seed: int,
    client_seed: int,
    shared_weight: float = 0.5,
) -> np.ndarray:
    """Client target shift: unit-norm mix of a shared and a client-specific component.

    Both components are unit-norm random matrices of the adapter rank, so
    the mix has rank up to 2*rank. The shared part is the learnable
    consensus across clients; the client part is the conflicting signal.
    """
    shared = random_low_rank(d_out, d_in, rank, shared_seed)
    own = random_low_rank(d_out, d_in, rank, client_seed)
    g = np.sqrt(shared_weight) * shared + np.sqrt(1.0 - shared_weight) * own
    return g / np.linalg.norm(g)


def expected_loss(spec: LayerSpec, pair: LoraPair, task: ClientTask, layer: int = 0) -> float:
    """Expected per-sample training loss under standard Gaussian inputs.

    For x ~ N(0, I) the mean of ||(W_eff - W_teacher) x||^2 is the squared
    Frobenius norm of the weight gap, so no sampling is needed.
    """
    gap = effective_weight(spec, pair) - task.teachers[layer]
    return float(np.sum(gap * gap))


def local_train(
    spec: LayerSpec,
    pair: LoraPair,
    task: ClientTask,
    steps: int,
    lr: float,
    layer: int = 0,
    train_b: bool = True,
    train_a: bool = True,
) -> LoraPair:
    """Gradient descent on the factors against the task's teacher for one layer.

    Each step samples a fresh Gaussian input batch from the task's seeded
    generator and minimizes mean ||(base + b a) x - teacher x||^2 over the
    batch. The frozen base never changes. Deterministic given
    (pair, task.rng_seed, steps, lr).
    """
    if lr <= 0:
        raise InvalidInputError(f"lr must be > 0, got {lr}")
    if steps < 0:
        raise InvalidInputError(f"steps must be >= 0, got {steps}")
    if spec.d_in != task.input_dim:
        raise ShapeError(f"spec d_in {spec.d_in} != task input_dim {task.input_dim}")
    target = task.teachers[layer] - spec.frozen_base
    rng = np.random.default_rng(task.rng_seed)
    b = pair.b.copy()
    a = pair.a.copy()
    scale = 2.0 / task.batch_size
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(steps):
            x = rng.standard_normal((task.input_dim, task.batch_size))
            err = (b @ a - target) @ x
            loss = float(np.sum(err * err)) / task.batch_size
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"client {task.client_id} layer {layer}: non-finite loss"
                )
            grad_w = scale * (err @ x.T)
            grad_b = grad_w @ a.T
            grad_a = b.T @ grad_w
            if train_b:
                b = b - lr * grad_b
            if train_a:
                a = a - lr * grad_a
    if not (np.all(np.isfinite(b)) and np.all(np.isfinite(a))):
        raise DivergenceError(
            f"client {task.client_id} layer {layer}: non-finite parameters"
        )
    return LoraPair(b, a)


def compute_delta(new: LoraPair, old: LoraPair) -> DeltaPair:
    """Componentwise difference new - old of both factors."""
    if new.b.shape != old.b.shape or new.a.shape != old.a.shape:
        raise ShapeError("pairs have mismatched factor shapes")
    return DeltaPair(new.b - old.b, new.a - old.a)


def _densify_side(side, shape) -> np.ndarray:
    if side is None:
        return np.zeros(shape)
    if isinstance(side, SparseDelta):
        dense = side.to_dense()
    else:
        dense = as_matrix(side, "delta")
    if dense.shape != shape:
        raise ShapeError(f"delta shape {dense.shape} != factor shape {shape}")
    return dense


def apply_delta(pair: LoraPair, delta) -> LoraPair:
    """Add a DeltaPair, or a (b_side, a_side) tuple of SparseDelta/array/None, to a pair."""
    if isinstance(delta, DeltaPair):
        b_side, a_side = delta.delta_b, delta.delta_a
    else:
        b_side, a_side = delta
    return LoraPair(
        pair.b + _densify_side(b_side, pair.b.shape),
        pair.a + _densify_side(a_side, pair.a.shape),
    )


def full_rank_delta(delta: DeltaPair, b_new, a_old) -> np.ndarray:
    """Full-rank update delta_b @ a_old + b_new @ delta_a.

    Algebraically equal to b_new @ a_new - b_old @ a_old for the pre- and
    post-update factors, without forming either product's operands.
    """
    bn = as_matrix(b_new, "b_new")
    ao = as_matrix(a_old, "a_old")
    if delta.delta_b.shape != bn.shape or delta.delta_a.shape != ao.shape:
        raise ShapeError("delta shapes do not match the factor shapes")
    if bn.shape[1] != ao.shape[0]:
        raise ShapeError(f"b cols {bn.shape[1]} != a rows {ao.shape[0]}")
    return delta.delta_b @ ao + bn @ delta.delta_a
