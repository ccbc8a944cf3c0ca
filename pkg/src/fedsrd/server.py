"""Server side of the protocol: mirrors, full-rank aggregation, alternating decomposition.

Each round the server reconstructs every client's post-training factors
from their sparse uploads, averages the full-rank products (never the
factors), optionally projects the average back to the adapter rank via
truncated SVD, and converts the resulting global movement into an update
of a single factor: odd rounds solve for the left factor against the
pseudoinverse of the right one, even rounds the reverse. Only that one
factor's delta is sparsified and broadcast, so the download is half the
width of a full adapter and the cycle stays symmetric with the sparse
uplink.

The "efficient" mode skips the SVD projection and measures global
movement against the raw aggregated matrix instead of the low-rank
reference product.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyCohortError, ShapeError
from .linalg import DEFAULT_PINV_TOL, as_matrix, pseudoinverse, rank_r_approx
from .lora import LoraPair, apply_delta
from .sparsify import dare_sparsify
from .wire import SparseDelta


class ProjectionMode(enum.Enum):
    """Whether the aggregated matrix is SVD-projected before decomposition."""

    FULL = "full"
    EFFICIENT = "efficient"


@dataclass(frozen=True)
class LayerUpload:
    """One layer's uploaded sparse factor deltas; either side may be absent."""

    delta_b: SparseDelta | None
    delta_a: SparseDelta | None


@dataclass(frozen=True)
class ClientUpdate:
    """Per-layer sparse uploads from one client."""

    layers: tuple[LayerUpload, ...]


@dataclass(frozen=True)
class GlobalDownload:
    """Per-layer sparse broadcast deltas; alternating rounds set exactly one side."""

    b_deltas: tuple[SparseDelta, ...] | None
    a_deltas: tuple[SparseDelta, ...] | None

    @property
    def side(self) -> str:
        if self.b_deltas is not None and self.a_deltas is not None:
            return "both"
        return "b" if self.b_deltas is not None else "a"

    def layer_sides(self, layer: int) -> tuple[SparseDelta | None, SparseDelta | None]:
        b = self.b_deltas[layer] if self.b_deltas is not None else None
        a = self.a_deltas[layer] if self.a_deltas is not None else None
        return b, a


@dataclass(frozen=True)
class ClientMirror:
    """Server-held copy of one client's factor pairs, one per layer."""

    pairs: tuple[LoraPair, ...]


@dataclass(frozen=True)
class GlobalState:
    """Server state: global pairs, per-layer reference matrices, round counter, mode.

    refs hold the matrix the next round's movement is measured against:
    the global pair product in FULL mode, the raw aggregated matrix in
    EFFICIENT mode. Both start as the (zero) initial pair product.
    """

    pairs: tuple[LoraPair, ...]
    refs: tuple[np.ndarray, ...]
    round_index: int
    mode: ProjectionMode


@dataclass(frozen=True)
class RoundDiagnostics:
    """Per-round decomposition health metrics.

    residuals: per-layer Frobenius norm of the committed solve's residual.
    ratio_a / ratio_b: stacked-norm ratios of the candidate factor deltas
    (both directions are solved every round for diagnostics) to the
    previous global factors; 0.0 when the previous factor is zero.
    omitted_norm: stacked Frobenius norm of the products of the two
    candidate deltas, the term a joint first-order solve would drop.
    """

    residuals: tuple[float, ...]
    ratio_a: float
    ratio_b: float
    omitted_norm: float


def initial_state(pairs: Sequence[LoraPair], mode: ProjectionMode) -> GlobalState:
    """Round-zero state; reference matrices start at the initial pair products."""
    pairs = tuple(pairs)
    return GlobalState(
        pairs=pairs,
        refs=tuple(p.product() for p in pairs),
        round_index=0,
        mode=mode,
    )


def absorb_upload(mirror: ClientMirror, upload: ClientUpdate) -> ClientMirror:
    """Mirror pairs plus the uploaded sparse deltas (the client's transmitted state)."""
    if len(upload.layers) != len(mirror.pairs):
        raise ShapeError(
            f"upload has {len(upload.layers)} layers, mirror {len(mirror.pairs)}"
        )
    return ClientMirror(
        pairs=tuple(
            apply_delta(pair, (layer.delta_b, layer.delta_a))
            for pair, layer in zip(mirror.pairs, upload.layers)
        )
    )


def reconstruct_aggregate(mirrors: Sequence[ClientMirror]) -> list[np.ndarray]:
    """Uniform average of the clients' full-rank products, one matrix per layer."""
    if not mirrors:
        raise EmptyCohortError("no clients to aggregate")
    num_layers = len(mirrors[0].pairs)
    aggregated = []
    for layer in range(num_layers):
        products = [m.pairs[layer].product() for m in mirrors]
        aggregated.append(sum(products) / len(products))
    return aggregated


def project_global(w, rank: int, mode: ProjectionMode) -> np.ndarray:
    """Rank-r SVD truncation in FULL mode; identity in EFFICIENT mode."""
    matrix = as_matrix(w)
    if mode is ProjectionMode.EFFICIENT:
        return matrix
    return rank_r_approx(matrix, rank)


def decompose_even(w_diff, b_prev, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Right-factor delta: pinv(b_prev) @ w_diff, the least-squares solve for delta_a."""
    wd = as_matrix(w_diff, "w_diff")
    bp = as_matrix(b_prev, "b_prev")
    if bp.shape[0] != wd.shape[0]:
        raise ShapeError(f"b_prev rows {bp.shape[0]} != w_diff rows {wd.shape[0]}")
    return pseudoinverse(bp, tol) @ wd


def decompose_odd(w_diff, a_prev, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Left-factor delta: w_diff @ pinv(a_prev), the least-squares solve for delta_b."""
    wd = as_matrix(w_diff, "w_diff")
    ap = as_matrix(a_prev, "a_prev")
    if ap.shape[1] != wd.shape[1]:
        raise ShapeError(f"a_prev cols {ap.shape[1]} != w_diff cols {wd.shape[1]}")
    return wd @ pseudoinverse(ap, tol)


def _trust_region(delta: np.ndarray, prev: np.ndarray, max_step_ratio: float | None) -> np.ndarray:
    if max_step_ratio is None:
        return delta
    prev_norm = float(np.linalg.norm(prev))
    delta_norm = float(np.linalg.norm(delta))
    if prev_norm == 0.0 or delta_norm <= max_step_ratio * prev_norm:
        return delta
    return delta * (max_step_ratio * prev_norm / delta_norm)


def _stacked_norm(mats: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(m * m)) for m in mats)))


def _norm_ratio(numerators: Sequence[np.ndarray], denominators: Sequence[np.ndarray]) -> float:
    denom = _stacked_norm(denominators)
    if denom == 0.0:
        return 0.0
    return _stacked_norm(numerators) / denom


def srd_round(
    state: GlobalState,
    mirrors: Sequence[ClientMirror],
    uploads: Sequence[ClientUpdate],
    download_sparsity: float,
    seed: int,
    tol: float = DEFAULT_PINV_TOL,
    max_step_ratio: float | None = None,
) -> tuple[GlobalDownload, GlobalState, RoundDiagnostics]:
    """Run one server round: aggregate uploads, decompose, and build the broadcast.

    Mirrors are read-only here; the caller applies the returned download
    to its persistent mirrors and client states. The new global pairs add
    the unsparsified factor delta; the broadcast carries its
    randomly-sparsified (drop and rescale) form.

    max_step_ratio, when set, is a trust region on the committed factor
    delta: the solve is rescaled so ||delta||_F <= max_step_ratio *
    ||prev factor||_F (never applied while the previous factor is still
    zero, so the first left-factor build-up is unconstrained). The
    unexpressed movement stays in the next round's w_diff because the
    reference product tracks only what was committed. Without it, a young
    low-norm factor makes the pseudoinverse solve arbitrarily large,
    which desk-scale fixed-rate local training cannot absorb.
    """
    if len(mirrors) != len(uploads):
        raise ShapeError(f"{len(mirrors)} mirrors vs {len(uploads)} uploads")
    t = state.round_index + 1
    absorbed = [absorb_upload(m, u) for m, u in zip(mirrors, uploads)]
    aggregated = reconstruct_aggregate(absorbed)

    new_pairs = []
    new_refs = []
    committed = []
    residuals = []
    cand_b_deltas = []
    cand_a_deltas = []
    omitted = []
    for layer, pair in enumerate(state.pairs):
        w_agg = aggregated[layer]
        w_proj = project_global(w_agg, pair.rank, state.mode)
        w_diff = w_proj - state.refs[layer]
        cand_db = decompose_odd(w_diff, pair.a, tol)
        cand_da = decompose_even(w_diff, pair.b, tol)
        cand_b_deltas.append(cand_db)
        cand_a_deltas.append(cand_da)
        omitted.append(cand_db @ cand_da)
        if t % 2 == 1:
            delta_b = _trust_region(cand_db, pair.b, max_step_ratio)
            delta_a = np.zeros_like(pair.a)
            residual = w_diff - delta_b @ pair.a
        else:
            delta_b = np.zeros_like(pair.b)
            delta_a = _trust_region(cand_da, pair.a, max_step_ratio)
            residual = w_diff - pair.b @ delta_a
        residuals.append(float(np.linalg.norm(residual)))
        new_pair = LoraPair(pair.b + delta_b, pair.a + delta_a)
        new_pairs.append(new_pair)
        new_refs.append(
            w_agg if state.mode is ProjectionMode.EFFICIENT else new_pair.product()
        )
        committed.append(delta_b if t % 2 == 1 else delta_a)

    sparse = tuple(
        dare_sparsify(delta, download_sparsity, _layer_seed(seed, layer))
        for layer, delta in enumerate(committed)
    )
    if t % 2 == 1:
        download = GlobalDownload(b_deltas=sparse, a_deltas=None)
    else:
        download = GlobalDownload(b_deltas=None, a_deltas=sparse)

    diagnostics = RoundDiagnostics(
        residuals=tuple(residuals),
        ratio_a=_norm_ratio(cand_a_deltas, [p.a for p in state.pairs]),
        ratio_b=_norm_ratio(cand_b_deltas, [p.b for p in state.pairs]),
        omitted_norm=_stacked_norm(omitted),
    )
    new_state = GlobalState(
        pairs=tuple(new_pairs),
        refs=tuple(new_refs),
        round_index=t,
        mode=state.mode,
    )
    return download, new_state, diagnostics


def _layer_seed(seed: int, layer: int) -> int:
    # keep per-layer drop masks independent without another hash dependency
    return (seed * 1000003 + layer) % (2**63)


def apply_download(mirror: ClientMirror, download: GlobalDownload) -> ClientMirror:
    """Apply a broadcast to a mirror (identical to what every client applies)."""
    return ClientMirror(
        pairs=tuple(
            apply_delta(pair, download.layer_sides(layer))
            for layer, pair in enumerate(mirror.pairs)
        )
    )
