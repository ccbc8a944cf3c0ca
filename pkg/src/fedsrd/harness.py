"""Round-loop orchestration for every strategy, metrics collection, CSV output.

One simulation = one strategy run on a shared synthetic cohort. Clients
never keep their local training results: every round they train from the
synchronized state (initial adapters plus all broadcasts so far), upload
their per-round factor deltas (sparsified per strategy), and adopt only
the server's broadcast. Transmission byte counts are the exact encoded
payload lengths, never estimates; downloads are counted once per client.

Reproducibility: every random stream is seeded from a stable
blake2b-based hash of (master_seed, purpose, client, round, ...), so a
config maps to a byte-identical metrics file on every run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Callable, Iterator, Sequence

import numpy as np

from .config import SimConfig
from .errors import EmptyCohortError, EmptyInputError, InvalidInputError
from .lora import (
    ClientTask,
    DeltaPair,
    LayerSpec,
    LoraPair,
    apply_delta,
    compute_delta,
    effective_weight,
    expected_loss,
    init_lora,
    local_train,
    make_teacher_shift,
)
from .server import (
    ClientMirror,
    ClientUpdate,
    GlobalDownload,
    LayerUpload,
    ProjectionMode,
    _norm_ratio,
    apply_download,
    initial_state,
    srd_round,
)
from .sparsify import (
    SparsityConfig,
    adaptive_ratio,
    dare_sparsify,
    importance_a,
    importance_b,
    magnitude_sparsify,
    prune_by_importance,
)
from .wire import SparseDelta, encode

#: sink callback signature: (direction, round, client, layer, side, payload)
PayloadSink = Callable[[str, int, int, int, str, bytes], None]


def derive_seed(master_seed: int, *parts) -> int:
    """Stable 63-bit seed from the master seed and any hashable tags."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master_seed)).encode())
    for part in parts:
        h.update(b"|")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little") % (2**63)


def build_layer_specs(config: SimConfig) -> tuple[LayerSpec, ...]:
    """Frozen base weights for every layer, seeded from the master seed."""
    specs = []
    for layer, (d_out, d_in) in enumerate(config.layers):
        rng = np.random.default_rng(derive_seed(config.master_seed, "base", layer))
        base = 0.1 * rng.standard_normal((d_out, d_in))
        specs.append(LayerSpec(d_out=d_out, d_in=d_in, rank=config.rank, frozen_base=base))
    return tuple(specs)


def make_client_task(
    config: SimConfig, specs: Sequence[LayerSpec], client_id: int
) -> ClientTask:
    """Client task with per-layer teachers = base + scaled low-rank shift."""
    teachers = tuple(
        spec.frozen_base
        + config.teacher_shift_scale
        * make_teacher_shift(
            spec.d_out,
            spec.d_in,
            spec.rank,
            shared_seed=derive_seed(config.master_seed, "teacher_shared", layer),
            client_seed=derive_seed(config.master_seed, "teacher", client_id, layer),
        )
        for layer, spec in enumerate(specs)
    )
    return ClientTask(
        client_id=client_id,
        teachers=teachers,
        input_dim=specs[0].d_in,
        batch_size=config.batch_size,
        rng_seed=derive_seed(config.master_seed, "train", client_id, 0),
    )


@dataclass(frozen=True)
class RoundMetrics:
    """One CSV row: losses, exact byte counts, realized sparsity, decomposition health.

    rho_b/rho_a are the realized per-layer dropped fractions of the
    uploads, averaged over clients (0.0 for sides a strategy never
    transmits). residuals/ratio_a/ratio_b/omitted_norm come from the
    alternating decomposition and are 0.0 for strategies without one;
    ratios are 0.0 whenever the previous factor is all-zero.
    """

    round_index: int
    client_losses: tuple[float, ...]
    eval_loss: float
    upload_bytes: int
    download_bytes: int
    cumulative_bytes: int
    rho_b: tuple[float, ...]
    rho_a: tuple[float, ...]
    residuals: tuple[float, ...]
    ratio_a: float
    ratio_b: float
    omitted_norm: float


def csv_header(num_clients: int, num_layers: int) -> list[str]:
    cols = ["round"]
    cols += [f"client_loss_{i}" for i in range(num_clients)]
    cols += ["eval_loss", "upload_bytes", "download_bytes", "cumulative_bytes"]
    cols += [f"rho_b_{layer}" for layer in range(num_layers)]
    cols += [f"rho_a_{layer}" for layer in range(num_layers)]
    cols += [f"resid_{layer}" for layer in range(num_layers)]
    cols += ["ratio_a", "ratio_b", "omitted_norm"]
    return cols


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def format_row(m: RoundMetrics) -> list[str]:
    row = [str(m.round_index)]
    row += [_fmt(loss) for loss in m.client_losses]
    row += [
        _fmt(m.eval_loss),
        str(m.upload_bytes),
        str(m.download_bytes),
        str(m.cumulative_bytes),
    ]
    row += [_fmt(r) for r in m.rho_b]
    row += [_fmt(r) for r in m.rho_a]
    row += [_fmt(r) for r in m.residuals]
    row += [_fmt(m.ratio_a), _fmt(m.ratio_b), _fmt(m.omitted_norm)]
    return row


class _MetricsWriter:
    """Incremental CSV writer; every row is flushed so aborts keep partial output."""

    def __init__(self, path, num_clients: int, num_layers: int):
        self._fh = open(path, "w", encoding="utf-8", newline="\n")
        self._fh.write(",".join(csv_header(num_clients, num_layers)) + "\n")
        self._fh.flush()

    def write(self, row: RoundMetrics) -> None:
        self._fh.write(",".join(format_row(row)) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def emit_metrics(metrics: Sequence[RoundMetrics], path) -> None:
    """Write a complete metrics CSV (fixed column order, 9 significant digits)."""
    if not metrics:
        raise EmptyInputError("no metrics rows to emit")
    writer = _MetricsWriter(path, len(metrics[0].client_losses), len(metrics[0].rho_b))
    try:
        for row in metrics:
            writer.write(row)
    finally:
        writer.close()


def encode_transmission(sd: SparseDelta, rle_mode: str) -> bytes:
    """Encode a payload the way the harness transmits it: dense iff every position is kept."""
    use_rle = {"off": False, "on": True, "auto": "auto"}[rle_mode]
    return encode(sd, use_rle=use_rle, dense=sd.nnz == sd.size)


def fedavg_round(pairs: Sequence[LoraPair]) -> LoraPair:
    """Average the factors separately (the baseline aggregation rule)."""
    if not pairs:
        raise EmptyCohortError("no client pairs to average")
    b = np.mean([p.b for p in pairs], axis=0)
    a = np.mean([p.a for p in pairs], axis=0)
    return LoraPair(b, a)


def ffa_round(pairs: Sequence[LoraPair]) -> LoraPair:
    """Average only the left factors; the right factors must be identical (frozen)."""
    if not pairs:
        raise EmptyCohortError("no client pairs to average")
    a0 = pairs[0].a
    for p in pairs[1:]:
        if not np.array_equal(p.a, a0):
            raise InvalidInputError("frozen right factors differ across clients")
    return LoraPair(np.mean([p.b for p in pairs], axis=0), a0)


def _build_upload(
    config: SimConfig,
    sparsity: SparsityConfig,
    delta: DeltaPair,
    trained: LoraPair,
    current: LoraPair,
    client_id: int,
    round_index: int,
    layer: int,
) -> LayerUpload:
    strategy = config.strategy
    if strategy == "ffa":
        return LayerUpload(SparseDelta.full(delta.delta_b), None)
    if not config.sparsify_uploads or strategy == "fedavg":
        return LayerUpload(
            SparseDelta.full(delta.delta_b), SparseDelta.full(delta.delta_a)
        )
    if strategy in ("fedsrd", "fedsrd-e", "fedavg+importance"):
        scores_b = importance_b(delta.delta_b, current.a)
        sb = prune_by_importance(delta.delta_b, scores_b, adaptive_ratio(scores_b, sparsity))
        scores_a = importance_a(delta.delta_a, trained.b)
        sa = prune_by_importance(delta.delta_a, scores_a, adaptive_ratio(scores_a, sparsity))
        return LayerUpload(sb, sa)
    if strategy == "fedavg+dare":
        seed_b = derive_seed(config.master_seed, "dare_up", client_id, round_index, layer, "b")
        seed_a = derive_seed(config.master_seed, "dare_up", client_id, round_index, layer, "a")
        return LayerUpload(
            dare_sparsify(delta.delta_b, config.alpha, seed_b),
            dare_sparsify(delta.delta_a, config.alpha, seed_a),
        )
    if strategy == "fedavg+magnitude":
        return LayerUpload(
            magnitude_sparsify(delta.delta_b, config.alpha),
            magnitude_sparsify(delta.delta_a, config.alpha),
        )
    raise InvalidInputError(f"unknown strategy {strategy!r}")


def _realized_rho(uploads: Sequence[ClientUpdate], num_layers: int) -> tuple[list[float], list[float]]:
    rho_b = []
    rho_a = []
    for layer in range(num_layers):
        drops_b = []
        drops_a = []
        for update in uploads:
            lu = update.layers[layer]
            if lu.delta_b is not None:
                drops_b.append(1.0 - lu.delta_b.nnz / lu.delta_b.size)
            if lu.delta_a is not None:
                drops_a.append(1.0 - lu.delta_a.nnz / lu.delta_a.size)
        rho_b.append(float(np.mean(drops_b)) if drops_b else 0.0)
        rho_a.append(float(np.mean(drops_a)) if drops_a else 0.0)
    return rho_b, rho_a


def _eval_loss(
    specs: Sequence[LayerSpec],
    global_pairs: Sequence[LoraPair],
    tasks: Sequence[ClientTask],
) -> float:
    """Mean squared elementwise gap between the global effective weights and all teachers."""
    total = 0.0
    for task in tasks:
        for layer, spec in enumerate(specs):
            gap = effective_weight(spec, global_pairs[layer]) - task.teachers[layer]
            total += float(np.mean(gap * gap))
    return total / (len(tasks) * len(specs))


def _send_uploads(
    uploads: Sequence[ClientUpdate],
    round_index: int,
    rle_mode: str,
    sink: PayloadSink | None,
) -> int:
    total = 0
    for client_id, update in enumerate(uploads):
        for layer, lu in enumerate(update.layers):
            for side, sd in (("b", lu.delta_b), ("a", lu.delta_a)):
                if sd is None:
                    continue
                blob = encode_transmission(sd, rle_mode)
                total += len(blob)
                if sink is not None:
                    sink("upload", round_index, client_id, layer, side, blob)
    return total


def _send_download(
    download: GlobalDownload,
    num_clients: int,
    round_index: int,
    rle_mode: str,
    sink: PayloadSink | None,
) -> int:
    blobs = []
    for layer in range(len(download.b_deltas or download.a_deltas)):
        for side, sd in zip(("b", "a"), download.layer_sides(layer)):
            if sd is None:
                continue
            blobs.append((layer, side, encode_transmission(sd, rle_mode)))
    per_client = sum(len(blob) for _, _, blob in blobs)
    if sink is not None:
        for client_id in range(num_clients):
            for layer, side, blob in blobs:
                sink("download", round_index, client_id, layer, side, blob)
    return per_client * num_clients


def _train_round(
    config: SimConfig,
    specs: Sequence[LayerSpec],
    tasks: Sequence[ClientTask],
    start_pairs: Sequence[Sequence[LoraPair]],
    round_index: int,
) -> tuple[list[list[LoraPair]], list[float]]:
    """Local training for every client and layer; returns trained pairs and losses."""
    train_a = config.strategy != "ffa"
    trained: list[list[LoraPair]] = []
    losses: list[float] = []
    for client_id, task in enumerate(tasks):
        round_task = replace(
            task,
            rng_seed=derive_seed(config.master_seed, "train", client_id, round_index),
        )
        rows = []
        layer_losses = []
        for layer, spec in enumerate(specs):
            pair = local_train(
                spec,
                start_pairs[client_id][layer],
                round_task,
                config.local_steps,
                config.lr,
                layer=layer,
                train_a=train_a,
            )
            rows.append(pair)
            layer_losses.append(expected_loss(spec, pair, round_task, layer))
        trained.append(rows)
        losses.append(float(np.mean(layer_losses)))
    return trained, losses


def _run_srd(
    config: SimConfig,
    specs: Sequence[LayerSpec],
    tasks: Sequence[ClientTask],
    init_pairs: tuple[LoraPair, ...],
    sink: PayloadSink | None,
) -> Iterator[RoundMetrics]:
    sparsity = config.sparsity
    mode = ProjectionMode.FULL if config.strategy == "fedsrd" else ProjectionMode.EFFICIENT
    state = initial_state(init_pairs, mode)
    mirrors = [ClientMirror(pairs=init_pairs) for _ in range(config.num_clients)]
    client_pairs = [list(init_pairs) for _ in range(config.num_clients)]
    cumulative = 0
    for t in range(1, config.num_rounds + 1):
        trained, client_losses = _train_round(config, specs, tasks, client_pairs, t)
        uploads = []
        for client_id in range(config.num_clients):
            layer_uploads = tuple(
                _build_upload(
                    config,
                    sparsity,
                    compute_delta(trained[client_id][layer], client_pairs[client_id][layer]),
                    trained[client_id][layer],
                    client_pairs[client_id][layer],
                    client_id,
                    t,
                    layer,
                )
                for layer in range(len(specs))
            )
            uploads.append(ClientUpdate(layers=layer_uploads))
        upload_bytes = _send_uploads(uploads, t, config.rle_mode, sink)

        download, state, diag = srd_round(
            state,
            mirrors,
            uploads,
            config.download_sparsity,
            derive_seed(config.master_seed, "dare_down", t),
            tol=config.decompose_tol,
            max_step_ratio=config.max_step_ratio or None,
        )
        download_bytes = _send_download(
            download, config.num_clients, t, config.rle_mode, sink
        )
        mirrors = [apply_download(m, download) for m in mirrors]
        client_pairs = [
            [
                apply_delta(pair, download.layer_sides(layer))
                for layer, pair in enumerate(rows)
            ]
            for rows in client_pairs
        ]

        cumulative += upload_bytes + download_bytes
        rho_b, rho_a = _realized_rho(uploads, len(specs))
        yield RoundMetrics(
            round_index=t,
            client_losses=tuple(client_losses),
            eval_loss=_eval_loss(specs, state.pairs, tasks),
            upload_bytes=upload_bytes,
            download_bytes=download_bytes,
            cumulative_bytes=cumulative,
            rho_b=tuple(rho_b),
            rho_a=tuple(rho_a),
            residuals=diag.residuals,
            ratio_a=diag.ratio_a,
            ratio_b=diag.ratio_b,
            omitted_norm=diag.omitted_norm,
        )


def _run_avg(
    config: SimConfig,
    specs: Sequence[LayerSpec],
    tasks: Sequence[ClientTask],
    init_pairs: tuple[LoraPair, ...],
    sink: PayloadSink | None,
) -> Iterator[RoundMetrics]:
    sparsity = config.sparsity
    global_pairs = list(init_pairs)
    cumulative = 0
    for t in range(1, config.num_rounds + 1):
        start_pairs = [global_pairs for _ in range(config.num_clients)]
        trained, client_losses = _train_round(config, specs, tasks, start_pairs, t)
        uploads = []
        for client_id in range(config.num_clients):
            layer_uploads = tuple(
                _build_upload(
                    config,
                    sparsity,
                    compute_delta(trained[client_id][layer], global_pairs[layer]),
                    trained[client_id][layer],
                    global_pairs[layer],
                    client_id,
                    t,
                    layer,
                )
                for layer in range(len(specs))
            )
            uploads.append(ClientUpdate(layers=layer_uploads))
        upload_bytes = _send_uploads(uploads, t, config.rle_mode, sink)

        new_pairs = []
        for layer in range(len(specs)):
            reconstructed = [
                apply_delta(
                    global_pairs[layer],
                    (u.layers[layer].delta_b, u.layers[layer].delta_a),
                )
                for u in uploads
            ]
            if config.strategy == "ffa":
                new_pairs.append(ffa_round(reconstructed))
            else:
                new_pairs.append(fedavg_round(reconstructed))

        b_deltas = tuple(
            SparseDelta.from_dense(d, d != 0)
            for d in (new.b - old.b for new, old in zip(new_pairs, global_pairs))
        )
        if config.strategy == "ffa":
            download = GlobalDownload(b_deltas=b_deltas, a_deltas=None)
        else:
            a_deltas = tuple(
                SparseDelta.from_dense(d, d != 0)
                for d in (new.a - old.a for new, old in zip(new_pairs, global_pairs))
            )
            download = GlobalDownload(b_deltas=b_deltas, a_deltas=a_deltas)
        download_bytes = _send_download(
            download, config.num_clients, t, config.rle_mode, sink
        )

        ratio_a = _norm_ratio(
            [new.a - old.a for new, old in zip(new_pairs, global_pairs)],
            [old.a for old in global_pairs],
        )
        ratio_b = _norm_ratio(
            [new.b - old.b for new, old in zip(new_pairs, global_pairs)],
            [old.b for old in global_pairs],
        )
        global_pairs = new_pairs

        cumulative += upload_bytes + download_bytes
        rho_b, rho_a = _realized_rho(uploads, len(specs))
        yield RoundMetrics(
            round_index=t,
            client_losses=tuple(client_losses),
            eval_loss=_eval_loss(specs, global_pairs, tasks),
            upload_bytes=upload_bytes,
            download_bytes=download_bytes,
            cumulative_bytes=cumulative,
            rho_b=tuple(rho_b),
            rho_a=tuple(rho_a),
            residuals=tuple(0.0 for _ in specs),
            ratio_a=ratio_a,
            ratio_b=ratio_b,
            omitted_norm=0.0,
        )


def run_simulation(
    config: SimConfig, payload_sink: PayloadSink | None = None
) -> list[RoundMetrics]:
    """Run the configured strategy for num_rounds rounds.

    Returns one RoundMetrics per round and, when config.output_path is
    set, streams the CSV row by row (partial output survives an abort).
    payload_sink, if given, receives every transmitted payload exactly as
    counted in the byte metrics.
    """
    specs = build_layer_specs(config)
    tasks = tuple(
        make_client_task(config, specs, client_id)
        for client_id in range(config.num_clients)
    )
    init_pairs = tuple(
        init_lora(spec, derive_seed(config.master_seed, "init", layer), config.init_scale)
        for layer, spec in enumerate(specs)
    )
    if config.strategy in ("fedsrd", "fedsrd-e"):
        rounds = _run_srd(config, specs, tasks, init_pairs, payload_sink)
    else:
        rounds = _run_avg(config, specs, tasks, init_pairs, payload_sink)

    writer = (
        _MetricsWriter(config.output_path, config.num_clients, config.num_layers)
        if config.output_path
        else None
    )
    metrics: list[RoundMetrics] = []
    try:
        for row in rounds:
            metrics.append(row)
            if writer is not None:
                writer.write(row)
    finally:
        if writer is not None:
            writer.close()
    return metrics
