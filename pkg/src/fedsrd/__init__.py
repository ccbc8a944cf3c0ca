"""Desk-scale simulator and library for sparsified federated LoRA fine-tuning.

Clients prune low-rank adapter updates by structural importance, the
server reconstructs and averages them in full-rank space, then projects
and decomposes the global movement into a single sparse factor delta for
broadcast. The package verifies the update algebra, the wire-cost model,
and the end-to-end communication/quality trade-off on synthetic
heterogeneous regression tasks.
"""

from .config import STRATEGIES, SimConfig, load_config, parse_config
from .errors import (
    ConfigError,
    CorruptPayloadError,
    DivergenceError,
    EmptyCohortError,
    EmptyInputError,
    FormatError,
    InvalidInputError,
    InvalidRankError,
    ShapeError,
    TruncatedPayloadError,
    WireError,
)
from .harness import (
    RoundMetrics,
    derive_seed,
    emit_metrics,
    fedavg_round,
    ffa_round,
    run_simulation,
)
from .linalg import (
    SvdFactors,
    col_norms,
    kurtosis,
    pseudoinverse,
    quantile_threshold,
    rank_r_approx,
    row_norms,
    svd_full,
)
from .lora import (
    ClientTask,
    DeltaPair,
    LayerSpec,
    LoraPair,
    apply_delta,
    compute_delta,
    effective_weight,
    expected_loss,
    full_rank_delta,
    init_lora,
    local_train,
)
from .server import (
    ClientMirror,
    ClientUpdate,
    GlobalDownload,
    GlobalState,
    LayerUpload,
    ProjectionMode,
    absorb_upload,
    decompose_even,
    decompose_odd,
    project_global,
    reconstruct_aggregate,
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
from .wire import ByteAccount, SparseDelta, account, bytes_to_mb, decode, encode

__version__ = "0.1.0"
