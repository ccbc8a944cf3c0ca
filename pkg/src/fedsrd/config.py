"""Simulation configuration and the plain key=value config file format.

Config files are flat text: one ``key = value`` per line, ``#`` starts a
comment, keys match SimConfig field names, unknown keys are rejected.
Layers are written as comma-separated ``OUTxIN`` shapes, e.g.::

    layers = 64x64, 64x64, 64x64, 64x64
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .sparsify import SparsityConfig

STRATEGIES = (
    "fedsrd",
    "fedsrd-e",
    "fedavg",
    "fedavg+importance",
    "fedavg+dare",
    "fedavg+magnitude",
    "ffa",
)

RLE_MODES = ("off", "on", "auto")


@dataclass(frozen=True)
class SimConfig:
    """Everything a simulation run depends on.

    ``alpha`` is the strategy's base sparsity ratio: the adaptive-ratio
    baseline for importance pruning, the drop probability for
    fedavg+dare, and the magnitude-pruning quantile for
    fedavg+magnitude. ``sparsify_uploads=False`` sends every upload
    dense regardless of strategy (download sparsification still
    applies), which is how the dense reference pipelines are run.

    ``init_scale`` shrinks the Gaussian right-factor init toward the
    trained product's working scale so plain gradient descent trains
    both factors on comparable timescales. ``decompose_tol`` and
    ``max_step_ratio`` condition the server's alternating solves: the
    relative pseudoinverse cutoff and a trust region on the committed
    factor delta (0 disables). Without them the young low-norm left
    factor lets the least-squares solve inflate the right factor beyond
    what fixed-rate local training can absorb.
    """

    num_clients: int = 4
    num_rounds: int = 30
    layers: tuple[tuple[int, int], ...] = ((64, 64), (64, 64), (64, 64), (64, 64))
    rank: int = 8
    strategy: str = "fedsrd"
    alpha: float = 0.9
    kurtosis_coeff: float = 0.1
    ratio_upper_bound: float = 0.92
    ratio_lower_bound: float = 0.0
    download_sparsity: float = 0.8
    local_steps: int = 150
    lr: float = 0.03
    batch_size: int = 32
    master_seed: int = 7
    teacher_shift_scale: float = 1.0
    init_scale: float = 0.0625
    decompose_tol: float = 0.3
    max_step_ratio: float = 0.1
    sparsify_uploads: bool = True
    rle_mode: str = "off"
    output_path: str | None = None

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.num_rounds < 1:
            raise ConfigError("num_rounds must be >= 1")
        if not self.layers:
            raise ConfigError("at least one layer is required")
        for d_out, d_in in self.layers:
            if self.rank > min(d_out, d_in):
                raise ConfigError(
                    f"rank {self.rank} exceeds min dim of layer {d_out}x{d_in}"
                )
        if len({d_in for _, d_in in self.layers}) != 1:
            raise ConfigError("all layers must share the same input dimension")
        if self.strategy not in STRATEGIES:
            raise ConfigError(
                f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}"
            )
        if not 0.0 <= self.download_sparsity < 1.0:
            raise ConfigError("download_sparsity must be in [0, 1)")
        if self.local_steps < 0:
            raise ConfigError("local_steps must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.rle_mode not in RLE_MODES:
            raise ConfigError(f"rle_mode must be one of {RLE_MODES}")
        if self.init_scale <= 0:
            raise ConfigError("init_scale must be > 0")
        if self.decompose_tol < 0:
            raise ConfigError("decompose_tol must be >= 0")
        if self.max_step_ratio < 0:
            raise ConfigError("max_step_ratio must be >= 0 (0 disables the trust region)")
        try:
            self.sparsity  # validates the ratio fields
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def sparsity(self) -> SparsityConfig:
        return SparsityConfig(
            alpha=self.alpha,
            kurtosis_coeff=self.kurtosis_coeff,
            ratio_upper_bound=self.ratio_upper_bound,
            ratio_lower_bound=self.ratio_lower_bound,
        )

    @property
    def num_layers(self) -> int:
        return len(self.layers)


def _parse_layers(raw: str) -> tuple[tuple[int, int], ...]:
    shapes = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        pieces = part.lower().split("x")
        if len(pieces) != 2:
            raise ConfigError(f"layer shape {part!r} is not OUTxIN")
        try:
            shapes.append((int(pieces[0]), int(pieces[1])))
        except ValueError as exc:
            raise ConfigError(f"layer shape {part!r} is not OUTxIN") from exc
    if not shapes:
        raise ConfigError("layers value is empty")
    return tuple(shapes)


def _parse_bool(raw: str, key: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ConfigError(f"{key} must be a boolean, got {raw!r}")


_FIELD_TYPES = {f.name: f.type for f in fields(SimConfig)}


def _convert(key: str, raw: str):
    if key == "layers":
        return _parse_layers(raw)
    if key == "strategy":
        return raw.lower()
    if key == "rle_mode":
        return raw.lower()
    if key == "output_path":
        return raw
    ftype = _FIELD_TYPES[key]
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "bool":
            return _parse_bool(raw, key)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    raise ConfigError(f"unsupported config key {key!r}")


def parse_config(text: str) -> SimConfig:
    """Parse config-file text into a SimConfig, rejecting unknown keys."""
    overrides: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (piece.strip() for piece in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        overrides[key] = _convert(key, raw)
    return SimConfig(**overrides)


def load_config(path) -> SimConfig:
    """Read and parse a config file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
