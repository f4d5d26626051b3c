"""Run configuration: flat key=value files, defaults, validation.

Every key is documented in the README; CLI flags override file values.
Unknown keys and out-of-range values raise ConfigError (CLI exit 2).
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ConfigError
from .corpus import VIEWS

USER_MODELS = ("preference-threshold", "always-accept-top1")
ACTIVATIONS = ("rectifier", "identity", "tanh")
TASKS = ("both", "rec", "conv")


@dataclass(frozen=True)
class RunConfig:
    # data paths
    sessions: str = ""
    dbpedia_triples: str = ""
    dbpedia_nodes: str = ""
    conceptnet_triples: str = ""
    conceptnet_nodes: str = ""
    reviews: str = ""
    lexicon_pos: str = ""
    lexicon_neg: str = ""
    latents: str = ""
    # graph construction
    khop: int = 2
    threads: int = 1
    # model
    dim: int = 128
    layers_hyper: int = 1
    layers_line: int = 1
    activation: str = "rectifier"
    heads: int = 4
    ffn_hidden: int = 0  # 0 -> 2 * dim
    tau: float = 0.07
    alpha: float = 0.1
    beta: float = 0.1
    gamma: float = 0.5
    trunc_len: int = 32
    context_window: int = 1
    cl_level_mean: bool = False
    symmetrize: bool = True
    # views
    active_views: tuple = VIEWS
    drop_hyper: tuple = ()
    drop_line: tuple = ()
    # training
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    tasks: str = "both"
    seed: int | None = None
    # evaluation / loop
    k_list: tuple = (5, 10, 15, 20)
    turns: int = 10
    user_model: str = "preference-threshold"
    accept_threshold: float = 0.0

    @property
    def hyper_views(self) -> tuple:
        return tuple(v for v in self.active_views if v not in self.drop_hyper)

    @property
    def line_views(self) -> tuple:
        return tuple(v for v in self.active_views if v not in self.drop_line)

    @property
    def ffn_dim(self) -> int:
        return self.ffn_hidden if self.ffn_hidden > 0 else 2 * self.dim

    def validate(self, require_seed: bool = False) -> "RunConfig":
        if require_seed and self.seed is None:
            raise ConfigError("seed is required for this command")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.khop < 0:
            raise ConfigError("khop must be >= 0")
        if self.dim < 1 or self.dim % self.heads != 0:
            raise ConfigError(
                f"dim ({self.dim}) must be positive and divisible by heads ({self.heads})"
            )
        if self.layers_hyper < 1 or self.layers_line < 1:
            raise ConfigError("layer counts must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (in-batch negatives)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.trunc_len < 1:
            raise ConfigError("trunc_len must be >= 1")
        if self.context_window < 1:
            raise ConfigError("context_window must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.turns < 1:
            raise ConfigError("turns must be >= 1")
        if self.user_model not in USER_MODELS:
            raise ConfigError(f"user_model must be one of {USER_MODELS}")
        if self.tasks not in TASKS:
            raise ConfigError(f"tasks must be one of {TASKS}")
        for v in self.active_views + self.drop_hyper + self.drop_line:
            if v not in VIEWS:
                raise ConfigError(f"unknown view {v!r}")
        for v in self.drop_hyper + self.drop_line:
            if v not in self.active_views:
                raise ConfigError(f"cannot drop inactive view {v!r}")
        if not self.k_list or any(k < 1 for k in self.k_list):
            raise ConfigError("k_list must contain positive integers")
        if len(self.hyper_views) < 2 or len(self.line_views) < 2:
            raise ConfigError("each level needs >= 2 active views for the contrastive loss")
        return self


_BOOL_KEYS = {"cl_level_mean", "symmetrize"}
_TUPLE_INT_KEYS = {"k_list"}
_TUPLE_STR_KEYS = {"active_views", "drop_hyper", "drop_line"}


def _parse_value(key: str, raw: str):
    field_types = {f.name: f.type for f in fields(RunConfig)}
    if key not in field_types:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    if key in _BOOL_KEYS:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if key in _TUPLE_INT_KEYS:
        try:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}") from None
    if key in _TUPLE_STR_KEYS:
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    if key == "seed":
        return int(raw)
    default = getattr(RunConfig(), key)
    if isinstance(default, bool):  # unreachable, bools handled above
        return raw
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def load_config(path) -> RunConfig:
    """Parse a flat key=value file; '#' starts a comment line."""
    overrides = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, raw = line.partition("=")
                overrides[key.strip()] = _parse_value(key.strip(), raw)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return RunConfig(**overrides)


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Layer non-None keyword overrides (from CLI flags) over a config."""
    cleaned = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **cleaned) if cleaned else cfg
