"""Experiment configuration: defaults, key-value files, and flag overrides.

Config files are plain `key = value` lines (# comments allowed); every key
has a same-named --flag on the command line. Precedence is flags > file >
defaults. Unknown keys and out-of-range values are rejected with the
offending key named.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .world import PRIOR_KINDS

EXPERIMENT_FAMILIES = (
    "reid_closed",
    "matching_closed",
    "open_world",
    "prior_amount",
    "train_amount",
    "layer_sweep",
    "epoch_grid",
    "iid_control",
    "dataspace",
    "bias_profile",
    "mitigation",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # world
    users: int = 20
    classes: int = 10
    feature_dim: int = 32
    n_per_user: int = 200
    beta: float = 0.1
    sigma_x: float = 0.6
    drift: float = 0.3
    albums_per_user: int = 3
    test_fraction: float = 0.2
    background_size: int = 2000
    prior_kind: str = "random"
    prior_fraction: float = 0.22
    profile_class: int = -1  # -1 = unset; required when prior_kind = profile
    # task model and federation
    model_kind: str = "mlp1"
    hidden_dim: int = 16
    rounds: int = 50
    client_fraction: float = 1.0
    local_epochs: int = 1
    batch_size: int = 4
    eta: float = 0.8
    # delta representation
    attack_layer: str = "W2"
    normalize: bool = True
    # attack recipe
    attack_methods: tuple[str, ...] = ("chance", "knn", "svm", "mlp")
    match_methods: tuple[str, ...] = ("chance", "mlp_product", "siamese")
    seen_fractions: tuple[float, ...] = (0.0, 0.5, 1.0)
    prior_grid: tuple[int, ...] = (1, 4, 16, 64)
    train_grid: tuple[int, ...] = (1, 2, 4, 8, 16)
    epoch_ranges: int = 5
    dataspace_set_sizes: tuple[int, ...] = (1, 4, 16)
    # mitigation sweep
    mitigation_strategies: tuple[str, ...] = ("noise", "bkg_repl", "rand_aug", "mm_aug")
    noise_grid: tuple[float, ...] = (1e-2, 1e-1, 1.0, 1e1, 1e2)
    repl_grid: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    aug_grid: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0)
    clusters_m: int = 10
    # bookkeeping
    seed: int = 0
    out_dir: str = "runs"


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _parse_value(key: str, raw: str) -> Any:
    default = _FIELDS[key].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered not in ("true", "false"):
                raise ValueError("expected true or false")
            return lowered == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if raw == "":
                return ()
            parts = [p.strip() for p in raw.split(",")]
            element = default[0] if default else ""
            if isinstance(element, float):
                return tuple(float(p) for p in parts)
            if isinstance(element, int):
                return tuple(int(p) for p in parts)
            return tuple(parts)
        return raw
    except ValueError as err:
        raise ConfigError(f"config key {key!r}: {err}") from None


def _canonical(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_canonical(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def snapshot(cfg: ExperimentConfig) -> dict[str, str]:
    """Canonical string form of every field, in declaration order."""
    return {f.name: _canonical(getattr(cfg, f.name)) for f in fields(ExperimentConfig)}


def config_hash(cfg: ExperimentConfig) -> str:
    text = "\n".join(f"{k} = {v}" for k, v in snapshot(cfg).items())
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def read_config_file(path) -> dict[str, str]:
    """Raw key/value strings from a config document."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value.strip()
    return out


def _require(cond: bool, key: str, message: str, value: Any) -> None:
    if not cond:
        raise ConfigError(f"config key {key!r}: {message} (got {value!r})")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    _require(cfg.users >= 2, "users", "must be >= 2", cfg.users)
    _require(cfg.classes >= 2, "classes", "must be >= 2", cfg.classes)
    _require(cfg.feature_dim >= 1, "feature_dim", "must be >= 1", cfg.feature_dim)
    _require(cfg.n_per_user >= 4, "n_per_user", "must be >= 4", cfg.n_per_user)
    _require(cfg.beta > 0, "beta", "must be > 0", cfg.beta)
    _require(cfg.sigma_x > 0, "sigma_x", "must be > 0", cfg.sigma_x)
    _require(0.0 <= cfg.drift <= 1.0, "drift", "must be in [0, 1]", cfg.drift)
    _require(cfg.albums_per_user >= 1, "albums_per_user", "must be >= 1", cfg.albums_per_user)
    _require(0.0 < cfg.test_fraction < 1.0, "test_fraction", "must be in (0, 1)", cfg.test_fraction)
    _require(cfg.background_size >= 1, "background_size", "must be >= 1", cfg.background_size)
    _require(cfg.prior_kind in PRIOR_KINDS, "prior_kind", f"must be one of {PRIOR_KINDS}", cfg.prior_kind)
    _require(
        0.0 < cfg.prior_fraction < 1.0, "prior_fraction", "must be in (0, 1)", cfg.prior_fraction
    )
    if cfg.prior_kind == "profile":
        _require(
            0 <= cfg.profile_class < cfg.classes,
            "profile_class",
            "must name a class when prior_kind = profile",
            cfg.profile_class,
        )
    _require(cfg.model_kind in ("linear", "mlp1"), "model_kind", "must be linear or mlp1", cfg.model_kind)
    _require(cfg.hidden_dim >= 1, "hidden_dim", "must be >= 1", cfg.hidden_dim)
    _require(cfg.rounds >= 1, "rounds", "must be >= 1", cfg.rounds)
    _require(
        0.0 < cfg.client_fraction <= 1.0, "client_fraction", "must be in (0, 1]", cfg.client_fraction
    )
    _require(cfg.local_epochs >= 1, "local_epochs", "must be >= 1", cfg.local_epochs)
    _require(cfg.batch_size >= 1, "batch_size", "must be >= 1", cfg.batch_size)
    _require(cfg.eta > 0, "eta", "must be > 0", cfg.eta)
    _require(cfg.epoch_ranges >= 1, "epoch_ranges", "must be >= 1", cfg.epoch_ranges)
    _require(cfg.clusters_m >= 1, "clusters_m", "must be >= 1", cfg.clusters_m)
    _require(cfg.seed >= 0, "seed", "must be >= 0", cfg.seed)
    for key, values, allowed in (
        ("attack_methods", cfg.attack_methods, ("chance", "knn", "svm", "mlp")),
        ("match_methods", cfg.match_methods, ("chance", "mlp_product", "siamese")),
        ("mitigation_strategies", cfg.mitigation_strategies, ("noise", "bkg_repl", "rand_aug", "mm_aug")),
    ):
        _require(len(values) > 0, key, "must not be empty", values)
        for v in values:
            _require(v in allowed, key, f"must be drawn from {allowed}", v)
    for key, values in (("prior_grid", cfg.prior_grid), ("train_grid", cfg.train_grid),
                        ("dataspace_set_sizes", cfg.dataspace_set_sizes)):
        _require(len(values) > 0, key, "must not be empty", values)
        _require(all(v >= 1 for v in values), key, "entries must be >= 1", values)
    _require(
        all(0.0 <= v <= 1.0 for v in cfg.seen_fractions),
        "seen_fractions", "entries must be in [0, 1]", cfg.seen_fractions,
    )
    _require(all(v > 0 for v in cfg.noise_grid), "noise_grid", "entries must be > 0", cfg.noise_grid)
    _require(
        all(0.0 <= v <= 1.0 for v in cfg.repl_grid), "repl_grid", "entries must be in [0, 1]", cfg.repl_grid
    )
    _require(all(v >= 0 for v in cfg.aug_grid), "aug_grid", "entries must be >= 0", cfg.aug_grid)
    return cfg


def build_config(
    file_path: str | None = None, overrides: dict[str, str] | None = None
) -> ExperimentConfig:
    """Merge defaults, an optional config file, and raw string overrides
    (typically from command-line flags), then validate."""
    values: dict[str, Any] = {}
    if file_path is not None:
        for key, raw in read_config_file(file_path).items():
            values[key] = _parse_value(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return validate(ExperimentConfig(**values))
