"""Flat ``key = value`` experiment configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

LR_GRID = (0.01, 0.001, 0.0001)
L2_GRID = (0.01, 0.001, 0.0001)
MU_GRID = (10.0, 20.0)
BUDGET_GRID = (30, 40)
METHODS = ("none", "rd", "cd", "unkd")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset_path: str = ""
    dataset_name: str = ""
    delimiter: str = "::"
    rating_threshold: float = 0.0
    min_interactions: int = 20
    test_frac: float = 0.1
    valid_frac: float = 0.1
    split_seed: int = 0
    user_fraction: float = 1.0

    backbone: str = "mf"
    lightgcn_layers: int = 2
    teacher_dim: int = 100
    student_dim: int = 10
    init_scale: float = 0.1

    teacher_lr: float = 0.001
    teacher_l2: float = 0.0001
    student_lr: float = 0.001
    student_l2: float = 0.0001
    batch_size: int = 2048
    max_epochs: int = 1000
    patience: int = 100

    method: str = "unkd"
    k: int = 4
    lam: float = 0.5
    mu: float = 10.0
    soft_labels: int = 40
    rd_top_n: int = 40
    pairs_per_group: int = 0
    resample_pairs: bool = True

    eval_n: int = 10
    seed: int = 0
    sweep_k: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)

    lemma_gammas: tuple[float, ...] = (0.5, 1.0, 2.0)
    lemma_models: int = 100
    lemma_users: int = 50
    lemma_items: int = 200

    allow_out_of_grid: bool = False

    def __post_init__(self):
        if not self.dataset_name and self.dataset_path:
            self.dataset_name = os.path.basename(os.path.dirname(os.path.abspath(self.dataset_path))) \
                or os.path.splitext(os.path.basename(self.dataset_path))[0]

    def validate(self, check_files: bool = True) -> "ExperimentConfig":
        if check_files and self.dataset_path and not os.path.exists(self.dataset_path):
            raise ConfigError(f"dataset_path {self.dataset_path!r} does not exist")
        if self.backbone not in ("mf", "lightgcn"):
            raise ConfigError(f"backbone must be mf or lightgcn, got {self.backbone!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.mu <= 0:
            raise ConfigError("mu must be positive")
        if self.soft_labels < self.k:
            raise ConfigError("soft_labels must be >= k")
        if not 0 < self.test_frac < 1 or not 0 <= self.valid_frac < 1:
            raise ConfigError("split fractions out of range")
        if not 0 < self.user_fraction <= 1:
            raise ConfigError("user_fraction must lie in (0, 1]")
        for name in ("teacher_dim", "student_dim", "batch_size", "max_epochs", "patience",
                     "eval_n", "min_interactions", "rd_top_n"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if any(k < 1 for k in self.sweep_k):
            raise ConfigError("sweep_k values must be >= 1")
        if not self.allow_out_of_grid:
            checks = [
                ("k", 1 <= self.k <= 10, "[1, 10]"),
                ("lambda", 0 <= self.lam <= 1, "[0, 1]"),
                ("mu", self.mu in MU_GRID, str(MU_GRID)),
                ("soft_labels", self.soft_labels in BUDGET_GRID, str(BUDGET_GRID)),
                ("teacher_lr", self.teacher_lr in LR_GRID, str(LR_GRID)),
                ("student_lr", self.student_lr in LR_GRID, str(LR_GRID)),
                ("teacher_l2", self.teacher_l2 in L2_GRID, str(L2_GRID)),
                ("student_l2", self.student_l2 in L2_GRID, str(L2_GRID)),
            ]
            for name, ok, allowed in checks:
                if not ok:
                    raise ConfigError(f"{name} outside the tuned grid {allowed}; "
                                      "set allow_out_of_grid = true to override")
        return self


# The config file spells lam as "lambda".
_ALIASES = {"lambda": "lam"}
_REVERSE = {v: k for k, v in _ALIASES.items()}


def _field_types() -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(ExperimentConfig)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _unescape(text: str) -> str:
    return {"\\t": "\t", "tab": "\t", "space": " "}.get(text, text)


def _escape(text: str) -> str:
    return {"\t": "\\t", " ": "space"}.get(text, text)


def parse_value(name: str, text: str):
    kind = _field_types()[name]
    try:
        if kind == "bool":
            return _parse_bool(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("tuple[int"):
            return tuple(int(x) for x in text.replace(",", " ").split())
        if kind.startswith("tuple[float"):
            return tuple(float(x) for x in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    if name == "delimiter":
        return _unescape(text)
    return text


def format_value(name: str, value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if name == "delimiter":
        return _escape(value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        name = _ALIASES.get(key, key)
        if name not in _field_types():
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[name] = parse_value(name, value)
    return ExperimentConfig(**values)


def load_config(path, check_files: bool = True, **overrides) -> ExperimentConfig:
    with open(path) as fh:
        cfg = parse_config_text(fh.read(), source=str(path))
    if cfg.dataset_path and not os.path.isabs(cfg.dataset_path):
        candidate = os.path.join(os.path.dirname(os.path.abspath(path)), cfg.dataset_path)
        if os.path.exists(candidate) and not os.path.exists(cfg.dataset_path):
            cfg.dataset_path = candidate
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg.validate(check_files=check_files)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        key = _REVERSE.get(f.name, f.name)
        lines.append(f"{key} = {format_value(f.name, getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"
