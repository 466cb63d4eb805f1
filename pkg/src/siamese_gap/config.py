"""Flat ``key = value`` run configuration with dotted section keys.

    # comments and blank lines are ignored
    seed = 0
    model.pooling = gap
    model.taps = p1,p2,p3,p4
    train.epochs = 30
    augment.enabled = true
    augment.contrast_range = 0.8, 1.25

Values given on the command line override the file; :func:`render`
writes the fully resolved configuration back in the same syntax.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .data import AugmentConfig
from .errors import ConfigurationError
from .model import ModelConfig, parse_taps
from .training import TrainConfig

_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}

# key -> (section, attribute, parser)
_KEYS = {
    "seed": ("run", "seed", int),
    "model.pooling": ("model", "pooling", str),
    "model.taps": ("model", "taps", parse_taps),
    "train.learning_rate": ("train", "learning_rate", float),
    "train.epochs": ("train", "epochs", int),
    "train.batch_size": ("train", "batch_size", int),
    "train.weight_decay": ("train", "weight_decay", float),
    "train.dropout_p": ("train", "dropout_p", float),
    "train.oversample": ("train", "oversample", lambda v: _parse_bool(v)),
    "train.beta1": ("train", "beta1", float),
    "train.beta2": ("train", "beta2", float),
    "train.adam_eps": ("train", "adam_eps", float),
    "train.eval_batch_size": ("train", "eval_batch_size", int),
    "augment.enabled": ("run", "augment_enabled", lambda v: _parse_bool(v)),
    "augment.rotation_deg": ("augment", "rotation_deg", float),
    "augment.brightness_delta": ("augment", "brightness_delta", float),
    "augment.contrast_range": ("augment", "contrast_range", lambda v: _parse_pair(v)),
    "augment.gamma_range": ("augment", "gamma_range", lambda v: _parse_pair(v)),
    "augment.apply_prob": ("augment", "apply_prob", float),
    "gradcam.alpha": ("run", "gradcam_alpha", float),
}


def _parse_bool(v: str) -> bool:
    try:
        return _BOOL[v.strip().lower()]
    except KeyError:
        raise ConfigurationError(f"expected a boolean, got {v!r}") from None


def _parse_pair(v: str) -> tuple[float, float]:
    parts = [p for p in v.replace("(", "").replace(")", "").split(",") if p.strip()]
    if len(parts) != 2:
        raise ConfigurationError(f"expected two comma-separated numbers, got {v!r}")
    return float(parts[0]), float(parts[1])


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    augment: AugmentConfig
    seed: int = 0
    augment_enabled: bool = True
    gradcam_alpha: float = 0.5

    @property
    def train_config(self) -> TrainConfig:
        """TrainConfig with the run seed and augmentation settings applied."""
        return replace(self.train, seed=self.seed, augment=self.augment if self.augment_enabled else None)

    @property
    def model_config(self) -> ModelConfig:
        return replace(self.model, dropout_p=self.train.dropout_p)


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigurationError(f"{source}:{n}: unknown key {key!r}")
        values[key] = value
    return values


def read_file(path) -> dict[str, str]:
    path = Path(path)
    return parse_text(path.read_text(), str(path))


def resolve(file_values: dict[str, str] | None = None, overrides: dict[str, object] | None = None) -> RunConfig:
    """Merge file values and overrides (which win) into a validated RunConfig."""
    sections: dict[str, dict] = {"run": {}, "model": {}, "train": {}, "augment": {}}
    for key, raw in (file_values or {}).items():
        section, attr, parse = _KEYS[key]
        try:
            sections[section][attr] = parse(raw)
        except ValueError as exc:
            raise ConfigurationError(f"{key}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _KEYS:
            raise ConfigurationError(f"unknown override {key!r}")
        section, attr, parse = _KEYS[key]
        sections[section][attr] = parse(value) if isinstance(value, str) else value
    return RunConfig(
        model=ModelConfig(**sections["model"]),
        train=TrainConfig(**sections["train"]),
        augment=AugmentConfig(**sections["augment"]),
        **sections["run"],
    )


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render(run: RunConfig) -> str:
    """The resolved configuration, re-readable by :func:`parse_text`."""
    lines = []
    objects = {"model": run.model, "train": run.train, "augment": run.augment, "run": run}
    for key, (section, attr, _) in _KEYS.items():
        value = getattr(objects[section], attr)
        if key == "model.taps":
            value = ",".join(f"p{t}" for t in value)
        lines.append(f"{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"
