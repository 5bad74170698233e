"""Flat ``key=value`` run configuration covering model and training settings.

Blank lines and ``#`` comments are ignored; tuples are comma separated.
Unknown keys are rejected. Model keys left unset fall back to the preset.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Mapping

from .errors import ConfigError
from .model import ModelConfig
from .training import StageConfig

MODEL_KEYS = (
    "input_h",
    "input_w",
    "num_classes",
    "embedding_dim",
    "lstm_hidden",
    "lstm_layers",
    "encoder_widths",
    "decoder_widths",
    "fc_hidden",
    "norm_mean",
    "norm_std",
)


@dataclass(frozen=True)
class RunConfig:
    preset: str = "paper"
    seed: int = 0
    workers: int = 1
    # model overrides (None = preset value)
    input_h: int | None = None
    input_w: int | None = None
    num_classes: int | None = None
    embedding_dim: int | None = None
    lstm_hidden: int | None = None
    lstm_layers: int | None = None
    encoder_widths: tuple[int, ...] | None = None
    decoder_widths: tuple[int, ...] | None = None
    fc_hidden: int | None = None
    norm_mean: tuple[float, ...] | None = None
    norm_std: tuple[float, ...] | None = None
    # masks
    near_mm: float = 100.0
    far_mm: float = 700.0
    min_area: int = 64
    # stage 1
    lr_stage1: float = 1e-6
    batch_stage1: int = 100
    epochs_stage1: int = 50
    seg_weight: float = 1.0
    label_weight: float = 1.0
    # stage 2
    lr_stage2: float = 1e-2
    lr_stage2_drop: float = 1e-3
    batch_stage2: int = 100
    epochs_stage2: int = 200
    divergence_window: int = 200
    divergence_count: int = 3
    phase1_epochs: int = 0
    # stage 3
    lr_stage3: float = 1e-3
    epochs_stage3: int = 20
    freeze_bn: bool = True
    # shared
    patience: int = 5
    patience_stage1: int | None = None  # per-stage overrides of ``patience``
    patience_stage2: int | None = None
    patience_stage3: int | None = None
    max_steps: int = 0

    def model_config(self) -> ModelConfig:
        overrides = {k: getattr(self, k) for k in MODEL_KEYS if getattr(self, k) is not None}
        return ModelConfig.from_preset(self.preset, **overrides)

    def stage_config(self, stage: int) -> StageConfig:
        own = getattr(self, f"patience_stage{stage}", None)
        common = dict(seed=self.seed, patience=self.patience if own is None else own, max_steps=self.max_steps or None)
        if stage == 1:
            return StageConfig.for_stage(
                1, lr=self.lr_stage1, batch_size=self.batch_stage1, max_epochs=self.epochs_stage1,
                seg_weight=self.seg_weight, label_weight=self.label_weight, **common,
            )
        if stage == 2:
            return StageConfig.for_stage(
                2, lr=self.lr_stage2, lr_after_drop=self.lr_stage2_drop, batch_size=self.batch_stage2,
                max_epochs=self.epochs_stage2, divergence_window=self.divergence_window,
                divergence_count=self.divergence_count, phase1_max_epochs=self.phase1_epochs or None, **common,
            )
        if stage == 3:
            return StageConfig.for_stage(3, lr=self.lr_stage3, max_epochs=self.epochs_stage3, freeze_bn=self.freeze_bn, **common)
        raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")

    def with_values(self, values: Mapping[str, str]) -> "RunConfig":
        """Apply string overrides (from a file or ``--set``), converting by field type."""
        known = {f.name: f for f in fields(self)}
        parsed = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            parsed[key] = _convert(key, str(known[key].type), raw)
        cfg = replace(self, **parsed)
        cfg.model_config()  # validates preset and model keys early
        return cfg

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


def _convert(key: str, type_name: str, raw: str):
    raw = raw.strip()
    try:
        if type_name.startswith("tuple[int"):
            return tuple(int(x) for x in raw.split(","))
        if type_name.startswith("tuple[float"):
            return tuple(float(x) for x in raw.split(","))
        if type_name == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if type_name.startswith("int"):
            return int(raw)
        if type_name.startswith("float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type_name}") from None


def parse_config_text(text: str, origin: str = "config") -> dict[str, str]:
    values: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def load_run_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    """File values first, then ``overrides`` (flags win)."""
    values: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(path)))
    values.update(overrides or {})
    return RunConfig().with_values(values)
