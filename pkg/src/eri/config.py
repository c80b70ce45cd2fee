"""Run configuration: defaults, flat ``key=value`` files and model presets."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import DomainError
from .model_zoo import BackboneSpec, LstmConfig, ModelConfig, TransformerConfig, micro_config, paper_config
from .preprocessing import AugmentPolicy


@dataclass(frozen=True)
class RunConfig:
    model: str = "cnn_transformer"
    lr: float = 0.0002
    batch_size: int = 128
    epochs: int = 50
    seed: int = 0
    data: str = ""
    out: str = ""
    micro: bool = False
    # augmentation (training split only)
    augment: bool = True
    brightness_max_gain: float = 1.5
    hflip_prob: float = 0.5
    rotation_max_deg: float = 36.0
    # controllers
    min_delta: float = 0.0001
    patience_es: int = 12
    patience_lr: int = 6
    lr_factor: float = 0.5
    # history CSV gets real wall time only when set; zeros keep reruns byte-identical
    record_wall_time: bool = False
    # model overrides; 0 / empty keeps the preset value
    frames: int = 0
    image_size: int = 0
    backbone_widths: str = ""
    backbone_weights: str = ""
    freeze_backbone: bool = False
    d_model: int = 0
    d_ff: int = 0
    num_heads: int = 0
    num_layers: int = 0
    lstm_units: int = 0
    dense_units: int = 0
    dropout: float = -1.0

    def __post_init__(self):
        if self.model not in ("cnn_lstm", "cnn_transformer"):
            raise DomainError(f"model must be cnn_lstm or cnn_transformer, got {self.model!r}")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 1:
            raise DomainError("lr must be >= 0, batch_size and epochs >= 1")

    def augment_policy(self) -> AugmentPolicy | None:
        if not self.augment:
            return None
        return AugmentPolicy(self.brightness_max_gain, self.hflip_prob, self.rotation_max_deg,
                             seed=self.seed & (2**64 - 1))

    def model_config(self) -> ModelConfig:
        cfg = micro_config(self.model) if self.micro else paper_config(self.model)
        bb = cfg.backbone
        if self.backbone_widths:
            bb = replace(bb, widths=tuple(int(w) for w in self.backbone_widths.split("/")))
        if self.image_size:
            bb = replace(bb, image_size=self.image_size)
        if self.backbone_weights:
            bb = BackboneSpec("external_weights", bb.widths, bb.image_size, self.backbone_weights)
        tc = cfg.transformer
        tc = TransformerConfig(
            num_layers=self.num_layers or tc.num_layers,
            d_model=self.d_model or tc.d_model,
            d_ff=self.d_ff or tc.d_ff,
            num_heads=self.num_heads or tc.num_heads,
            dropout=tc.dropout if self.dropout < 0 else self.dropout,
        )
        return replace(
            cfg,
            frames=self.frames or cfg.frames,
            backbone=bb,
            transformer=tc,
            lstm=LstmConfig(self.lstm_units or cfg.lstm.hidden_units),
            dense_units=self.dense_units or cfg.dense_units,
        )

    def dumps(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))


MICRO_OVERRIDES = {"batch_size": 2, "lr": 0.0004, "augment": False}


def micro_run(**changes) -> RunConfig:
    """RunConfig for the desk-scale preset (smaller model, batch and a larger step size)."""
    return RunConfig(**{"micro": True, **MICRO_OVERRIDES, **changes})


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(name: str, typ, text: str):
    text = text.strip()
    try:
        if typ is bool or typ == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if typ is int or typ == "int":
            return int(text)
        if typ is float or typ == "float":
            return float(text)
    except ValueError:
        raise DomainError(f"config key {name!r}: cannot parse {text!r}") from None
    return text


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_overrides(pairs: dict[str, str]) -> dict:
    out = {}
    for key, text in pairs.items():
        name = key.strip().replace("-", "_")
        if name not in _FIELD_TYPES:
            raise DomainError(f"unknown config key {key!r}")
        out[name] = _coerce(name, _FIELD_TYPES[name], text)
    return out


def parse_config_text(text: str) -> dict:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DomainError(f"config line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return parse_overrides(pairs)


def load_config(text: str | None = None, micro: bool = False, **overrides) -> RunConfig:
    """File values first, then explicit overrides; ``micro`` applies the desk-scale defaults underneath."""
    values = dict(MICRO_OVERRIDES) if micro else {}
    if micro:
        values["micro"] = True
    if text:
        file_values = parse_config_text(text)
        if file_values.get("micro") and not micro:
            values.update(MICRO_OVERRIDES)
        values.update(file_values)
    values.update(overrides)
    return RunConfig(**values)
