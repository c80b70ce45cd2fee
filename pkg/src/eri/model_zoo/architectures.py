"""CNN-LSTM and CNN-Transformer regressors for emotion reaction intensity.

Both models take clips shaped [B, T, H, W, 3] (or a single [T, H, W, 3]
clip) and return sigmoid intensities [B, 7].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..core_math import NUM_EMOTIONS
from ..errors import ContractError, DomainError, NumericError
from . import autograd as ag
from . import layers as L
from .autograd import Var

ARCHITECTURES = ("cnn_lstm", "cnn_transformer")


@dataclass(frozen=True)
class BackboneSpec:
    """Per-frame feature extractor: blocks of 3x3 conv, ReLU, 2x2 max-pool.

    ``external_weights`` keeps the same layer stack but loads its kernels from a
    parameter bundle and freezes them.
    """

    kind: str = "tiny_cnn"
    widths: tuple[int, ...] = (16, 32, 64, 64)
    image_size: int = 112
    weights_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("tiny_cnn", "external_weights"):
            raise DomainError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "external_weights" and not self.weights_path:
            raise DomainError("external_weights backbone needs weights_path")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def out_hw(self) -> int:
        s = self.image_size
        for _ in self.widths:
            s //= 2
        return s

    @property
    def depth(self) -> int:
        return self.widths[-1]


@dataclass(frozen=True)
class TransformerConfig:
    num_layers: int = 3
    d_model: int = 256
    d_ff: int = 128
    num_heads: int = 8
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ContractError("d_model must be divisible by num_heads")


@dataclass(frozen=True)
class LstmConfig:
    hidden_units: int = 512

    def __post_init__(self):
        if self.hidden_units < 1:
            raise DomainError("hidden_units must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "cnn_transformer"
    frames: int = 32
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    lstm: LstmConfig = field(default_factory=LstmConfig)
    dense_units: int = 64
    tcn_kernel: int = 3

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise DomainError(f"unknown architecture {self.arch!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["widths"] = list(self.backbone.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            arch=d["arch"],
            frames=int(d["frames"]),
            backbone=BackboneSpec(**{**d["backbone"], "widths": tuple(d["backbone"]["widths"])}),
            transformer=TransformerConfig(**d["transformer"]),
            lstm=LstmConfig(**d["lstm"]),
            dense_units=int(d["dense_units"]),
            tcn_kernel=int(d["tcn_kernel"]),
        )


def paper_config(arch: str) -> ModelConfig:
    """Full-size settings: 32 frames of 112x112, d_model 256, 8 heads, 3 layers, LSTM 512."""
    return ModelConfig(arch=arch)


def micro_config(arch: str) -> ModelConfig:
    """Desk-scale preset used by the smoke tests and ``--micro`` runs (not paper scale)."""
    return ModelConfig(
        arch=arch,
        frames=4,
        backbone=BackboneSpec(widths=(32,), image_size=28),
        transformer=TransformerConfig(num_layers=1, d_model=64, d_ff=128, num_heads=4, dropout=0.0),
        lstm=LstmConfig(hidden_units=64),
        dense_units=128,
    )


def gradcheck_config(arch: str) -> ModelConfig:
    """Smallest configuration exercising every layer type, for finite-difference checks."""
    return ModelConfig(
        arch=arch,
        frames=2,
        backbone=BackboneSpec(widths=(4,), image_size=8),
        transformer=TransformerConfig(num_layers=1, d_model=4, d_ff=4, num_heads=2, dropout=0.0),
        lstm=LstmConfig(hidden_units=3),
        dense_units=4,
    )


# parameter registry ----------------------------------------------------------


def _transformer_entries(prefix: str, tc: TransformerConfig) -> dict:
    reg = {}
    d = tc.d_model
    for i in range(tc.num_layers):
        p = f"{prefix}.layer{i}"
        for proj in ("query", "key", "value", "output"):
            reg[f"{p}.attn.{proj}.kernel"] = (d, d)
            reg[f"{p}.attn.{proj}.bias"] = (d,)
        reg[f"{p}.norm1.gamma"] = (d,)
        reg[f"{p}.norm1.beta"] = (d,)
        reg[f"{p}.ff1.kernel"] = (d, tc.d_ff)
        reg[f"{p}.ff1.bias"] = (tc.d_ff,)
        reg[f"{p}.ff2.kernel"] = (tc.d_ff, d)
        reg[f"{p}.ff2.bias"] = (d,)
        reg[f"{p}.norm2.gamma"] = (d,)
        reg[f"{p}.norm2.beta"] = (d,)
    return reg


def param_registry(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape mapping; the order is also the bundle payload order."""
    reg = {}
    cin = 3
    for i, w in enumerate(cfg.backbone.widths):
        reg[f"backbone.conv{i}.kernel"] = (3, 3, cin, w)
        reg[f"backbone.conv{i}.bias"] = (w,)
        cin = w
    d = cfg.backbone.depth
    if cfg.arch == "cnn_lstm":
        H = cfg.lstm.hidden_units
        reg["lstm.w_x"] = (d, 4 * H)
        reg["lstm.w_h"] = (H, 4 * H)
        reg["lstm.bias"] = (4 * H,)
        head_in = H
    else:
        dm = cfg.transformer.d_model
        reg["embed.kernel"] = (d, dm)
        reg["embed.bias"] = (dm,)
        reg.update(_transformer_entries("encoder1", cfg.transformer))
        reg["tcn.kernel"] = (cfg.tcn_kernel, dm, dm)
        reg["tcn.bias"] = (dm,)
        reg.update(_transformer_entries("encoder2", cfg.transformer))
        head_in = dm
    reg["head.dense.kernel"] = (head_in, cfg.dense_units)
    reg["head.dense.bias"] = (cfg.dense_units,)
    reg["head.out.kernel"] = (cfg.dense_units, NUM_EMOTIONS)
    reg["head.out.bias"] = (NUM_EMOTIONS,)
    return reg


def _fan_in(name: str, shape: tuple) -> int:
    if name.endswith("tcn.kernel"):
        return shape[0] * shape[1]
    return int(np.prod(shape[:-1]))


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform kernels, zero biases, unit layer-norm gains, forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_registry(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("kernel", "w_x", "w_h"):
            limit = np.sqrt(3.0 / _fan_in(name, shape))
            arr = rng.uniform(-limit, limit, size=shape)
        elif leaf == "gamma":
            arr = np.ones(shape)
        elif name == "lstm.bias":
            H = shape[0] // 4
            arr = np.zeros(shape)
            arr[H : 2 * H] = 1.0
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return params


def check_params(cfg: ModelConfig, params: dict) -> None:
    reg = param_registry(cfg)
    missing = [n for n in reg if n not in params]
    extra = [n for n in params if n not in reg]
    if missing or extra:
        raise ContractError(f"parameter set does not match registry: missing={missing} unregistered={extra}")
    for name, shape in reg.items():
        if tuple(np.shape(params[name])) != shape:
            raise ContractError(f"{name}: expected shape {shape}, got {np.shape(params[name])}")


# forward passes --------------------------------------------------------------


def _stage(trace, name: str, v: Var, batched: bool = True) -> Var:
    if not np.all(np.isfinite(v.data)):
        raise NumericError(f"non-finite values after stage {name!r}")
    if trace is not None:
        trace.append((name, tuple(v.shape[1:]) if batched else tuple(v.shape)))
    return v


def _as_batch(clips, dtype) -> tuple[Var, bool]:
    if isinstance(clips, Var):
        x = clips
    else:
        x = Var(np.asarray(clips, dtype=dtype))
    if x.ndim == 4:
        return x.reshape((1,) + x.shape), True
    if x.ndim != 5:
        raise ContractError(f"expected clips [B, T, H, W, C], got shape {x.shape}")
    return x, False


def _wrap(params: dict) -> dict:
    return {k: v if isinstance(v, Var) else Var(np.asarray(v), name=k) for k, v in params.items()}


def backbone_forward(clips, spec: BackboneSpec, params, trace=None) -> Var:
    """Time-distributed CNN: the same kernels are applied to every frame."""
    P = _wrap(params)
    x, single = _as_batch(clips, P["backbone.conv0.kernel"].data.dtype)
    B, T, H, W, C = x.shape
    if H != spec.image_size or W != spec.image_size or C != 3:
        raise ContractError(f"backbone expects {spec.image_size}x{spec.image_size}x3 frames, got {H}x{W}x{C}")
    f = x.reshape(B * T, H, W, C)
    for i in range(len(spec.widths)):
        f = L.conv_block(P, f"backbone.conv{i}", f)
    f = f.reshape((B, T) + f.shape[1:])
    _stage(trace, "backbone", f)
    return f.reshape(f.shape[1:]) if single else f


def cnn_lstm_forward(clips, params, cfg: ModelConfig, trace=None) -> Var:
    P = _wrap(params)
    x, single = _as_batch(clips, P["head.out.kernel"].data.dtype)
    _stage(trace, "input", x)
    f = backbone_forward(x, cfg.backbone, P, trace)
    seq = _stage(trace, "spatial_pool", L.spatial_pool(f))
    h = _stage(trace, "lstm", L.lstm(P, "lstm", seq))
    h = _stage(trace, "dense", ag.relu(L.dense(P, "head.dense", h)))
    out = _stage(trace, "head", ag.sigmoid(L.dense(P, "head.out", h)))
    return out.reshape((NUM_EMOTIONS,)) if single else out


def spatial_embed_and_pool(features, params, trace=None) -> Var:
    """1x1 conv d -> d_model on [B, T, h, w, d] followed by the spatial mean."""
    P = _wrap(params)
    f = features if isinstance(features, Var) else Var(np.asarray(features))
    e = _stage(trace, "spatial_embed", L.spatial_embed(P, "embed", f))
    return _stage(trace, "spatial_pool", L.spatial_pool(e))


def cnn_transformer_forward(clips, params, cfg: ModelConfig, training=False, rng=None, trace=None) -> Var:
    P = _wrap(params)
    x, single = _as_batch(clips, P["head.out.kernel"].data.dtype)
    tc = cfg.transformer
    drop_rng = rng if training else None
    _stage(trace, "input", x)
    f = backbone_forward(x, cfg.backbone, P, trace)
    seq = spatial_embed_and_pool(f, P, trace)
    T = seq.shape[1]
    pe = positional_table(T, tc.d_model, seq.data.dtype)
    z = L.transformer_encoder(P, "encoder1", seq + pe, tc.num_layers, tc.num_heads, tc.dropout, drop_rng)
    _stage(trace, "encoder1", z)
    z = _stage(trace, "tcn", L.temporal_conv(P, "tcn", z))
    z = L.transformer_encoder(P, "encoder2", z + pe, tc.num_layers, tc.num_heads, tc.dropout, drop_rng)
    _stage(trace, "encoder2", z)
    pooled = _stage(trace, "temporal_pool", z.mean(axis=1))
    h = _stage(trace, "dense", ag.relu(L.dense(P, "head.dense", pooled)))
    out = _stage(trace, "head", ag.sigmoid(L.dense(P, "head.out", h)))
    return out.reshape((NUM_EMOTIONS,)) if single else out


def positional_table(T: int, d: int, dtype) -> np.ndarray:
    return L.positional_encoding(T, d).astype(dtype)


def forward(cfg: ModelConfig, params, clips, training=False, rng=None, trace=None) -> Var:
    if cfg.arch == "cnn_lstm":
        return cnn_lstm_forward(clips, params, cfg, trace=trace)
    return cnn_transformer_forward(clips, params, cfg, training=training, rng=rng, trace=trace)


class Model:
    """A configuration plus its parameter arrays.

    ``frozen`` lists parameters excluded from gradients and updates (the
    backbone when it was loaded from external weights).
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        self.params = init_params(config, seed) if params is None else dict(params)
        self.frozen: set[str] = set()
        self.normalizer = None  # input statistics, attached after training
        if params is None and config.backbone.kind == "external_weights":
            self._load_backbone(config.backbone.weights_path)
        check_params(config, self.params)

    def _load_backbone(self, path: str) -> None:
        from .bundle import read_bundle

        _, _, tensors = read_bundle(path)
        for name, shape in param_registry(self.config).items():
            if not name.startswith("backbone."):
                continue
            if name not in tensors:
                raise ContractError(f"external weights lack {name}")
            if tensors[name].shape != shape:
                raise ContractError(f"external weights {name}: expected {shape}, got {tensors[name].shape}")
            self.params[name] = tensors[name].astype(np.float32)
            self.frozen.add(name)

    @property
    def trainable(self) -> list[str]:
        return [n for n in self.params if n not in self.frozen]

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def predict(self, clips, batch_size: int = 16) -> np.ndarray:
        """Outputs for raw clips; the attached normalizer, if any, is applied first."""
        clips = np.asarray(clips, dtype=np.float32)
        if self.normalizer is not None:
            from ..core_math import znormalize

            clips = znormalize(clips, self.normalizer)
        if clips.ndim == 4:
            return forward(self.config, self.params, clips).data
        outs = [forward(self.config, self.params, clips[i : i + batch_size]).data
                for i in range(0, len(clips), batch_size)]
        return np.concatenate(outs, axis=0)

    def with_params(self, params: dict) -> "Model":
        m = Model(self.config, params)
        m.frozen = set(self.frozen)
        m.normalizer = self.normalizer
        return m


def param_gradients(model: Model, clips, targets, rng=None, dtype=None) -> tuple[float, dict[str, np.ndarray]]:
    """MSE loss of a batch and its gradient for every trainable parameter.

    Passing ``rng`` turns dropout on (training mode). ``dtype`` overrides the
    computation precision, e.g. float64 for finite-difference checks.
    """
    check_params(model.config, model.params)
    targets = np.asarray(targets)
    if len(targets) == 0:
        raise DomainError("empty batch")
    dtype = dtype or model.params["head.out.kernel"].dtype
    P = {k: Var(np.asarray(v, dtype=dtype), name=k) for k, v in model.params.items()}
    pred = forward(model.config, P, np.asarray(clips, dtype=dtype), training=rng is not None, rng=rng)
    diff = pred - Var(targets.astype(dtype).reshape(pred.shape))
    loss = (diff * diff).mean()
    loss.backward()
    grads = {}
    for name in model.trainable:
        g = P[name].grad
        grads[name] = np.zeros_like(P[name].data) if g is None else g
    return float(loss.data), grads
