"""Demixed Beat Transformer encoder.

Layout inside the encoder is channel-major, ``(C, T, d_model)``: temporal
layers treat channels as a batch axis, instrumental layers transpose to
``(T, C, d_model)`` and attend across channels at each frame.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tn
from .dsa import PAPER_HEADS, ConfigError, DSAConfig, multi_head_dsa, multi_head_full
from .tensor import Tensor

CHANNELS = ("vocal", "piano", "drum", "bass", "other")
DEFAULT_FPS = 43.07
N_TEMPO = 300


@dataclass
class DemixedClip:
    """Stack of log(1 + magnitude) mel spectrograms, shape ``(T, C, F)``."""

    values: np.ndarray
    fps: float = DEFAULT_FPS
    channel_names: list[str] = field(default_factory=lambda: list(CHANNELS))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"clip values must be (T, C, F), got {self.values.shape}")
        T, C, _ = self.values.shape
        if T < 1 or C < 1:
            raise ValueError("clip needs T >= 1 and C >= 1")
        if len(self.channel_names) != C:
            raise ValueError(f"{len(self.channel_names)} channel names for {C} channels")
        if not np.isfinite(self.values).all():
            raise ValueError("clip contains non-finite values")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def n_bins(self) -> int:
        return self.values.shape[2]


@dataclass
class ActivationTrack:
    beat: np.ndarray
    downbeat: np.ndarray
    tempo: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        self.beat = np.asarray(self.beat, dtype=np.float64)
        self.downbeat = np.asarray(self.downbeat, dtype=np.float64)
        self.tempo = np.asarray(self.tempo, dtype=np.float64)
        if self.beat.shape != self.downbeat.shape or self.beat.ndim != 1:
            raise ValueError("beat and downbeat must be 1-D and equally long")
        for arr in (self.beat, self.downbeat, self.tempo):
            if arr.size and ((arr < 0).any() or (arr > 1).any()):
                raise ValueError("activations must lie in [0, 1]")

    def __len__(self) -> int:
        return self.beat.shape[0]


@dataclass
class EncoderConfig:
    n_ttl: int = 6
    demix_layers: tuple[int, ...] = (2,)
    d_model: int = 16
    d_ff: int = 64
    d_f: int = 4
    heads: tuple[tuple[int, int], ...] = ((2, 2), (2, 2), (0, 4), (4, 0))
    dilation_base: int = 2
    dropout_main: float = 0.1
    dropout_tempo: float = 0.5
    n_mels: int = 128
    conv_filters: tuple[int, ...] = (8, 8, 8)
    pool: int = 4
    n_tempo: int = N_TEMPO
    fps: float = DEFAULT_FPS
    ln_eps: float = 1e-5
    # front-end input standardisation, (x - input_mean) / input_std
    input_mean: float = 0.25
    input_std: float = 0.2

    @classmethod
    def desk(cls, **overrides) -> "EncoderConfig":
        return cls(**overrides)

    @classmethod
    def paper(cls, **overrides) -> "EncoderConfig":
        base = dict(n_ttl=9, demix_layers=(3, 4, 5), d_model=256, d_ff=1024, d_f=32,
                    heads=PAPER_HEADS, conv_filters=(64, 64, 128))
        base.update(overrides)
        return cls(**base)

    def __post_init__(self):
        self.demix_layers = tuple(int(i) for i in self.demix_layers)
        self.heads = tuple((int(a), int(b)) for a, b in self.heads)
        self.conv_filters = tuple(int(f) for f in self.conv_filters)
        self.validate()

    def validate(self) -> None:
        if self.n_ttl < 1:
            raise ConfigError("need at least one temporal layer")
        if any(not 0 <= i < self.n_ttl for i in self.demix_layers):
            raise ConfigError(f"demix layer indices {self.demix_layers} out of range")
        if self.d_model != len(self.heads) * self.d_f:
            raise ConfigError(f"d_model={self.d_model} != heads({len(self.heads)}) x d_f({self.d_f})")
        if len(self.conv_filters) != 3:
            raise ConfigError("front-end uses exactly three conv blocks")
        if not self.input_std > 0:
            raise ConfigError(f"input_std must be positive, got {self.input_std}")
        if self.n_mels % self.pool ** 3:
            raise ConfigError(f"n_mels={self.n_mels} not divisible by pool^3={self.pool ** 3}")

    @property
    def frontend_bins(self) -> int:
        return self.n_mels // self.pool ** 3

    def dilation(self, layer: int) -> int:
        return self.dilation_base ** layer

    def layer_dsa(self, layer: int) -> DSAConfig:
        m, n = self.heads[0]
        return DSAConfig(m=m, n=n, r=self.dilation(layer), d_f=self.d_f, heads=self.heads)

    # key=value text -------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name == "heads":
                val = ",".join(f"{a}:{b}" for a, b in val)
            elif isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{f.name}={val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EncoderConfig":
        return cls.from_mapping(parse_key_values(text))

    @classmethod
    def from_mapping(cls, kv: Mapping[str, str], base: "EncoderConfig | None" = None) -> "EncoderConfig":
        base = base or cls()
        types = {f.name: f for f in fields(cls)}
        updates = {}
        for key, raw in kv.items():
            if key not in types:
                raise ConfigError(f"unknown model config key {key!r}")
            cur = getattr(base, key)
            raw = str(raw).strip()
            if key == "heads":
                updates[key] = tuple(tuple(int(v) for v in item.split(":")) for item in raw.split(",") if item)
            elif isinstance(cur, tuple):
                updates[key] = tuple(int(v) for v in raw.split(",") if v)
            elif isinstance(cur, bool):
                updates[key] = raw.lower() in ("1", "true", "yes")
            elif isinstance(cur, int):
                updates[key] = int(raw)
            else:
                updates[key] = float(raw)
        return replace(base, **updates)


def parse_key_values(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _attention_params(rng, prefix: str, d: int, out: dict) -> None:
    for name in ("q", "k", "v", "o"):
        out[f"{prefix}.w{name}"] = _uniform(rng, (d, d), d)
        out[f"{prefix}.b{name}"] = _uniform(rng, (d,), d)


def _layer_params(rng, prefix: str, cfg: EncoderConfig, out: dict, with_rpe: bool) -> None:
    d = cfg.d_model
    out[f"{prefix}.ln1.g"] = Tensor(np.ones(d), requires_grad=True)
    out[f"{prefix}.ln1.b"] = Tensor(np.zeros(d), requires_grad=True)
    _attention_params(rng, f"{prefix}.attn", d, out)
    if with_rpe:
        for h, (m, n) in enumerate(cfg.heads):
            out[f"{prefix}.attn.rpe{h}"] = _uniform(rng, (m + n + 1, cfg.d_f), cfg.d_f)
    out[f"{prefix}.ln2.g"] = Tensor(np.ones(d), requires_grad=True)
    out[f"{prefix}.ln2.b"] = Tensor(np.zeros(d), requires_grad=True)
    out[f"{prefix}.ff.w1"] = _uniform(rng, (d, cfg.d_ff), d)
    out[f"{prefix}.ff.b1"] = _uniform(rng, (cfg.d_ff,), d)
    out[f"{prefix}.ff.w2"] = _uniform(rng, (cfg.d_ff, d), cfg.d_ff)
    out[f"{prefix}.ff.b2"] = _uniform(rng, (d,), cfg.d_ff)


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameters, uniform in +-1/sqrt(fan_in); norms start at identity, head weights at zero."""
    p: dict[str, Tensor] = {}
    cin = 1
    for i, cout in enumerate(cfg.conv_filters, 1):
        p[f"frontend.conv{i}.w"] = _uniform(rng, (3, 3, cin, cout), cin * 9)
        p[f"frontend.conv{i}.b"] = _uniform(rng, (cout,), cin * 9)
        cin = cout
    flat = cfg.conv_filters[-1] * cfg.frontend_bins
    p["frontend.proj.w"] = _uniform(rng, (flat, cfg.d_model), flat)
    p["frontend.proj.b"] = _uniform(rng, (cfg.d_model,), flat)
    for l in range(cfg.n_ttl):
        _layer_params(rng, f"ttl{l}", cfg, p, with_rpe=True)
        if l in cfg.demix_layers:
            _layer_params(rng, f"itl{l}", cfg, p, with_rpe=False)
    d = cfg.d_model
    # zero head weights: the channel sum carries a large shared offset, and a
    # random readout of it drowns the frame-to-frame variation early on
    for head in ("beat", "downbeat"):
        p[f"{head}.w"] = Tensor(np.zeros((d, 1)), requires_grad=True)
        p[f"{head}.b"] = _uniform(rng, (1,), d)
    # zero tempo head: training starts from the uniform tempo distribution
    p["tempo.w"] = Tensor(np.zeros((d, cfg.n_tempo)), requires_grad=True)
    p["tempo.b"] = Tensor(np.zeros(cfg.n_tempo), requires_grad=True)
    for name, t in p.items():
        t.name = name
    return p


def sub_params(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def frontend_forward(values, params: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Shared conv stack applied to every channel: ``(T, C, F) -> (T, C, d_model)``."""
    x = (tn.as_tensor(values) - cfg.input_mean) * (1.0 / cfg.input_std)
    T, C, F = x.shape
    if F != cfg.n_mels:
        raise ConfigError(f"clip has {F} mel bins, model expects {cfg.n_mels}")
    # channels become the conv batch axis: (C, T, F, 1)
    h = tn.reshape(tn.transpose(x, (1, 0, 2)), (C, T, F, 1))
    for i in range(1, 4):
        h = tn.conv2d_same(h, params[f"frontend.conv{i}.w"], params[f"frontend.conv{i}.b"])
        h = tn.max_pool(tn.elu(h), cfg.pool, axis=2)
    h = tn.reshape(h, (C, T, h.shape[2] * h.shape[3]))
    h = h @ params["frontend.proj.w"] + params["frontend.proj.b"]
    return tn.transpose(h, (1, 0, 2))


def _feed_forward(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return tn.gelu(x @ p["ff.w1"] + p["ff.b1"]) @ p["ff.w2"] + p["ff.b2"]


def ttl_forward(x, layer_params: Mapping[str, Tensor], r: int, cfg: EncoderConfig,
                rng: np.random.Generator | None = None, return_weights: bool = False):
    """Temporal layer over axis -2 (time); leading axes are independent channels."""
    x = tn.as_tensor(x)
    p = layer_params
    m, n = cfg.heads[0]
    dsa_cfg = DSAConfig(m=m, n=n, r=r, d_f=cfg.d_f, heads=cfg.heads)
    h = tn.layer_norm(x, p["ln1.g"], p["ln1.b"], cfg.ln_eps)
    a, weights = multi_head_dsa(h, sub_params(p, "attn"), dsa_cfg, return_weights=True)
    x = x + tn.dropout(a, cfg.dropout_main, rng)
    h = tn.layer_norm(x, p["ln2.g"], p["ln2.b"], cfg.ln_eps)
    x = x + tn.dropout(_feed_forward(h, p), cfg.dropout_main, rng)
    return (x, weights) if return_weights else x


def itl_forward(x, layer_params: Mapping[str, Tensor], cfg: EncoderConfig,
                rng: np.random.Generator | None = None) -> Tensor:
    """Instrumental layer: full attention across channels (axis -2), per frame."""
    x = tn.as_tensor(x)
    p = layer_params
    h = tn.layer_norm(x, p["ln1.g"], p["ln1.b"], cfg.ln_eps)
    a = multi_head_full(h, sub_params(p, "attn"), len(cfg.heads))
    x = x + tn.dropout(a, cfg.dropout_main, rng)
    h = tn.layer_norm(x, p["ln2.g"], p["ln2.b"], cfg.ln_eps)
    return x + tn.dropout(_feed_forward(h, p), cfg.dropout_main, rng)


def tempo_head_forward(layer_outputs: Sequence[Tensor], params: Mapping[str, Tensor],
                       cfg: EncoderConfig, rng: np.random.Generator | None = None) -> Tensor:
    """Skip-connection tempo branch: channel-sum, time-average, sum over layers, normalise."""
    if not layer_outputs:
        raise ConfigError("tempo head needs at least one layer output")
    pooled = None
    for out in layer_outputs:
        v = tn.mean(tn.tsum(out, axis=0), axis=0)
        pooled = v if pooled is None else pooled + v
    # parameter-free normalisation; the raw sum grows with depth and clip loudness
    d = pooled.shape[-1]
    pooled = tn.layer_norm(pooled, Tensor(np.ones(d)), Tensor(np.zeros(d)), cfg.ln_eps)
    pooled = tn.dropout(pooled, cfg.dropout_tempo, rng)
    logits = tn.reshape(pooled, (1, -1)) @ params["tempo.w"] + params["tempo.b"]
    return tn.reshape(tn.softmax_lastdim(logits), (cfg.n_tempo,))


@dataclass
class EncoderOutput:
    beat: Tensor
    downbeat: Tensor
    tempo: Tensor
    layer_outputs: list[Tensor]
    attention: list[list[np.ndarray]] | None = None

    def track(self, fps: float) -> ActivationTrack:
        return ActivationTrack(self.beat.data.copy(), self.downbeat.data.copy(),
                               self.tempo.data.copy(), fps)


def encoder_forward(clip, params: Mapping[str, Tensor], cfg: EncoderConfig,
                    rng: np.random.Generator | None = None,
                    capture_attention: bool = False) -> EncoderOutput:
    """Full encoder. ``rng`` enables dropout (training mode); None is evaluation.

    ``layer_outputs`` holds each temporal layer's ``(C, T, d_model)`` output;
    with ``capture_attention`` the per-head ``(C, T, l_win)`` weights of every
    temporal layer are returned as numpy arrays.
    """
    values = clip.values if isinstance(clip, DemixedClip) else clip
    x = tn.transpose(frontend_forward(values, params, cfg), (1, 0, 2))
    layer_outputs, attention = [], []
    for l in range(cfg.n_ttl):
        x, weights = ttl_forward(x, sub_params(params, f"ttl{l}"), cfg.dilation(l), cfg, rng,
                                 return_weights=True)
        layer_outputs.append(x)
        if capture_attention:
            attention.append([w.data.copy() for w in weights])
        if l in cfg.demix_layers:
            y = itl_forward(tn.transpose(x, (1, 0, 2)), sub_params(params, f"itl{l}"), cfg, rng)
            x = tn.transpose(y, (1, 0, 2))
    h = tn.dropout(tn.tsum(x, axis=0), cfg.dropout_main, rng)
    beat = tn.sigmoid(tn.reshape(h @ params["beat.w"] + params["beat.b"], (-1,)))
    downbeat = tn.sigmoid(tn.reshape(h @ params["downbeat.w"] + params["downbeat.b"], (-1,)))
    tempo = tempo_head_forward(layer_outputs, params, cfg, rng)
    return EncoderOutput(beat, downbeat, tempo, layer_outputs,
                         attention if capture_attention else None)


class BeatTransformer:
    """Configuration plus named parameters, with convenience entry points."""

    def __init__(self, cfg: EncoderConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, np.random.default_rng(seed))

    def forward(self, clip, rng: np.random.Generator | None = None,
                capture_attention: bool = False) -> EncoderOutput:
        return encoder_forward(clip, self.params, self.cfg, rng, capture_attention)

    def predict(self, clip: DemixedClip) -> ActivationTrack:
        with tn.no_grad():
            return self.forward(clip).track(clip.fps)

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_arrays(cls, cfg: EncoderConfig, arrays: Mapping[str, np.ndarray]) -> "BeatTransformer":
        ref = init_params(cfg, np.random.default_rng(0))
        params = {}
        for name, t in ref.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint lacks parameter {name!r}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ConfigError(f"parameter {name!r}: checkpoint shape {arr.shape}, model expects {t.shape}")
            params[name] = Tensor(arr, requires_grad=True, name=name)
        return cls(cfg, params)


def config_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)
