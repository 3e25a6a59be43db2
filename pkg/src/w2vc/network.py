"""Encoder LSTM, span masking, transformer context network, comparison
projection and consistency LSTM decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensor_core as tc
from .quantizer import GUMBEL, KMEANS, Codebook, init_codebook
from .tensor_core import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    F: int = 64
    D_e: int = 64
    encoder_layers: int = 3
    context_layers: int = 5
    D_c: int = 96
    ff_dim: int = 384
    heads: int = 4
    consistency_layers: int = 3
    G: int = 2
    V: int = 32
    K: int = 32
    quantizer: str = GUMBEL
    mask_count: int = 5
    mask_fraction: float = 0.16
    n_negatives: int = 50
    alpha: float = 1.5
    beta: float = 0.25
    gamma_consistency: int = 1
    encoder_grad_scale: float = 0.1
    kappa: float = 0.1
    tau_start: float = 2.0
    tau_floor: float = 0.5
    tau_decay: float = 0.999995
    kmeans_squared: bool = False
    quantizer_norm: bool = True
    logit_init: str = "normal"
    anchor_all_frames: bool = False
    positional: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.D_e % self.G:
            raise ConfigError(f"D_e={self.D_e} must be divisible by G={self.G}")
        if self.D_c % self.heads:
            raise ConfigError(f"heads={self.heads} must divide D_c={self.D_c}")
        if not 0 < self.mask_fraction <= 1:
            raise ConfigError(f"mask_fraction must lie in (0, 1], got {self.mask_fraction}")
        if self.quantizer not in (GUMBEL, KMEANS):
            raise ConfigError(f"quantizer must be gumbel or kmeans, got {self.quantizer!r}")
        if self.quantizer == KMEANS and self.D_e // self.G != self.K:
            raise ConfigError(f"k-means needs D_e/G == K ({self.D_e}/{self.G} != {self.K})")
        if self.logit_init not in ("uniform", "normal"):
            raise ConfigError(f"logit_init must be uniform or normal, got {self.logit_init!r}")
        if self.gamma_consistency not in (0, 1):
            raise ConfigError("gamma_consistency must be 0 or 1")
        if self.kappa <= 0:
            raise ConfigError("kappa must be positive")
        if self.positional and self.D_c % 2:
            raise ConfigError("sinusoidal positions need an even D_c")

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        base = dict(F=64, D_e=768, encoder_layers=3, context_layers=5, D_c=1024, ff_dim=4096,
                    heads=16, G=2, V=320, K=384)
        base.update(kw)
        return cls(**base)

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        base = dict(F=8, D_e=8, encoder_layers=2, context_layers=2, D_c=12, ff_dim=24, heads=2,
                    consistency_layers=2, G=2, V=4, K=4)
        base.update(kw)
        return cls(**base)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class ModelParams:
    """Named trainable tensors for f, q, g, r and the glue between them."""

    def __init__(self, tensors: dict[str, Tensor], quantizer: str):
        self.tensors = tensors
        self.quantizer = quantizer

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def codebook(self) -> Codebook:
        t = self.tensors
        return Codebook(self.quantizer, t["quantizer.codes"], t.get("quantizer.logit_w"), t.get("quantizer.logit_b"))

    def without(self, prefix: str) -> "ModelParams":
        return ModelParams({k: v for k, v in self.tensors.items() if not k.startswith(prefix)}, self.quantizer)

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
                           self.quantizer)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())


def _uniform(rng, bound, shape) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def _lstm_params(p, prefix, d_in, H, rng):
    bound = 1.0 / np.sqrt(H)
    p[f"{prefix}.w_in"] = _uniform(rng, bound, (d_in, 4 * H))
    p[f"{prefix}.w_rec"] = _uniform(rng, bound, (H, 4 * H))
    b = np.zeros(4 * H)
    b[H:2 * H] = 1.0  # forget gate
    p[f"{prefix}.bias"] = Tensor(b, requires_grad=True)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Parameters for every block; the consistency decoder is always created so
    that the RNG stream is identical whichever loss weights are in force."""
    p: dict[str, Tensor] = {}
    d_in = cfg.F
    for l in range(cfg.encoder_layers):
        _lstm_params(p, f"encoder.{l}", d_in, cfg.D_e, rng)
        d_in = cfg.D_e
    p["mask_embedding"] = Tensor(0.1 * rng.standard_normal(cfg.D_e), requires_grad=True)
    p["context.in_w"] = _uniform(rng, 1 / np.sqrt(cfg.D_e), (cfg.D_e, cfg.D_c))
    p["context.in_b"] = _zeros(cfg.D_c)
    D, Fd = cfg.D_c, cfg.ff_dim
    for l in range(cfg.context_layers):
        pre = f"context.{l}"
        p[f"{pre}.ln1_g"], p[f"{pre}.ln1_b"] = _ones(D), _zeros(D)
        for w in ("q", "k", "v", "o"):
            p[f"{pre}.w{w}"] = _uniform(rng, 1 / np.sqrt(D), (D, D))
            p[f"{pre}.b{w}"] = _zeros(D)
        p[f"{pre}.ln2_g"], p[f"{pre}.ln2_b"] = _ones(D), _zeros(D)
        p[f"{pre}.ff1_w"] = _uniform(rng, 1 / np.sqrt(D), (D, Fd))
        p[f"{pre}.ff1_b"] = _zeros(Fd)
        p[f"{pre}.ff2_w"] = _uniform(rng, 1 / np.sqrt(Fd), (Fd, D))
        p[f"{pre}.ff2_b"] = _zeros(D)
    p["context.lnf_g"], p["context.lnf_b"] = _ones(D), _zeros(D)
    p["compare.w"] = _uniform(rng, 1 / np.sqrt(D), (D, cfg.G * cfg.K))
    p["compare.b"] = _zeros(cfg.G * cfg.K)
    cb = init_codebook(cfg.quantizer, cfg.G, cfg.V, cfg.K, cfg.D_e, rng, cfg.logit_init)
    p["quantizer.codes"] = cb.codes
    if cb.logit_w is not None:
        p["quantizer.logit_w"] = cb.logit_w
        p["quantizer.logit_b"] = cb.logit_b
    d_in = cfg.G * cfg.K
    for l in range(cfg.consistency_layers):
        _lstm_params(p, f"consistency.{l}", d_in, cfg.D_e, rng)
        d_in = cfg.D_e
    p["consistency.out_w"] = _uniform(rng, 1 / np.sqrt(cfg.D_e), (cfg.D_e, cfg.F))
    p["consistency.out_b"] = _zeros(cfg.F)
    for name, t in p.items():
        t.name = name
    return ModelParams(p, cfg.quantizer)


# --- encoder f -------------------------------------------------------------

def lstm_stack(params, prefix: str, x, layers: int) -> Tensor:
    h = x
    for l in range(layers):
        h = tc.lstm(h, params[f"{prefix}.{l}.w_in"], params[f"{prefix}.{l}.w_rec"], params[f"{prefix}.{l}.bias"])
    return h


def encoder_forward(params, X, cfg: ModelConfig) -> Tensor:
    """``X`` is ``T x F`` (or ``B x T x F`` zero-padded at the end, which is
    exact for a causal LSTM). Output gradients are scaled on the way back."""
    h = lstm_stack(params, "encoder", X, cfg.encoder_layers)
    return tc.gradient_scale(h, cfg.encoder_grad_scale)


# --- masking ---------------------------------------------------------------

@dataclass
class MaskSpec:
    spans: list[tuple[int, int]]
    masked: np.ndarray  # sorted unique frame indices
    T: int

    def mask_vector(self) -> np.ndarray:
        m = np.zeros(self.T, dtype=bool)
        m[self.masked] = True
        return m


def max_mask_width(T: int, fraction: float) -> int:
    return max(1, int(np.floor(fraction * T)))


def sample_masks(T: int, cfg: ModelConfig, rng: np.random.Generator) -> MaskSpec:
    if T < 1:
        raise ValueError("cannot mask an empty sequence")
    n = cfg.mask_count
    wmax = max_mask_width(T, cfg.mask_fraction)
    starts = rng.integers(0, T, size=n)
    widths = rng.integers(1, wmax + 1, size=n)
    spans = []
    m = np.zeros(T, dtype=bool)
    for s, w in zip(starts.tolist(), widths.tolist()):
        w = min(w, T - s)
        spans.append((s, w))
        m[s:s + w] = True
    return MaskSpec(spans, np.flatnonzero(m), T)


def _check_spec(spec: MaskSpec, T: int) -> None:
    if spec.T != T or any(s < 0 or w < 1 or s + w > T for s, w in spec.spans):
        raise ValueError(f"mask spans {spec.spans} are invalid for T={T}")


def apply_masks(Z, spec: MaskSpec, mask_embedding) -> Tensor:
    Z = tc.as_tensor(Z)
    _check_spec(spec, Z.shape[0])
    if len(spec.masked) == 0:
        return Z
    return tc.replace_rows(Z, spec.mask_vector(), mask_embedding)


def apply_masks_batch(Zb, specs: list[MaskSpec], mask_embedding) -> Tensor:
    """Batched :func:`apply_masks` on a zero-padded ``B x T x D`` tensor."""
    Zb = tc.as_tensor(Zb)
    m = np.zeros(Zb.shape[:2], dtype=bool)
    for i, spec in enumerate(specs):
        _check_spec(spec, spec.T)
        m[i, :spec.T] = spec.mask_vector()
    if not m.any():
        return Zb
    return tc.replace_rows(Zb, m, mask_embedding)


# --- context network g -----------------------------------------------------

def sinusoidal_pe(T: int, D: int) -> np.ndarray:
    if D % 2:
        raise ConfigError(f"sinusoidal positional encoding needs even D, got {D}")
    pos = np.arange(T)[:, None]
    freq = 10000.0 ** (np.arange(0, D, 2) / D)
    pe = np.empty((T, D))
    pe[:, 0::2] = np.sin(pos / freq)
    pe[:, 1::2] = np.cos(pos / freq)
    return pe


_MASKED_SCORE = -1e30  # exp() of this underflows to exactly 0


def key_padding_bias(lengths, T: int) -> np.ndarray:
    """``B x 1 x 1 x T`` additive score bias hiding padded key frames."""
    valid = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    return np.where(valid, 0.0, _MASKED_SCORE)[:, None, None, :]


def self_attention(params, pre: str, x: Tensor, heads: int, key_bias: np.ndarray | None = None,
                   attn_out: list | None = None) -> Tensor:
    B, T, D = x.shape
    d = D // heads

    def proj(w):
        y = tc.linear(x, params[f"{pre}.w{w}"], params[f"{pre}.b{w}"])
        return tc.transpose(tc.reshape(y, (B, T, heads, d)), (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d))
    if key_bias is not None:
        scores = scores + key_bias
    attn = tc.softmax(scores, axis=-1)
    if attn_out is not None:
        attn_out.append(attn.data)
    ctx = tc.reshape(tc.transpose(tc.matmul(attn, v), (0, 2, 1, 3)), (B, T, D))
    return tc.linear(ctx, params[f"{pre}.wo"], params[f"{pre}.bo"])


def context_forward(params, Z_masked, cfg: ModelConfig, lengths=None, attn_out: list | None = None) -> Tensor:
    """Input projection, sinusoidal positions, pre-norm transformer layers
    with full self-attention, final layer norm.

    ``Z_masked`` is ``T x D_e`` or a zero-padded ``B x T x D_e`` batch with
    true ``lengths``; padded frames are hidden from attention, so each real
    frame sees exactly its own utterance.
    """
    Z_masked = tc.as_tensor(Z_masked)
    single = Z_masked.ndim == 2
    if single:
        Z_masked = tc.reshape(Z_masked, (1,) + Z_masked.shape)
    B, T, _ = Z_masked.shape
    bias = None
    if lengths is not None and min(lengths) < T:
        bias = key_padding_bias(lengths, T)
    x = tc.linear(Z_masked, params["context.in_w"], params["context.in_b"])
    if cfg.positional:
        x = x + sinusoidal_pe(T, cfg.D_c)
    for l in range(cfg.context_layers):
        pre = f"context.{l}"
        h = tc.layer_norm(x, params[f"{pre}.ln1_g"], params[f"{pre}.ln1_b"])
        x = x + self_attention(params, pre, h, cfg.heads, bias, attn_out)
        h = tc.layer_norm(x, params[f"{pre}.ln2_g"], params[f"{pre}.ln2_b"])
        h = tc.gelu(tc.linear(h, params[f"{pre}.ff1_w"], params[f"{pre}.ff1_b"]))
        x = x + tc.linear(h, params[f"{pre}.ff2_w"], params[f"{pre}.ff2_b"])
    out = tc.layer_norm(x, params["context.lnf_g"], params["context.lnf_b"])
    return tc.reshape(out, (T, cfg.D_c)) if single else out


def compare_project(params, C) -> Tensor:
    return tc.linear(C, params["compare.w"], params["compare.b"])


# --- consistency network r -------------------------------------------------

def consistency_forward(params, Z_hat, cfg: ModelConfig) -> Tensor:
    """``T x (G*K)`` (or padded ``B x T x (G*K)``) -> ``T x F`` reconstruction."""
    h = lstm_stack(params, "consistency", Z_hat, cfg.consistency_layers)
    return tc.linear(h, params["consistency.out_w"], params["consistency.out_b"])
