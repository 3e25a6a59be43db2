"""Product vector quantization: Gumbel-softmax and k-means (straight-through)
selection over G codebooks, plus codebook-utilization and collapse probes."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor

GUMBEL = "gumbel"
KMEANS = "kmeans"


class QuantizerConfigError(ValueError):
    pass


@dataclass
class Codebook:
    """``codes`` is ``G x V x K``. Gumbel codebooks also carry a per-group
    logit projection ``logit_w`` (``G x D_e/G x V``) and ``logit_b`` (``G x V``)."""

    variant: str
    codes: Tensor
    logit_w: Tensor | None = None
    logit_b: Tensor | None = None

    def __post_init__(self):
        if self.variant not in (GUMBEL, KMEANS):
            raise QuantizerConfigError(f"unknown quantizer variant {self.variant!r}")
        if self.variant == GUMBEL and (self.logit_w is None or self.logit_b is None):
            raise QuantizerConfigError("gumbel codebook needs logit projection weights")
        if not np.isfinite(self.codes.data).all():
            raise QuantizerConfigError("codebook holds non-finite codes")

    @property
    def G(self) -> int:
        return self.codes.shape[0]

    @property
    def V(self) -> int:
        return self.codes.shape[1]

    @property
    def K(self) -> int:
        return self.codes.shape[2]

    @property
    def out_dim(self) -> int:
        return self.G * self.K


def init_codebook(variant: str, G: int, V: int, K: int, d_in: int, rng: np.random.Generator,
                  logit_init: str = "uniform") -> Codebook:
    """Codes from U(+-1/sqrt(K)). Gumbel logit weights come from the same
    uniform or, with ``logit_init="normal"``, from N(0, 1) (pair that with
    ``input_norm`` in :func:`quantize` so logits start at unit-ish scale)."""
    if d_in % G:
        raise QuantizerConfigError(f"encoder width {d_in} is not divisible by G={G}")
    if variant == KMEANS and d_in // G != K:
        raise QuantizerConfigError(f"k-means needs D_e/G == K, got {d_in}/{G} != {K}")
    bound = 1.0 / np.sqrt(K)
    codes = Tensor(rng.uniform(-bound, bound, (G, V, K)), requires_grad=True)
    if variant == KMEANS:
        return Codebook(variant, codes)
    split = d_in // G
    if logit_init == "normal":
        w = Tensor(rng.standard_normal((G, split, V)), requires_grad=True)
    elif logit_init == "uniform":
        w = Tensor(rng.uniform(-bound, bound, (G, split, V)), requires_grad=True)
    else:
        raise QuantizerConfigError(f"logit_init must be 'uniform' or 'normal', got {logit_init!r}")
    b = Tensor(np.zeros((G, V)), requires_grad=True)
    return Codebook(variant, codes, w, b)


def init_kmeans_from_samples(cb: Codebook, z: np.ndarray, rng: np.random.Generator) -> None:
    """Seed each group's codes with encoder outputs drawn from ``z`` (``N x D_e``)."""
    groups = split_array(z, cb.G)
    for g, zg in enumerate(groups):
        pick = rng.choice(len(zg), size=cb.V, replace=len(zg) < cb.V)
        cb.codes.data[g] = zg[pick]


@dataclass
class QuantizerOutput:
    z_hat: Tensor                 # T x (G*K)
    indices: np.ndarray           # T x G
    probs: np.ndarray | None      # T x G x V selection distributions (gumbel)
    codebook_loss: Tensor | None  # L_k (k-means only)
    mean_probs: Tensor            # G x V


@dataclass
class UtilizationReport:
    per_group_used: list[int]
    joint_used: int
    joint_capacity: int
    frames: int

    @property
    def joint_percent(self) -> float:
        return 100.0 * self.joint_used / self.joint_capacity

    def to_json(self) -> dict:
        return {
            "per_group_used": self.per_group_used,
            "joint_used": self.joint_used,
            "joint_capacity": self.joint_capacity,
            "joint_percent": self.joint_percent,
            "frames": self.frames,
        }


def split_array(z: np.ndarray, G: int) -> list[np.ndarray]:
    if z.shape[-1] % G:
        raise QuantizerConfigError(f"width {z.shape[-1]} is not divisible by G={G}")
    w = z.shape[-1] // G
    return [z[..., g * w:(g + 1) * w] for g in range(G)]


def split(z: Tensor, G: int) -> list[Tensor]:
    z = tc.as_tensor(z)
    if z.shape[-1] % G:
        raise QuantizerConfigError(f"width {z.shape[-1]} is not divisible by G={G}")
    if G == 1:
        return [z]
    w = z.shape[-1] // G
    return [z[:, g * w:(g + 1) * w] for g in range(G)]


def nearest_codes(z: np.ndarray, codes: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Index of the closest code per row; ties go to the lowest index."""
    out = np.empty(len(z), dtype=np.int64)
    for s in range(0, len(z), chunk):
        d = ((z[s:s + chunk, None, :] - codes[None]) ** 2).sum(-1)
        out[s:s + chunk] = d.argmin(axis=1)
    return out


def kmeans_select(z_i: Tensor, codes_i: Tensor) -> tuple[np.ndarray, Tensor]:
    z_i, codes_i = tc.as_tensor(z_i), tc.as_tensor(codes_i)
    if z_i.shape[-1] != codes_i.shape[-1]:
        raise QuantizerConfigError(f"split width {z_i.shape[-1]} != code dim {codes_i.shape[-1]}")
    idx = tc.nondifferentiable(lambda: nearest_codes(z_i.data, codes_i.data))
    idx = np.asarray(idx, dtype=np.int64)
    return idx, codes_i[idx]


def kmeans_loss(z_i, z_hat_i, beta: float = 0.25, squared: bool = False) -> Tensor:
    """Codebook term (updates codes) plus beta-weighted commitment (updates z)."""
    z_i, z_hat_i = tc.as_tensor(z_i), tc.as_tensor(z_hat_i)
    if z_i.shape != z_hat_i.shape:
        raise tc.ShapeError(f"kmeans_loss shapes differ: {z_i.shape} vs {z_hat_i.shape}")

    def dist(d):
        return tc.sum_(tc.square(d), axis=-1) if squared else tc.l2_norm(d, axis=-1)

    codebook_term = tc.mean(dist(tc.stop_gradient(z_i) - z_hat_i))
    commit_term = tc.mean(dist(z_i - tc.stop_gradient(z_hat_i)))
    return codebook_term + beta * commit_term


def straight_through(z_i, z_hat_i) -> Tensor:
    return tc.straight_through(z_i, z_hat_i)


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    return -np.log(-np.log(u))


def gumbel_select(logits: Tensor, tau: float, rng: np.random.Generator | None = None,
                  hard: bool = True, noise: np.ndarray | None = None):
    """Returns ``(soft, selector, indices)``.

    ``selector`` is the one-hot at ``argmax(soft)`` in the forward pass with
    the soft distribution's gradient in the backward pass (``hard=True``), or
    ``soft`` itself (``hard=False``).
    """
    if not tau > 0:
        raise QuantizerConfigError(f"gumbel temperature must be positive, got {tau}")
    logits = tc.as_tensor(logits)
    if noise is None:
        noise = gumbel_noise(rng, logits.shape)
    soft = tc.softmax((logits + noise) * (1.0 / tau), axis=-1)
    idx = np.asarray(tc.nondifferentiable(lambda: soft.data.argmax(axis=-1)), dtype=np.int64)
    if not hard:
        return soft, soft, idx
    one_hot = np.zeros(soft.shape)
    one_hot[np.arange(len(idx)), idx] = 1.0
    return soft, tc.straight_through(soft, one_hot), idx


_NORM_EPS = 1e-5


def gumbel_tau(step: int, start: float = 2.0, floor: float = 0.5, decay: float = 0.999995) -> float:
    return max(floor, start * decay ** step)


def normalize_split(z):
    """Parameter-free layer norm over the last axis (array or Tensor)."""
    d = z.shape[-1]
    if isinstance(z, Tensor):
        return tc.layer_norm(z, np.ones(d), np.zeros(d), eps=_NORM_EPS)
    with tc.no_grad():
        return tc.layer_norm(np.asarray(z, dtype=np.float64), np.ones(d), np.zeros(d), eps=_NORM_EPS).data


def gumbel_logits(z_g, cb: Codebook, g: int, input_norm: bool = False):
    if input_norm:
        z_g = normalize_split(z_g)
    if isinstance(z_g, Tensor):
        return tc.linear(z_g, cb.logit_w[g], cb.logit_b[g])
    return z_g @ cb.logit_w.data[g] + cb.logit_b.data[g]


def quantize(Z: Tensor, cb: Codebook, tau: float = 2.0, rng: np.random.Generator | None = None,
             beta: float = 0.25, squared: bool = False, hard: bool = True,
             input_norm: bool = False) -> QuantizerOutput:
    Z = tc.as_tensor(Z)
    if Z.shape[-1] % cb.G:
        raise QuantizerConfigError(f"encoder width {Z.shape[-1]} is not divisible by G={cb.G}")
    T = Z.shape[0]
    parts, indices, mean_probs = [], [], []
    probs = np.empty((T, cb.G, cb.V)) if cb.variant == GUMBEL else None
    loss = None
    for g, z_g in enumerate(split(Z, cb.G)):
        codes_g = cb.codes[g]
        if cb.variant == KMEANS:
            idx, zq = kmeans_select(z_g, codes_g)
            term = kmeans_loss(z_g, zq, beta, squared)
            loss = term if loss is None else loss + term
            parts.append(tc.straight_through(z_g, zq))
            one_hot = np.zeros((T, cb.V))
            one_hot[np.arange(T), idx] = 1.0
            mean_probs.append(Tensor(one_hot.mean(axis=0)))
        else:
            logits = gumbel_logits(z_g, cb, g, input_norm)
            soft, sel, idx = gumbel_select(logits, tau, rng, hard=hard)
            probs[:, g] = soft.data
            parts.append(tc.matmul(sel, codes_g))
            mean_probs.append(tc.mean(tc.softmax(logits, axis=-1), axis=0))
        indices.append(idx)
    z_hat = parts[0] if cb.G == 1 else tc.concat(parts, axis=-1)
    mp = tc.concat([tc.reshape(p, (1, cb.V)) for p in mean_probs], axis=0)
    return QuantizerOutput(z_hat, np.stack(indices, axis=1), probs, loss, mp)


# --- diagnostics -----------------------------------------------------------

def utilization(indices, V: int) -> UtilizationReport:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1:
        idx = idx[:, None]
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise ValueError("code index out of range")
    G = idx.shape[1]
    per_group = [int(len(np.unique(idx[:, g]))) for g in range(G)]
    joint = int(len(np.unique(idx, axis=0))) if len(idx) else 0
    return UtilizationReport(per_group, joint, V ** G, len(idx))


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def mutual_information(a, b) -> float:
    """Plug-in mutual information (nats) between two discrete sequences."""
    a, b = np.asarray(a), np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    return max(0.0, _entropy(joint.sum(1)) + _entropy(joint.sum(0)) - _entropy(joint.ravel()))


def joint_ids(indices, V: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1:
        return idx
    return np.ravel_multi_index(idx.T, (V,) * idx.shape[1])


def collapse_probe(indices, frame_labels, positions, V: int, bucket: int = 10) -> dict:
    """Mutual information of the joint code with phone label and with frame
    position bucket; flags VAD-like (<= 2G codes in use) and temporal
    (position explains more than phonetic content) collapse."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1:
        idx = idx[:, None]
    codes = joint_ids(idx, V)
    buckets = np.asarray(positions, dtype=np.int64) // bucket
    labels = np.asarray(frame_labels)
    label_mi = mutual_information(codes, labels)
    pos_mi = mutual_information(codes, buckets)
    used = int(len(np.unique(codes)))
    return {
        "label_mi": label_mi,
        "position_mi": pos_mi,
        "label_entropy": _entropy(np.unique(labels, return_counts=True)[1].astype(float)),
        "position_entropy": _entropy(np.unique(buckets, return_counts=True)[1].astype(float)),
        "joint_used": used,
        "vad_like": used <= 2 * idx.shape[1],
        "temporal": pos_mi > label_mi,
    }


def export_codebook_csv(codes: np.ndarray, path) -> None:
    codes = np.asarray(codes)
    G, V, K = codes.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "code"] + [f"v{k}" for k in range(K)])
        for g in range(G):
            for v in range(V):
                w.writerow([g, v] + [repr(float(x)) for x in codes[g, v]])


def export_indices_csv(streams, path) -> None:
    """``streams`` yields ``(utterance_id, indices[T x G])``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header_written = False
        for utt, idx in streams:
            idx = np.asarray(idx)
            if not header_written:
                w.writerow(["utterance", "frame"] + [f"id{g + 1}" for g in range(idx.shape[1])])
                header_written = True
            for t, row in enumerate(idx):
                w.writerow([utt, t] + [int(v) for v in row])
