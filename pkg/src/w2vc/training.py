"""Optimisation loop, schedules, checkpoints, metrics and codebook evaluation."""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from functools import reduce
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .checkpoint import CHECKPOINT_MAGIC, ENCODER_MAGIC, read_container, write_container
from .frontend import NormalizedCorpus, frame_labels
from .losses import (LossBreakdown, consistency_loss, contrastive_loss, diversity_loss,
                     sample_negatives, total_loss)
from .network import (ConfigError, ModelConfig, ModelParams, apply_masks, compare_project,
                      consistency_forward, context_forward, encoder_forward, init_params,
                      sample_masks)
from .quantizer import (GUMBEL, KMEANS, collapse_probe, gumbel_logits, gumbel_tau, init_kmeans_from_samples,
                        nearest_codes, quantize, split_array, utilization)

log = logging.getLogger(__name__)

VARIANTS = {
    "w2v2-GS": (0, GUMBEL),
    "w2v2-KM": (0, KMEANS),
    "w2vC-GS": (1, GUMBEL),
    "w2vC-KM": (1, KMEANS),
}


class CompatibilityError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    variant: str = "w2vC-GS"
    steps: int = 500
    batch_size: int = 8
    lr_floor: float = 1e-7
    lr_peak: float = 2e-3
    warmup_steps: int = 50
    seed: int = 0
    checkpoint_every: int = 100
    metrics_window: int = 20
    grad_clip: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        gamma, quant = VARIANTS[self.variant]
        if self.model.gamma_consistency != gamma:
            raise ConfigError(
                f"variant={self.variant} requires gamma_consistency={gamma}, "
                f"got gamma_consistency={self.model.gamma_consistency}")
        if self.model.quantizer != quant:
            raise ConfigError(
                f"variant={self.variant} requires quantizer={quant}, got quantizer={self.model.quantizer}")

    @classmethod
    def for_variant(cls, variant: str, model: ModelConfig | None = None, **kw) -> "RunConfig":
        gamma, quant = VARIANTS[variant]
        model = (model or ModelConfig()).replace(gamma_consistency=gamma, quantizer=quant)
        return cls(model=model, variant=variant, **kw)

    @classmethod
    def paper_schedule(cls, **kw) -> "RunConfig":
        kw.setdefault("lr_floor", 1e-7)
        kw.setdefault("lr_peak", 5e-6)
        kw.setdefault("warmup_steps", 3000)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        model = ModelConfig(**d.pop("model"))
        return cls(model=model, **d)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.name != "model"]


def lr_schedule(step: int, cfg: RunConfig) -> float:
    """Linear warm-up from ``lr_floor`` to ``lr_peak``, then held."""
    if step >= cfg.warmup_steps:
        return cfg.lr_peak
    return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * step / cfg.warmup_steps


# --- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads: dict[str, np.ndarray], state: AdamState, rate: float) -> bool:
    """In-place Adam update; returns False (and changes nothing) if any
    gradient is non-finite."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            log.warning("non-finite gradient for %s; step skipped", name)
            return False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


# --- forward ---------------------------------------------------------------

def _mean(ts: list) -> tc.Tensor:
    return reduce(tc.add, ts) * (1.0 / len(ts))


@dataclass
class BatchOutput:
    losses: LossBreakdown
    indices: list[np.ndarray]


def batch_forward(params: ModelParams, cfg: ModelConfig, xs: list[np.ndarray],
                  rng: np.random.Generator, tau: float) -> BatchOutput:
    """Full loss on a batch of variable-length utterances.

    The causal LSTMs run on a zero-padded batch (padding sits after every
    real frame, so it cannot influence them); everything else runs per
    utterance. RNG draws per utterance: Gumbel noise, masks, negatives.
    """
    lengths = [len(x) for x in xs]
    Xb = np.zeros((len(xs), max(lengths), cfg.F))
    for i, x in enumerate(xs):
        Xb[i, :len(x)] = x
    Zb = encoder_forward(params, Xb, cfg)
    cb = params.codebook()
    L_ms, qs = [], []
    for i, T in enumerate(lengths):
        Z = Zb[i, :T]
        q = quantize(Z, cb, tau, rng, beta=cfg.beta, squared=cfg.kmeans_squared, input_norm=cfg.quantizer_norm)
        spec = sample_masks(T, cfg, rng)
        Zm = apply_masks(Z, spec, params["mask_embedding"])
        Cp = compare_project(params, context_forward(params, Zm, cfg))
        anchors = np.arange(T) if cfg.anchor_all_frames or len(spec.masked) == 0 else spec.masked
        neg = sample_negatives(T, anchors, cfg.n_negatives, rng)
        if len(neg.anchors):
            L_ms.append(contrastive_loss(Cp, q.z_hat, neg, cfg.kappa))
        qs.append(q)
    L_m = _mean(L_ms)
    L_d = L_k = L_c = None
    if cfg.quantizer == GUMBEL:
        weighted = [q.mean_probs * float(T) for T, q in zip(lengths, qs)]
        L_d = diversity_loss(reduce(tc.add, weighted) * (1.0 / sum(lengths)))
    else:
        L_k = _mean([q.codebook_loss for q in qs])
    if cfg.gamma_consistency:
        S = consistency_forward(params, tc.pad_stack([q.z_hat for q in qs]), cfg)
        L_c = _mean([consistency_loss(x, S[i, :len(x)]) for i, x in enumerate(xs)])
    return BatchOutput(total_loss(L_m, cfg, L_d=L_d, L_k=L_k, L_c=L_c), [q.indices for q in qs])


def encode_indices(params: ModelParams, cfg: ModelConfig, xs: list[np.ndarray]) -> list[np.ndarray]:
    """Deterministic code selection (no Gumbel noise) for each utterance."""
    with tc.no_grad():
        lengths = [len(x) for x in xs]
        Xb = np.zeros((len(xs), max(lengths), cfg.F))
        for i, x in enumerate(xs):
            Xb[i, :len(x)] = x
        Zb = encoder_forward(params, Xb, cfg).data
    cb = params.codebook()
    out = []
    for i, T in enumerate(lengths):
        groups = split_array(Zb[i, :T], cb.G)
        if cfg.quantizer == KMEANS:
            idx = [nearest_codes(z, cb.codes.data[g]) for g, z in enumerate(groups)]
        else:
            idx = [gumbel_logits(z, cb, g, cfg.quantizer_norm).argmax(axis=1) for g, z in enumerate(groups)]
        out.append(np.stack(idx, axis=1))
    return out


# --- state -----------------------------------------------------------------

@dataclass
class TrainState:
    step: int
    rng: np.random.Generator
    adam: AdamState
    kappa: float
    tau: float
    lr: float
    window: deque
    codes_initialized: bool = False
    skipped: list[int] = field(default_factory=list)


def init_state(run: RunConfig) -> tuple[ModelParams, TrainState]:
    rng = np.random.default_rng(run.seed)
    params = init_params(run.model, rng)
    m = run.model
    state = TrainState(0, rng, AdamState(), m.kappa, m.tau_start, lr_schedule(0, run),
                       deque(maxlen=run.metrics_window), codes_initialized=m.quantizer != KMEANS)
    return params, state


@dataclass
class StepResult:
    losses: LossBreakdown
    grad_norm: float
    accepted: bool


def train_step(xs: list[np.ndarray], params: ModelParams, state: TrainState, run: RunConfig) -> StepResult:
    if not xs:
        raise ValueError("empty batch")
    cfg = run.model
    state.lr = lr_schedule(state.step, run)
    state.tau = gumbel_tau(state.step, cfg.tau_start, cfg.tau_floor, cfg.tau_decay)
    if not state.codes_initialized:
        with tc.no_grad():
            Zb = encoder_forward(params, tc.pad_stack([tc.Tensor(x) for x in xs]), cfg).data
        z = np.concatenate([Zb[i, :len(x)] for i, x in enumerate(xs)])
        init_kmeans_from_samples(params.codebook(), z, state.rng)
        state.codes_initialized = True
    params.zero_grad()
    with tc.Graph() as graph:
        out = batch_forward(params, cfg, xs, state.rng, state.tau)
    if not math.isfinite(out.losses.L):
        raise tc.NumericError(f"non-finite loss from op '{graph.scan_nonfinite()}' at step {state.step}")
    tc.backprop(graph, out.losses.total)
    grads = {k: t.grad for k, t in params.items() if t.grad is not None}
    gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if run.grad_clip > 0 and gnorm > run.grad_clip:
        grads = {k: g * (run.grad_clip / gnorm) for k, g in grads.items()}
    accepted = adam_step(params, grads, state.adam, state.lr)
    if not accepted:
        state.skipped.append(state.step)
    elif not params.all_finite():
        raise tc.NumericError(f"parameters became non-finite at step {state.step}")
    state.window.append(np.concatenate(out.indices))
    state.step += 1
    return StepResult(out.losses, gnorm, accepted)


def next_batch(corpus: NormalizedCorpus, state: TrainState, run: RunConfig) -> list[np.ndarray]:
    n = len(corpus)
    ids = state.rng.choice(n, size=min(run.batch_size, n), replace=False)
    return [corpus[int(i)] for i in ids]


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, run: RunConfig, params: ModelParams, state: TrainState) -> None:
    rec: dict = {
        "run_config": run.to_dict(),
        "state": {
            "step": state.step, "adam_t": state.adam.t, "kappa": state.kappa, "tau": state.tau,
            "lr": state.lr, "codes_initialized": state.codes_initialized, "skipped": state.skipped,
            "rng": state.rng.bit_generator.state, "window_len": len(state.window),
        },
    }
    for k, t in params.items():
        rec[f"param/{k}"] = t.data
    for k in state.adam.m:
        rec[f"adam_m/{k}"] = state.adam.m[k]
        rec[f"adam_v/{k}"] = state.adam.v[k]
    for i, w in enumerate(state.window):
        rec[f"window/{i}"] = w
    write_container(path, CHECKPOINT_MAGIC, rec)


def load_checkpoint(path) -> tuple[RunConfig, ModelParams, TrainState]:
    rec = read_container(path, CHECKPOINT_MAGIC)
    run = RunConfig.from_dict(rec["run_config"])
    st = rec["state"]
    tensors = {k[6:]: tc.Tensor(v, requires_grad=True, name=k[6:]) for k, v in rec.items() if k.startswith("param/")}
    params = ModelParams(tensors, run.model.quantizer)
    adam = AdamState(t=st["adam_t"])
    for k, v in rec.items():
        if k.startswith("adam_m/"):
            adam.m[k[7:]] = v
        elif k.startswith("adam_v/"):
            adam.v[k[7:]] = v
    rng = np.random.default_rng()
    rng.bit_generator.state = st["rng"]
    window = deque((rec[f"window/{i}"] for i in range(st["window_len"])), maxlen=run.metrics_window)
    state = TrainState(st["step"], rng, adam, st["kappa"], st["tau"], st["lr"], window,
                       st["codes_initialized"], list(st["skipped"]))
    return run, params, state


def export_encoder(path, params: ModelParams, cfg: ModelConfig) -> None:
    """Encoder and context-network weights with a config header."""
    keep = ("encoder.", "context.", "compare.", "mask_embedding")
    rec: dict = {"config": cfg.to_dict()}
    for k, t in params.items():
        if k.startswith(keep):
            rec[k] = t.data
    write_container(path, ENCODER_MAGIC, rec)


def load_encoder(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    rec = read_container(path, ENCODER_MAGIC)
    cfg = ModelConfig(**rec.pop("config"))
    return cfg, rec


# --- metrics / loop --------------------------------------------------------

def metrics_header(G: int) -> list[str]:
    return (["step", "L", "L_m", "L_cb", "L_c", "lr", "tau"] + [f"used_g{g + 1}" for g in range(G)]
            + ["joint_used", "joint_percent", "grad_norm"])


def metrics_row(step: int, res: StepResult, state: TrainState, V: int) -> list[str]:
    rep = utilization(np.concatenate(list(state.window)), V)
    lb = res.losses
    vals = [lb.L, lb.L_m, lb.L_cb, lb.L_c, state.lr, state.tau]
    return ([str(step)] + [repr(float(v)) for v in vals] + [str(u) for u in rep.per_group_used]
            + [str(rep.joint_used), repr(rep.joint_percent), repr(res.grad_norm)])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _truncate_metrics(path: Path, step: int) -> None:
    lines = path.read_bytes().splitlines(keepends=True)
    keep = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(b",", 1)[0]) <= step]
    path.write_bytes(b"".join(keep))


def train_loop(run: RunConfig, corpus: NormalizedCorpus, out_dir, resume: bool = True,
               stop_at: int | None = None, progress=None) -> tuple[ModelParams, TrainState]:
    """Train for ``run.steps`` steps writing ``metrics.csv`` and checkpoints.

    An existing ``last.ckpt`` in ``out_dir`` is resumed from; metrics rows
    past that checkpoint are dropped and replayed. ``stop_at`` halts early
    (used to simulate an interruption).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if corpus.manifest.dim != run.model.F:
        raise CompatibilityError(f"corpus feature dim {corpus.manifest.dim} != model F={run.model.F}")
    metrics = out / "metrics.csv"
    last = out / "last.ckpt"
    if resume and last.exists():
        saved_run, params, state = load_checkpoint(last)
        if saved_run.to_dict() != run.to_dict():
            raise CompatibilityError(f"{last} was written with a different configuration")
        _truncate_metrics(metrics, state.step)
    else:
        params, state = init_state(run)
        with open(metrics, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(metrics_header(run.model.G))
    end = run.steps if stop_at is None else min(stop_at, run.steps)
    with open(metrics, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        while state.step < end:
            xs = next_batch(corpus, state, run)
            res = train_step(xs, params, state, run)
            writer.writerow(metrics_row(state.step, res, state, run.model.V))
            fh.flush()
            if progress is not None:
                progress(state.step, res)
            if run.checkpoint_every and state.step % run.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{state.step:06d}.ckpt", run, params, state)
                save_checkpoint(last, run, params, state)
    if state.step >= run.steps:
        save_checkpoint(out / "final.ckpt", run, params, state)
        save_checkpoint(last, run, params, state)
    return params, state


# --- evaluation ------------------------------------------------------------

@dataclass
class CodebookEvaluation:
    report: object
    collapse: dict | None
    indices: list[np.ndarray]

    def to_json(self) -> dict:
        d = self.report.to_json()
        if self.collapse is not None:
            d["collapse"] = self.collapse
        return d


def evaluate_codebook(params: ModelParams, cfg: ModelConfig, corpus: NormalizedCorpus,
                      batch: int = 16, bucket: int = 10) -> CodebookEvaluation:
    """Read-only pass over the corpus: joint utilization out of V^G plus
    collapse diagnostics against template labels when the corpus has them."""
    m = corpus.manifest
    if m.dim != cfg.F:
        raise CompatibilityError(f"checkpoint expects F={cfg.F}, corpus has dim {m.dim}")
    indices: list[np.ndarray] = []
    for s in range(0, len(corpus), batch):
        xs = [corpus[i] for i in range(s, min(s + batch, len(corpus)))]
        indices.extend(encode_indices(params, cfg, xs))
    flat = np.concatenate(indices)
    report = utilization(flat, cfg.V)
    collapse = None
    if m.templates is not None:
        labels = np.concatenate([frame_labels(m.load(i).values, m.templates) for i in range(len(corpus))])
        positions = np.concatenate([np.arange(len(ix)) for ix in indices])
        collapse = collapse_probe(flat, labels, positions, cfg.V, bucket)
    return CodebookEvaluation(report, collapse, indices)


# --- gradient verification -------------------------------------------------

def gradient_check(cfg: ModelConfig, seed: int = 0, T: int = 14, n_utts: int = 2, tol: float = 1e-4,
                   step: float = 1e-5, tau: float = 2.0) -> tc.GradCheckReport:
    """Finite-difference check of the full loss over every parameter on the
    differentiable path, with masks, negatives and Gumbel noise frozen."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    # lengths T, T-4, ... so the padded LSTM batch is exercised
    xs = [rng.standard_normal((T - 4 * i, cfg.F)) for i in range(n_utts)]
    if cfg.quantizer == KMEANS:
        # seed codes from a separate draw: a code sitting exactly on a frame
        # puts the unsquared k-means distance at its kink
        seed_x = rng.standard_normal((2, T, cfg.F))
        with tc.no_grad():
            Zb = encoder_forward(params, seed_x, cfg).data
        init_kmeans_from_samples(params.codebook(), Zb.reshape(-1, cfg.D_e), rng)
    draw_state = rng.bit_generator.state

    def f(_params):
        r = np.random.default_rng()
        r.bit_generator.state = draw_state
        return batch_forward(params, cfg, xs, r, tau).losses.total

    names = [k for k in params if cfg.gamma_consistency or not k.startswith("consistency.")]
    return tc.finite_diff_check(f, params.tensors, step=step, tol=tol, names=names)
