"""Variant-grid training runs and their summaries (training smoke and the
utilization-ordering trend)."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .frontend import NormalizedCorpus
from .network import ModelConfig
from .training import VARIANTS, RunConfig, evaluate_codebook, read_metrics, train_loop


@dataclass
class RunSummary:
    variant: str
    seed: int
    steps: int
    L_m_first: float   # mean L_m over the first window of steps
    L_m_last: float    # mean L_m over the last window of steps
    drop: float        # 1 - last / first
    all_finite: bool
    skipped_steps: int
    joint_percent: float
    joint_used: int
    seconds: float

    def to_json(self) -> dict:
        return asdict(self)


def summarize_metrics(rows: list[dict], window: int = 20) -> tuple[float, float, bool]:
    lm = np.array([float(r["L_m"]) for r in rows])
    numeric = np.array([[float(v) for k, v in r.items() if k != "step"] for r in rows])
    return float(lm[:window].mean()), float(lm[-window:].mean()), bool(np.isfinite(numeric).all())


def run_variant(variant: str, seed: int, corpus: NormalizedCorpus, out_dir, steps: int = 500,
                model: ModelConfig | None = None, **run_kw) -> RunSummary:
    run = RunConfig.for_variant(variant, model=model, steps=steps, seed=seed, **run_kw)
    t0 = time.perf_counter()
    params, state = train_loop(run, corpus, out_dir, resume=False)
    ev = evaluate_codebook(params, run.model, corpus)
    secs = time.perf_counter() - t0  # training plus the utilization pass
    first, last, finite = summarize_metrics(read_metrics(Path(out_dir) / "metrics.csv"), run.metrics_window)
    return RunSummary(variant, seed, steps, first, last, 1.0 - last / first, finite and params.all_finite(),
                      len(state.skipped), ev.report.joint_percent, ev.report.joint_used, secs)


def run_grid(corpus: NormalizedCorpus, out_root, seeds=(0,), variants=tuple(VARIANTS), steps: int = 500,
             model: ModelConfig | None = None, progress=None, **run_kw) -> list[RunSummary]:
    """Train every (variant, seed) pair; a ``summary.json`` already present in
    a run directory is reused instead of retraining."""
    out = []
    for seed in seeds:
        for v in variants:
            d = Path(out_root) / f"{v}_seed{seed}"
            cached = d / "summary.json"
            if cached.exists():
                s = RunSummary(**json.loads(cached.read_text()))
                if s.steps == steps:
                    out.append(s)
                    continue
            s = run_variant(v, seed, corpus, d, steps, model, **run_kw)
            cached.write_text(json.dumps(s.to_json(), indent=2))
            out.append(s)
            if progress is not None:
                progress(s)
    return out


def utilization_ordering(summaries: list[RunSummary]) -> dict:
    """Per seed, check GS-wav2vec-C >= GS-wav2vec 2.0 and each GS variant >=
    its KM counterpart (joint utilization); majority over seeds decides."""
    by = {(s.variant, s.seed): s.joint_percent for s in summaries}
    seeds = sorted({s.seed for s in summaries})
    per_seed = {}
    for seed in seeds:
        u = {v: by[(v, seed)] for v in VARIANTS}
        per_seed[seed] = {
            "utilization": u,
            "C_GS>=w2v2_GS": u["w2vC-GS"] >= u["w2v2-GS"],
            "w2v2_GS>=w2v2_KM": u["w2v2-GS"] >= u["w2v2-KM"],
            "C_GS>=C_KM": u["w2vC-GS"] >= u["w2vC-KM"],
        }
        per_seed[seed]["all"] = all(v for k, v in per_seed[seed].items() if k != "utilization")
    held = sum(p["all"] for p in per_seed.values())
    return {"per_seed": per_seed, "seeds_holding": held, "majority": held * 2 > len(seeds)}
