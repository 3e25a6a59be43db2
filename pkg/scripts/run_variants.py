"""Train the four variants over several seeds on the synthetic corpus and
report the L_m drop and the joint-utilization ordering.

    python3 scripts/run_variants.py --seeds 0 1 2 --steps 500 --out runs/grid
"""

import argparse
import json
from pathlib import Path

from w2vc import frontend as fe
from w2vc.experiments import run_grid, utilization_ordering


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--corpus-seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/grid"))
    args = ap.parse_args()

    data = args.out / "corpus"
    if not (data / "manifest.jsonl").exists():
        fe.synth_corpus(data, seed=args.corpus_seed)
    corpus = fe.NormalizedCorpus(fe.load_manifest(data / "manifest.jsonl"))

    def show(s):
        print(f"{s.variant:8s} seed={s.seed} L_m {s.L_m_first:.3f} -> {s.L_m_last:.3f} "
              f"(drop {100 * s.drop:.1f}%) joint={s.joint_percent:.2f}% {s.seconds:.0f}s", flush=True)

    summaries = run_grid(corpus, args.out, seeds=args.seeds, steps=args.steps, progress=show)
    order = utilization_ordering(summaries)
    (args.out / "grid_summary.json").write_text(json.dumps(
        {"runs": [s.to_json() for s in summaries], "ordering": order}, indent=2, default=str))
    print(json.dumps(order, indent=2, default=str))


if __name__ == "__main__":
    main()
