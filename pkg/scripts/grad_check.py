"""Finite-difference check of the full loss for both quantizers and both
gamma settings at toy dims, with per-parameter errors and timing.

    python3 scripts/grad_check.py --tol 1e-4
"""

import argparse
import time

from w2vc.network import ModelConfig
from w2vc.training import VARIANTS, gradient_check


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--tol", type=float, default=1e-4)
    ap.add_argument("--length", type=int, default=14)
    ap.add_argument("--verbose", action="store_true", help="print every parameter block")
    args = ap.parse_args()
    ok = True
    for variant, (gamma, quant) in VARIANTS.items():
        t0 = time.perf_counter()
        rep = gradient_check(ModelConfig.toy(quantizer=quant, gamma_consistency=gamma), T=args.length, tol=args.tol)
        ok &= rep.passed
        print(f"{variant:8s} max rel err {rep.max_rel_err:.2e} ({rep.worst_param}) "
              f"{'PASS' if rep.passed else 'FAIL'} {time.perf_counter() - t0:.1f}s", flush=True)
        if args.verbose or not rep.passed:
            for name, err in sorted(rep.per_param.items(), key=lambda kv: -kv[1]):
                print(f"    {name:32s} {err:.2e}")
    raise SystemExit(0 if ok else 3)


if __name__ == "__main__":
    main()
