"""Fit the shared dark-count probability and misalignment error to the
published per-link QBERs and rates, and print the values to paste into
``starqkd.model``."""

import argparse
import json

from starqkd.security import calibrate_to_paper


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--method", choices=["minimax", "least_squares"], default="minimax")
    ap.add_argument("--nu", type=float, default=0.1)
    ap.add_argument("--json", action="store_true", help="print the full residual table as JSON")
    args = ap.parse_args()

    res = calibrate_to_paper(method=args.method, nu=args.nu)
    print(f"CALIBRATED_DARK_COUNT_PROB = {res.dark_count_prob:.4g}")
    print(f"CALIBRATED_MISALIGNMENT = {res.misalignment_error:.4g}")
    print(f"# method={res.method} converged={res.converged} objective={res.objective:.4g}")
    for name, r in res.residuals.items():
        print(f"# {name:>10}: mu={r['mu']:.2f} QBER {100 * r['qber_model']:.2f}% "
              f"(target {100 * r['qber_target']:.1f}%), rate {r['rate_model']:.0f} b/s "
              f"(target {r['rate_target']:.0f}, ratio {r['rate_ratio']:.2f})")
    if args.json:
        print(json.dumps(res.residuals, indent=2))


if __name__ == "__main__":
    main()
