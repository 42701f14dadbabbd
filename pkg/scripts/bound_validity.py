"""Run seeded Monte Carlo sessions on the three links and tabulate the
decoy bounds against the photon-number ground truth."""

import argparse
import time

from starqkd.model import deployed_links
from starqkd.security import operating_settings
from starqkd.session import run_session


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--n-pulses", type=int, default=10_000_000)
    ap.add_argument("--k", type=float, default=3.0, help="sigma multiplier for the check")
    args = ap.parse_args()

    print(f"{'link':>10} {'seed':>5} {'Q1L':>10} {'Q1 true':>10} {'e1U':>8} {'e1 true':>8} "
          f"{'R b/s':>8} {'ok':>3} {'s':>5}")
    failures = 0
    for link in deployed_links():
        st = operating_settings(link)
        for seed in range(args.seeds):
            t0 = time.perf_counter()
            r = run_session(link, st, args.n_pulses, seed)
            b = r.bounds
            ok = b.passed(args.k)
            failures += not ok
            print(f"{link.name:>10} {seed:>5} {b.q1_lower:10.3e} {b.q1_true:10.3e} {b.e1_upper:8.4f} "
                  f"{b.e1_true:8.4f} {r.estimate.rate_bps:8.0f} {'y' if ok else 'N':>3} "
                  f"{time.perf_counter() - t0:5.1f}")
    print(f"{failures} failing sessions")


if __name__ == "__main__":
    main()
