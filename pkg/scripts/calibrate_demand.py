"""Sweep the spawn rate and report SPF congestion, AVTT and RSR on the default grid.

Used to pick the default ``demand_rate``: the rate should load the network
enough that static routing visibly congests without gridlocking it.

    python scripts/calibrate_demand.py --rates 2 4 6 8 10 --seeds 0..9
"""
import argparse

import numpy as np

from adaptnav.harness import ScenarioConfig, evaluate, make_scenario, mean_rsr, median_avtt


def seed_range(text: str) -> tuple[int, ...]:
    lo, _, hi = text.partition("..")
    return tuple(range(int(lo), int(hi) + 1)) if hi else (int(lo),)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rates", type=float, nargs="+", default=[2.0, 4.0, 6.0, 8.0, 10.0])
    ap.add_argument("--seeds", type=seed_range, default=seed_range("0..9"))
    ap.add_argument("--model", default="SPF", choices=["SPF", "SPFWR"])
    args = ap.parse_args()
    print(f"{'rate':>6} {'AVTT':>8} {'RSR':>7} {'congested':>10} {'dropped':>8}")
    for rate in args.rates:
        cfg = ScenarioConfig(model=args.model, demand_rate=rate, eval_seeds=args.seeds)
        reps = evaluate(make_scenario(cfg))
        cong = np.mean([r.mean_congested_fraction for r in reps])
        dropped = sum(r.dropped for r in reps)
        print(f"{rate:>6.1f} {median_avtt(reps):>8.2f} {mean_rsr(reps):>7.2f} {cong:>10.3f} {dropped:>8d}")


if __name__ == "__main__":
    main()
