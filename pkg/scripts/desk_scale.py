"""Train and evaluate every method of one comparison, then print the improvement table.

    python scripts/desk_scale.py an --out runs/an            # SPF, SPFWR, QR, AN h=0/1/2
    python scripts/desk_scale.py hhan --out runs/hhan        # heavy profile: SPF, SPFWR, HHAN

Each method gets its own sub-directory with report.json, training_log.csv and,
for learned models, checkpoint.json.  Existing reports are reused, so an
interrupted sweep resumes where it stopped.
"""
import argparse
from pathlib import Path

from adaptnav.harness import RunReport, ScenarioConfig, compare, format_table, run_experiment

SUITES = {
    "an": (dict(), {"SPF": 0, "SPFWR": 0, "QR": 800, "AN-h0": 800, "AN-h1": 800, "AN-h2": 800}),
    "hhan": (dict(heavy_traffic=True), {"SPF": 0, "SPFWR": 0, "HHAN": 500}),
}


def seed_range(text: str) -> tuple[int, ...]:
    lo, _, hi = text.partition("..")
    return tuple(range(int(lo), int(hi) + 1)) if hi else (int(lo),)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("suite", choices=sorted(SUITES))
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", type=seed_range, default=seed_range("0..9"))
    ap.add_argument("--episodes", type=int, default=None, help="override training episodes")
    ap.add_argument("--only", nargs="*", default=None, help="subset of methods")
    args = ap.parse_args()

    profile, methods = SUITES[args.suite]
    reports = {}
    for model, episodes in methods.items():
        if args.only and model not in args.only:
            continue
        out = args.out / model
        if (out / "report.json").exists():
            reports[model] = RunReport.read_json(out / "report.json")
            print(f"{model}: reusing {out / 'report.json'}")
            continue
        n = episodes if args.episodes is None or episodes == 0 else args.episodes
        cfg = ScenarioConfig(model=model, train_episodes=n, eval_seeds=args.seeds, **profile)

        def progress(log, every=max(1, n // 20)):
            if (log.episode + 1) % every == 0:
                avtt = "n/a" if log.avtt is None else f"{log.avtt:.2f}"
                print(f"  {model} episode {log.episode + 1}/{n}  eps {log.epsilon:.3f}  "
                      f"avtt {avtt}  rsr {log.rsr:.1f}", flush=True)

        report, _ = run_experiment(cfg, out, callback=progress)
        reports[model] = report
        print(f"{model}: median AVTT {report.median_avtt:.2f}  RSR {report.mean_rsr:.2f}  "
              f"({report.wall_clock / 60:.1f} min)", flush=True)
    print()
    print(format_table(compare(reports)))


if __name__ == "__main__":
    main()
