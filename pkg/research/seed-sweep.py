#!/usr/bin/env python3
"""Run the reference experiment over several seeds and tabulate the
reward-accuracy, convergence and extrapolation-weight comparisons."""

import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from aligndistil_lab.harness import (  # noqa: E402
    ExperimentSpec,
    convergence_summary,
    read_curve,
    run_experiment,
    steps_to_reach,
)
from aligndistil_lab.persistence import read_csv  # noqa: E402

SEEDS = [0, 1, 2, 3, 4]

STAGES = [
    "gen-data",
    "train-rm",
    "train-dpo",
    "train-reverse-dpo",
    "convergence-bench",
    "ablation",
]


def run_seed(base, seed):
    """Run one seed; return (seed, output dir, error)."""
    spec = base.with_changes(
        seed=seed,
        output_dir=str(base.output_dir / f"seed-{seed}"),
        stages=STAGES,
    )
    try:
        run_experiment(spec)
        return seed, spec.output_dir, None
    except Exception as e:
        return seed, spec.output_dir, str(e)


def summarize(out_dir):
    rows = read_csv(out_dir / "ablation" / "reward_accuracy.csv")
    accuracy = {row["reward"]: row for row in rows}
    extrapolation = read_csv(out_dir / "ablation" / "extrapolation.csv")
    curves = convergence_summary(out_dir)
    token = read_curve(out_dir / "convergence" / "token.csv")
    ours = read_curve(out_dir / "convergence" / "aligndistil.csv")
    halfway = None
    if token.size:
        halfway = steps_to_reach(ours, token[-1])
    constant = [row for row in extrapolation if row["teacher"] == "constant"]
    kls = [float(row["kl_to_dpo"]) for row in constant]
    return {
        "ctr_test": float(accuracy["contrastive"]["test_accuracy"]),
        "dpo_test": float(accuracy["dpo"]["test_accuracy"]),
        "auc": {name: s["auc"] for name, s in curves.items()},
        "reach": halfway,
        "steps": token.size,
        "kl_monotone": all(a <= b for a, b in zip(kls, kls[1:])),
    }


def main():
    config = sys.argv[1] if len(sys.argv) > 1 else None
    base = ExperimentSpec.load(config)

    print(f"Running {len(SEEDS)} seeds of '{base.name}'...")
    print("(This may take a while)\n")

    results = []
    errors = []

    with ThreadPoolExecutor(max_workers=len(SEEDS)) as executor:
        futures = {
            executor.submit(run_seed, base, seed): seed for seed in SEEDS
        }

        completed = 0
        for future in as_completed(futures):
            completed += 1
            seed, out_dir, error = future.result()
            if error:
                errors.append((seed, error))
            else:
                results.append((seed, summarize(out_dir)))

            sys.stdout.write(f"\rFinished {completed}/{len(SEEDS)} seeds")
            sys.stdout.flush()

    print("\n")
    results.sort()

    print("=== Reward accuracy (test) ===\n")
    print(f"{'Seed':<6} {'DPO':>8} {'Contrastive':>12}")
    print("-" * 28)
    for seed, s in results:
        print(f"{seed:<6} {s['dpo_test']:>8.3f} {s['ctr_test']:>12.3f}")
    wins = sum(s["ctr_test"] >= s["dpo_test"] for _, s in results)
    print(f"\nContrastive >= DPO on {wins}/{len(results)} seeds")

    print("\n\n=== Convergence (AUC of token-averaged reward) ===\n")
    print(f"{'Seed':<6} {'Sentence':>10} {'Token':>10} {'AlignDistil':>12}")
    print("-" * 42)
    ordered = 0
    fast = 0
    for seed, s in results:
        a = s["auc"]
        print(
            f"{seed:<6} {a['sentence']:>10.3f} {a['token']:>10.3f} "
            f"{a['aligndistil']:>12.3f}"
        )
        if a["aligndistil"] >= a["token"] >= a["sentence"]:
            ordered += 1
        if s["reach"] is not None and s["reach"] <= s["steps"] / 2:
            fast += 1
    print(f"\nAUC ordering holds on {ordered}/{len(results)} seeds")
    print(f"2x faster than token-level on {fast}/{len(results)} seeds")

    monotone = sum(s["kl_monotone"] for _, s in results)
    print(
        f"\nKL non-decreasing in weight on {monotone}/{len(results)} seeds"
    )

    if errors:
        print("\n\n=== Failed seeds ===\n")
        for seed, error in sorted(errors):
            print(f"{seed:<6} {error}")


if __name__ == "__main__":
    main()
