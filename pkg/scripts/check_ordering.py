"""
Check an evaluation results.csv for the expected policy ordering:
- fixed_optimal at least as good as fixed, averaged over images
- oracle at least as good as fixed and fixed_optimal on every image
- starred variants never worse than their plain counterparts
Also summarizes how early the learned policy stops.
"""

import argparse
import logging
import sys
from pathlib import Path

import pandas as pd

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from tunefree_pnp.reporting import load_results, setting_label  # noqa: E402

logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
logger = logging.getLogger(__name__)

TOLERANCE_DB = 1e-4


def check_setting(frame: pd.DataFrame, label: str) -> list:
    """Violations of the ordering within one setting."""
    psnr = frame.pivot_table(index=["image_id", "seed"], columns="policy", values="psnr_db")
    problems = []

    def has(*names):
        return all(name in psnr.columns for name in names)

    if has("fixed", "fixed_optimal") and psnr["fixed_optimal"].mean() < psnr["fixed"].mean() - TOLERANCE_DB:
        problems.append(f"{label}: fixed_optimal mean {psnr['fixed_optimal'].mean():.2f} < fixed mean {psnr['fixed'].mean():.2f}")
    for other in ("fixed", "fixed_optimal"):
        if has("oracle", other):
            worse = psnr.index[psnr["oracle"] < psnr[other] - TOLERANCE_DB]
            for image_id, seed in worse:
                problems.append(f"{label}: oracle below {other} on {image_id} (seed {seed})")
    for name in ("fixed", "handcrafted", "fixed_optimal", "oracle", "learned"):
        if has(name, name + "*"):
            worse = psnr.index[psnr[name + "*"] < psnr[name] - TOLERANCE_DB]
            for image_id, seed in worse:
                problems.append(f"{label}: {name}* below {name} on {image_id} (seed {seed})")
    return problems


def main():
    parser = argparse.ArgumentParser(description="Check policy ordering in results.csv")
    parser.add_argument("results", type=Path, help="results.csv written by the eval subcommand")
    args = parser.parse_args()

    frame = load_results(args.results)
    frame["setting"] = frame.apply(setting_label, axis=1)

    print("=" * 60)
    print(f"Policy ordering check: {args.results}")
    print("=" * 60)
    violations = []
    for label, group in frame.groupby("setting", sort=False):
        means = group.groupby("policy", sort=False)["psnr_db"].mean()
        print(f"\n{label}")
        for policy, value in means.items():
            print(f"  {policy:<16} {value:8.2f} dB")
        violations.extend(check_setting(group, label))

    learned = frame[frame["policy"] == "learned"]
    if not learned.empty:
        print(f"\nlearned policy: mean {learned['iterations'].mean():.1f} iterations, "
              f"{(learned['iterations'] < 30).mean():.0%} of runs stopped before 30")

    print()
    if violations:
        for line in violations:
            logger.warning(line)
        print(f"❌ {len(violations)} ordering violations")
        return 1
    print("✅ Ordering holds")
    return 0


if __name__ == "__main__":
    sys.exit(main())
