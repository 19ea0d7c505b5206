"""Long-term comparison: unfiltered entropy minimization vs confidence-difference
selection on the default open-set scenario, over a few seeds.

    python runner.py [--seeds 0 1 2] [--rounds 50]
"""
import argparse
import os
import sys

from dotenv import load_dotenv

# Ensure src/ is on sys.path for local execution without install
BASE_DIR = os.path.dirname(os.path.abspath(__file__))
src_path = os.path.join(BASE_DIR, "src")
if src_path not in sys.path:
    sys.path.insert(0, src_path)

import pandas as pd

from open_tta.config import get_settings, load_experiment_config
from open_tta.experiment import run_adaptation
from open_tta.utils.logger import get_logger

STRATEGIES = ["all", "confidence_difference"]


def main() -> None:
    # Load env first
    load_dotenv(dotenv_path="env.txt", override=False)
    load_dotenv(override=False)

    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--rounds", type=int, default=50)
    parser.add_argument("--config", default=os.path.join(BASE_DIR, "configs", "long_term.yaml"))
    args = parser.parse_args()

    logger = get_logger("runner")
    settings = get_settings()

    rows = []
    for seed in args.seeds:
        for strategy in STRATEGIES:
            loaded = load_experiment_config(
                args.config,
                overrides=[f"adaptation.strategy.kind={strategy}", f"scenario.rounds={args.rounds}"],
                seed=seed,
            )
            out = os.path.join(settings.export_dir, "long_term", f"seed{seed}-{strategy}")
            bundle = run_adaptation(loaded, settings, out_dir=out, auto_pretrain=True)
            m = bundle.metrics
            rows.append(
                {
                    "seed": seed,
                    "strategy": strategy,
                    "round_1_error": m["error"]["round_1"],
                    "final_error": m["error"]["final_round"],
                    "precision": m["selection"]["pooled"]["precision"],
                    "auroc_conf_diff": m["ood"]["conf_diff"]["include_closed_wrong"]["final_round"].get("auroc"),
                    "auroc_msp": m["ood"]["msp"]["include_closed_wrong"]["final_round"].get("auroc"),
                }
            )
            logger.info(f"seed={seed} {strategy}: round1={rows[-1]['round_1_error']:.4f} final={rows[-1]['final_error']:.4f}")

    table = pd.DataFrame(rows)
    path = os.path.join(settings.export_dir, "long_term", "comparison.csv")
    table.to_csv(path, index=False)
    print(table.to_string(index=False))
    logger.info(f"Saved comparison table: {path}")


if __name__ == "__main__":
    main()
