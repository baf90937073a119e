"""Train a few policies on CUBE at budget 5 and print their budget curves.

Runs in about a minute on one CPU core.
"""

import numpy as np
import torch

from afabench import harness

torch.set_num_threads(1)

METHODS = {
    "random": {},
    "pt_s": {},
    "gdfs": {"max_epochs": 20},
    "aaco": {"n_samples": 100},
}


def main():
    for method, overrides in METHODS.items():
        cfg = harness.ExperimentConfig("cube", method, 5, seeds=(0,), splits=(0,),
                                       method_config=overrides)
        cell = harness.run_cell(cfg, seed=0, split=0)
        curve = " ".join(f"{v:.3f}" for v in cell.curve)
        print(f"{method:8s} train {cell.train_seconds:5.1f}s  accuracy by step: {curve}")


if __name__ == "__main__":
    main()
