"""Desk-scale detector run: 1000 synthetic frames, 80/20 split, held-out frame metrics."""

import argparse
import logging

from coughscope.experiments import DetectorExperiment, run_detector_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--clips", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    r = run_detector_experiment(DetectorExperiment(n_clips=args.clips, epochs=args.epochs, seed=args.seed))
    print(f"accuracy {r['accuracy']:.3f}  TPR {r['tpr']:.3f}  FPR {r['fpr']:.4f}  "
          f"({r['n_test']} held-out frames, training {r['train_seconds']:.0f}s)")


if __name__ == "__main__":
    main()
