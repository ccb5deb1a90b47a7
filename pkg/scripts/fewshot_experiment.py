"""Desk-scale few-shot run: train on 3 pattern classes, test 5-way 5-shot episodes."""

import argparse
import logging

from coughscope.experiments import FewShotExperiment, run_fewshot_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--episodes-per-epoch", type=int, default=40)
    ap.add_argument("--test-episodes", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    exp = FewShotExperiment(epochs=args.epochs, episodes_per_epoch=args.episodes_per_epoch,
                            n_test_episodes=args.test_episodes, seed=args.seed)
    r = run_fewshot_experiment(exp)
    losses = " ".join(f"{x:.3f}" for x in r["epoch_losses"])
    print(f"top-1 {r['top1']:.3f} over {exp.n_test_episodes} episodes (training {r['train_seconds']:.0f}s)")
    print(f"epoch losses: {losses}")


if __name__ == "__main__":
    main()
