"""Write the synthetic detection and class corpora to disk for use with the CLI."""

import argparse
from pathlib import Path

from coughscope import synthetic


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", type=Path, help="output directory")
    ap.add_argument("--frames", type=int, default=1000, help="labelled detection clips")
    ap.add_argument("--per-class", type=int, default=20, help="exemplars per class in the class corpus")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    det = synthetic.write_detection_corpus(args.out / "detection", args.frames, args.seed)
    cls = synthetic.write_class_corpus(args.out / "classes", args.per_class, args.seed + 1)
    print(f"detection manifest: {det}")
    print(f"class manifest:     {cls}")


if __name__ == "__main__":
    main()
