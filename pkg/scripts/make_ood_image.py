"""Regenerate assets/structured.png, the single structured image used for consolidation."""

import argparse
from pathlib import Path

from daclab.datagen import save_image
from daclab.datagen.leaves import dead_leaves_image


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "assets" / "structured.png"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    args = p.parse_args()
    save_image(args.out, dead_leaves_image(args.seed, args.size))
    print(args.out)


if __name__ == "__main__":
    main()
