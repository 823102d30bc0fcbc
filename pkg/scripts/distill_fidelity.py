"""Distill one shapes-task teacher into a fresh student from a single image; report argmax agreement."""

import argparse
from pathlib import Path

from daclab.datagen import AugConfig, OODSource, make_split_stream, shapes_dataset
from daclab.dcl import AdaptConfig, InitMessage, SCMessage, adapt, consolidate, initial_model
from daclab.eval import agreement
from daclab.losses import ConsolidationConfig
from daclab.models import ArchSpec

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--iterations", type=int, default=1500)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--source", default="single_image", choices=["single_image", "noise"])
    p.add_argument("--image", default=str(ROOT / "assets" / "structured.png"))
    p.add_argument("--crop-scale", type=float, nargs=2, default=(0.01, 0.3), metavar=("MIN", "MAX"))
    p.add_argument("--arch", default="smallcnn", choices=["smallcnn", "mlp"])
    args = p.parse_args()
    if args.arch == "smallcnn":
        arch = ArchSpec("smallcnn", (3, 16, 16), hidden=(8, 16), dense=64)
    else:
        arch = ArchSpec("mlp", (3, 16, 16), hidden=(128, 64))
    aug = AugConfig(crop_scale=tuple(args.crop_scale))
    cfg = ConsolidationConfig(lam=0.0, temperature=args.temperature, iterations=args.iterations, learning_rate=args.lr)
    source = OODSource.single_image(args.image) if args.source == "single_image" else OODSource.noise()
    print("seed,teacher_test_accuracy,agreement")
    for seed in args.seeds:
        stream = make_split_stream(shapes_dataset(seed, 30, 100, 16), 5, 6, seed)
        f0 = initial_model(arch, seed)
        teacher = adapt(InitMessage.from_model(f0, 1), stream[0], AdaptConfig(1000, learning_rate=3e-3), arch, seed)
        student = consolidate(f0, SCMessage.from_model(teacher.model), source, cfg, seed, aug).model
        print(f"{seed},{teacher.test_accuracy:.4f},{agreement(student, 1, teacher.model, 1, stream[0].test_x):.4f}", flush=True)


if __name__ == "__main__":
    main()
