"""Train on one CFO interval, test on a disjoint one, over several seeds.

    python3 scripts/shift_experiment.py --train toy2 --test toy2_cfo --seeds 0 1 2 --out runs/shift
"""
import argparse
import json
import logging
from pathlib import Path

import numpy as np

from capsamc import evaluation, modsig, trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", default="toy2")
    ap.add_argument("--test", default="toy2_cfo")
    ap.add_argument("--scale", type=int, default=None, help="frames per profile; default is the train profile's count")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--augment", default="flip", choices=trainer.AUGMENTATIONS)
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    a, b = modsig.named_profile(args.train), modsig.named_profile(args.test)
    scale = args.scale or a.count
    rows = []
    for seed in args.seeds:
        cfg = trainer.TrainConfig(batch_size=50, max_epochs=args.epochs, augment=args.augment, seed=seed)
        rep = evaluation.shift_experiment(a, b, scale, seed, train_config=cfg)
        evaluation.emit_report([rep.matched, rep.shifted], args.out, tag="shift", seed=seed)
        rows.append(rep.summary())
        print(f"seed {seed}: matched {rep.matched_accuracy:.4f}  shifted {rep.shifted_accuracy:.4f}  gap {rep.gap:.4f}")
    gaps = np.array([r["gap"] for r in rows])
    print(f"gap over {len(rows)} seeds: mean {gaps.mean():.4f}, min {gaps.min():.4f}")
    (args.out / "shift_summary.json").write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
