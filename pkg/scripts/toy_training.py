"""Train the scaled network on a toy profile and report test accuracy.

    python3 scripts/toy_training.py --profile toy2 --out runs/toy2
    python3 scripts/toy_training.py --profile toy8 --epochs 30 --out runs/toy8
"""
import argparse
import json
import logging
import time
from pathlib import Path

from capsamc import capsnet, dataio, evaluation, modsig, trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profile", default="toy2", choices=sorted(modsig.toy_profiles()))
    ap.add_argument("--count", type=int, default=None, help="frames; default is the profile's count")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--batch-size", type=int, default=50)
    ap.add_argument("--learning-rate", type=float, default=0.01)
    ap.add_argument("--augment", default="flip", choices=trainer.AUGMENTATIONS)
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    start = time.process_time()
    profile = modsig.named_profile(args.profile)
    count = args.count or profile.count
    data = dataio.FrameArrays.from_signals(modsig.generate(profile, count, seed=args.seed))
    splits = dataio.split(data.labels, dataio.SplitSpec(seed=args.seed))
    net = capsnet.scaled_config(profile.length, profile.schemes, seed=args.seed)
    tcfg = trainer.TrainConfig(batch_size=args.batch_size, learning_rate=args.learning_rate,
                               max_epochs=args.epochs, augment=args.augment, seed=args.seed)
    best, report = trainer.train(capsnet.build(net), data, splits, tcfg, dataset_tag=profile.name)
    result = evaluation.evaluate(best, data, splits.test, f"{profile.name}_test")

    args.out.mkdir(parents=True, exist_ok=True)
    capsnet.save(best, args.out / "model.ckpt")
    evaluation.emit_report(result, args.out, tag="toy", seed=args.seed)
    (args.out / "train_report.json").write_text(json.dumps(report.reproducible(), indent=2) + "\n")
    cpu = time.process_time() - start
    print(f"{profile.name}: {count} frames, best epoch {report.best_epoch}, "
          f"test accuracy {result.confusion.accuracy:.4f}, {cpu / 60:.1f} cpu-min")


if __name__ == "__main__":
    main()
