"""Mix frames from two CFO intervals, train on the mixture and test per source.

    python3 scripts/mixed_experiment.py --take 1500 1500 --out runs/mixed
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from capsamc import capsnet, dataio, evaluation, modsig, trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profiles", nargs=2, default=["toy2", "toy2_cfo"])
    ap.add_argument("--take", type=int, nargs=2, default=[1500, 1500])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    sources = []
    for i, (name, take) in enumerate(zip(args.profiles, args.take)):
        p = modsig.named_profile(name)
        frames = modsig.iter_generate(p, take, seed=args.seed + i)
        sources.append(dataio.write_dataset(frames, args.out / name, header={"name": name, "seed": args.seed + i}))
    merged = dataio.write_manifest(dataio.merge(sources, list(args.take), seed=args.seed), args.out / "mixed")
    data = dataio.load_arrays(merged)
    splits = dataio.split(data.labels, dataio.SplitSpec(seed=args.seed))
    schemes = tuple(dict.fromkeys(r.scheme for r in merged.records))
    net = capsnet.scaled_config(data.iq.shape[2], sorted(schemes, key=modsig.SCHEME_NAMES.index), seed=args.seed)
    cfg = trainer.TrainConfig(batch_size=50, max_epochs=args.epochs, augment="flip", seed=args.seed)
    best, _ = trainer.train(capsnet.build(net), data, splits, cfg, dataset_tag="mixed")

    results = [evaluation.evaluate(best, data, splits.test, "mixed_on_mixed")]
    origins = np.array([merged.records[i].origin for i in splits.test])
    for name in args.profiles:
        results.append(evaluation.evaluate(best, data, splits.test[origins == name], f"mixed_on_{name}"))
    evaluation.emit_report(results, args.out, tag="mix", seed=args.seed)
    for r in results:
        print(f"{r.tag}: {r.confusion.accuracy:.4f} over {r.confusion.total} frames")


if __name__ == "__main__":
    main()
