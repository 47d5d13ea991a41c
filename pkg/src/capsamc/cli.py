"""Command-line front end.

``capsamc <command> [options]`` with commands generate, augment, train,
eval, shift, mix and inspect.  Every command that writes anything writes
into one run directory (``--out``) and leaves a ``config.txt`` there that
replays the run when passed back through ``--config``.

Config files hold ``key = value`` lines, keys being the long option names
with dashes or underscores.  Flags given on the command line win over the
file; repeatable options accumulate.

Exit status: 0 success, 1 runtime failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import capsnet, dataio, evaluation, modsig, trainer
from .capsnet import CheckpointError
from .dataio import DatasetError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
CONFIG_NAME = "config.txt"

log = logging.getLogger("capsamc")


class UsageError(Exception):
    """Bad flags, config or inputs; maps to exit status 2."""


class _validating:
    """Turn validation-type exceptions raised inside the block into UsageError."""

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if exc is not None and isinstance(exc, (ValueError, KeyError, DatasetError, CheckpointError, FileNotFoundError)):
            raise UsageError(str(exc).strip("'\"")) from exc
        return False


# -- config files --------------------------------------------------------------------

def parse_config_file(path) -> list[tuple[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    pairs = []
    for n, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{n}: expected 'key = value', got {raw!r}")
        pairs.append((key.strip().replace("_", "-"), value.strip()))
    return pairs


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _options(parser: argparse.ArgumentParser) -> dict[str, argparse.Action]:
    return {a.option_strings[0][2:]: a for a in parser._actions if a.option_strings and a.option_strings[0].startswith("--")}


def config_to_argv(pairs, parser: argparse.ArgumentParser) -> list[str]:
    opts = _options(parser)
    argv = []
    for key, value in pairs:
        action = opts.get(key)
        if action is None or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r} for '{parser.prog}'")
        if isinstance(action, argparse.BooleanOptionalAction):
            argv.append(f"--{key}" if parse_bool(value) else f"--no-{key}")
        elif action.nargs not in (None, "?"):
            argv += [f"--{key}", *value.split()]
        else:
            argv += [f"--{key}", value]
    return argv


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return " ".join(_format_value(v) for v in value)
    return str(value)


def write_config_snapshot(args, parser: argparse.ArgumentParser, out: Path) -> Path:
    """Resolved options as a config file that replays the run."""
    lines = [f"# capsamc {args.command}"]
    for key, action in _options(parser).items():
        if key in ("help", "config"):
            continue
        value = getattr(args, action.dest, None)
        if value is None:
            continue
        if isinstance(action, argparse._AppendAction):
            lines += [f"{key} = {_format_value(v)}" for v in value]
        else:
            lines.append(f"{key} = {_format_value(value)}")
    out.mkdir(parents=True, exist_ok=True)
    path = out / CONFIG_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


# -- value parsing ---------------------------------------------------------------------

def _parse_field(current, field_name: str, text: str):
    """Parse ``text`` into the type of ``current.<field_name>``."""
    fields = [f.name for f in dataclasses.fields(current)]
    if field_name not in fields:
        raise UsageError(f"{type(current).__name__} has no field {field_name!r}; fields: {', '.join(fields)}")
    default = getattr(current, field_name)
    parts = [p for p in text.replace(",", " ").split()]
    try:
        if isinstance(default, bool):
            return parse_bool(text)
        if isinstance(default, tuple):
            if default and isinstance(default[0], str):
                return tuple(parts)
            kind = int if default and isinstance(default[0], int) else float
            if len(parts) != len(default):
                raise ValueError(f"expected {len(default)} values")
            return tuple(kind(p) for p in parts)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise UsageError(f"{field_name}: cannot parse {text!r} ({exc})") from None


def _assignments(items) -> list[tuple[str, str]]:
    out = []
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"expected FIELD=VALUE, got {item!r}")
        out.append((key.strip(), value.strip()))
    return out


def resolve_profile(name: str, sets=None, strict: bool = False) -> modsig.DatasetProfile:
    with _validating():
        profile = modsig.named_profile(name, strict)
    changes = {}
    for key, value in _assignments(sets):
        changes[key] = _parse_field(profile, key, value)
    try:
        return profile.with_(**changes)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"profile {name}: {exc}") from None


def resolve_net_config(preset: str, length: int, classes, seed: int, sets=None) -> capsnet.NetworkConfig:
    """``paper`` keeps every size of the full network; ``scaled`` shrinks strides."""
    base = capsnet.NetworkConfig(input_length=length, class_names=tuple(classes), seed=seed)
    if preset == "scaled":
        base = capsnet.scaled_config(length, classes, seed=seed)
    d = dataclasses.asdict(base)
    for key, value in _assignments(sets):
        layer, dot, attr = key.partition(".")
        if dot:
            if layer not in ("feature", "branch_conv1", "branch_conv2") or attr not in ("kernel", "stride", "channels"):
                raise UsageError(f"unknown network setting {key!r}")
            try:
                d[layer][attr] = int(value)
            except ValueError:
                raise UsageError(f"{key}: not an integer: {value!r}") from None
        else:
            d[key] = _parse_field(base, key, value)
    try:
        cfg = capsnet.NetworkConfig.from_dict(d)
        cfg.shape_trace()
    except (ValueError, TypeError) as exc:
        raise UsageError(f"network config: {exc}") from None
    return cfg


def train_config_from(args) -> trainer.TrainConfig:
    try:
        return trainer.TrainConfig(
            batch_size=args.batch_size,
            learning_rate=args.learning_rate,
            momentum=args.momentum,
            max_epochs=args.max_epochs,
            lr_decay=args.lr_decay,
            lr_period=args.lr_period,
            early_stop_patience=args.patience,
            seed=args.seed,
            deterministic=args.deterministic,
            normalize_input=args.normalize_input,
            weight_decay=args.weight_decay,
            augment=args.augment,
        )
    except ValueError as exc:
        raise UsageError(f"training config: {exc}") from None


def _split_spec(args) -> dataio.SplitSpec:
    try:
        return dataio.SplitSpec(*args.split, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _open_manifest(path) -> dataio.Manifest:
    with _validating():
        return dataio.read_manifest(path)


def _present_classes(labels) -> tuple[str, ...]:
    return tuple(modsig.SCHEME_NAMES[c] for c in sorted(set(int(l) for l in labels)))


def _dump_json(obj, path: Path) -> None:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, np.generic):
            return clean(v.item())
        return v

    path.write_text(json.dumps(clean(obj), indent=2) + "\n")


# -- commands ----------------------------------------------------------------------------

def cmd_generate(args) -> int:
    profile = resolve_profile(args.profile, args.set, args.strict)
    count = profile.count if args.count is None else args.count
    if count < 1:
        raise UsageError("--count must be at least 1; an empty dataset is not written")
    manifest = dataio.write_dataset(
        modsig.iter_generate(profile, count, seed=args.seed),
        args.out,
        header={"name": profile.name, "seed": args.seed, "profile": dataclasses.asdict(profile)},
    )
    snr = manifest.snr_db
    print(f"wrote {len(manifest)} frames of {profile.length} samples to {args.out}")
    for name, n in manifest.class_counts().items():
        if name in profile.schemes:
            print(f"  {name:7s} {n}")
    print(f"  realised SNR {snr.min():.2f} .. {snr.max():.2f} dB")
    return EXIT_OK


def cmd_augment(args) -> int:
    lo, hi = args.target_range
    if lo > hi:
        raise UsageError(f"--target-range: empty interval [{lo}, {hi}]")
    source = _open_manifest(args.input)
    skipped = 0

    def frames():
        nonlocal skipped
        for i, sig in enumerate(dataio.read_dataset(source)):
            rng = modsig.frame_rng(modsig.frame_seed(args.seed, i))
            target = float(rng.uniform(lo, hi))
            if target >= sig.meta.inband_snr_db:
                skipped += 1
                log.warning("frame %d: target %.2f dB not below its label %.2f dB; left unchanged",
                            i, target, sig.meta.inband_snr_db)
                yield sig
                continue
            noisy = modsig.add_noise_to_snr(sig, target, rng)
            yield noisy.normalized()

    manifest = dataio.write_dataset(
        frames(), args.out,
        header={"name": f"{source.name}_aug", "seed": args.seed, "augmented_from": str(Path(args.input).resolve()),
                "target_range_db": [lo, hi]},
    )
    print(f"augmented {len(manifest) - skipped} of {len(manifest)} frames into {args.out}; "
          f"{skipped} left unchanged (target not below label)")
    return EXIT_OK


def _train_and_save(args, manifest: dataio.Manifest, out: Path, tag: str):
    with _validating():
        data = dataio.load_arrays(manifest)
    classes = tuple(args.classes) if args.classes else _present_classes(data.labels)
    net = resolve_net_config(args.net, data.iq.shape[2], classes, args.seed, args.net_set)
    tcfg = train_config_from(args)
    splits = _split_spec(args)
    with _validating():
        trainer.to_model_labels(net, data.labels)
        parts = dataio.split(data.labels, splits)
    model = capsnet.build(net)
    best, report = trainer.train(model, data, parts, tcfg, dataset_tag=tag, threads=args.threads)
    capsnet.save(best, out / "model.ckpt")
    (out / "train_log.txt").write_text("\n".join(report.log_lines()) + "\n")
    _dump_json({**report.reproducible(), "wall_time": report.wall_time}, out / "train_report.json")
    return best, data, parts, report


def cmd_train(args) -> int:
    manifest = _open_manifest(args.dataset)
    out = Path(args.out)
    best, data, parts, report = _train_and_save(args, manifest, out, manifest.name)
    acc, _ = trainer.evaluate_split(best, data, parts.test)
    print(f"best epoch {report.best_epoch}: validation {report.best_accuracy:.4f}, test {acc:.4f}")
    print(f"checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = _open_manifest(args.dataset)
    with _validating():
        model = capsnet.load(args.checkpoint)
        data = dataio.load_arrays(manifest)
        trainer.to_model_labels(model.config, data.labels)
    if data.iq.shape[2] != model.config.input_length:
        raise UsageError(f"frames have {data.iq.shape[2]} samples, model expects {model.config.input_length}")
    if args.subset == "all":
        idx = np.arange(len(data))
    else:
        idx = getattr(dataio.split(data.labels, _split_spec(args)), args.subset)
    result = evaluation.evaluate(model, data, idx, f"{manifest.name}_{args.subset}", args.bin_width)
    files = evaluation.emit_report(result, args.out, tag="eval", seed=args.seed, fmt=args.format)
    print(f"accuracy {result.confusion.accuracy:.4f} over {result.confusion.total} frames")
    for f in files:
        print(f"  {f}")
    return EXIT_OK


def cmd_shift(args) -> int:
    a = resolve_profile(args.train_profile, args.train_set, args.strict)
    b = resolve_profile(args.test_profile, args.test_set, args.strict)
    if not args.allow_overlap and modsig.cfo_overlap(a, b):
        raise UsageError(f"CFO intervals overlap: {a.name} {a.cfo_interval} vs {b.name} {b.cfo_interval} "
                         "(pass --allow-overlap to run anyway)")
    if a.length != b.length:
        raise UsageError("both profiles must produce frames of the same length")
    net = resolve_net_config(args.net, a.length, a.schemes, args.seed, args.net_set)
    rep = evaluation.shift_experiment(
        a, b, args.scale, args.seed, net, train_config_from(args),
        allow_overlap=args.allow_overlap, split_spec=_split_spec(args),
    )
    out = Path(args.out)
    evaluation.emit_report([rep.matched, rep.shifted], out, tag="shift", seed=args.seed, fmt=args.format)
    _dump_json(rep.summary(), out / f"shift_seed{args.seed}_summary.json")
    print(f"matched {rep.matched_accuracy:.4f}  shifted {rep.shifted_accuracy:.4f}  gap {rep.gap:.4f}")
    return EXIT_OK


def cmd_mix(args) -> int:
    if len(args.take) != len(args.datasets):
        raise UsageError("--take needs one count per dataset")
    sources = [_open_manifest(p) for p in args.datasets]
    with _validating():
        merged = dataio.merge(sources, list(args.take), seed=args.seed, name="mixed")
    out = Path(args.out)
    merged = dataio.write_manifest(merged, out / "mixed")
    best, data, parts, report = _train_and_save(args, merged, out, "mixed")
    result = evaluation.evaluate(best, data, parts.test, "mixed_on_mixed", args.bin_width)
    result.extra["reference_full_scale"] = evaluation.REFERENCE_ACCURACY["mixed_on_mixed"]
    evaluation.emit_report(result, out, tag="mix", seed=args.seed, fmt=args.format)
    print(f"mixture of {len(merged)} frames: test accuracy {result.confusion.accuracy:.4f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if not args.dataset and not args.checkpoint:
        raise UsageError("inspect needs --dataset and/or --checkpoint")
    if args.dataset:
        m = _open_manifest(args.dataset)
        snr = m.snr_db
        sps = [r.sps for r in m.records]
        cfo = [r.cfo for r in m.records]
        print(f"dataset {m.name}: {len(m)} frames")
        for name, n in m.class_counts().items():
            print(f"  {name:7s} {n}")
        print(f"  snr {snr.min():.2f} .. {snr.max():.2f} dB, sps {min(sps)} .. {max(sps)}, "
              f"cfo {min(cfo):.5f} .. {max(cfo):.5f}")
    if args.checkpoint:
        with _validating():
            model = capsnet.load(args.checkpoint)
        cfg = model.config
        print(f"checkpoint {args.checkpoint}: {model.param_count()} parameters, classes {', '.join(cfg.class_names)}")
        for name, shape in cfg.shape_trace():
            print(f"  {name:8s} {'x'.join(map(str, shape))}")
        if model.provenance:
            print(f"  provenance {json.dumps(model.provenance, sort_keys=True)}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="key = value file; command-line flags take precedence")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=out_required, help="run directory")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)


def _training(p: argparse.ArgumentParser) -> None:
    d = trainer.TrainConfig()
    p.add_argument("--net", choices=("paper", "scaled"), default="scaled")
    p.add_argument("--net-set", action="append", metavar="FIELD=VALUE",
                   help="network override, e.g. branch_conv2.stride=2 or capsule_width=16")
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--learning-rate", type=float, default=d.learning_rate)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--max-epochs", type=int, default=d.max_epochs)
    p.add_argument("--lr-decay", type=float, default=d.lr_decay)
    p.add_argument("--lr-period", type=int, default=d.lr_period)
    p.add_argument("--patience", type=int, default=d.early_stop_patience)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--augment", choices=trainer.AUGMENTATIONS, default=d.augment)
    p.add_argument("--normalize-input", action=argparse.BooleanOptionalAction, default=d.normalize_input)
    p.add_argument("--split", type=float, nargs=3, default=[0.70, 0.05, 0.25], metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--bin-width", type=float, default=1.0, help="SNR bin width in dB")
    p.add_argument("--format", choices=("csv", "lines"), default="csv", help="summary file format")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="capsamc", description="Capsule-network modulation classifier toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["generate"] = sub.add_parser("generate", help="synthesise a labelled dataset")
    _common(p)
    p.add_argument("--profile", default="ds1", help="ds1, ds2, toy2, toy2_cfo, toy8 or toy8_cfo")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--set", action="append", metavar="FIELD=VALUE", help="profile override, e.g. sps_range=2,8")
    p.add_argument("--strict", action=argparse.BooleanOptionalAction, default=False,
                   help="allow 1 sample/symbol in the built-in profiles")

    p = subs["augment"] = sub.add_parser("augment", help="add noise to lower each frame's SNR")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--target-range", type=float, nargs=2, required=True, metavar=("LO", "HI"))

    p = subs["train"] = sub.add_parser("train", help="train on a dataset")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--classes", nargs="+", default=None, help="default: schemes present in the dataset")
    _training(p)

    p = subs["eval"] = sub.add_parser("eval", help="confusion matrix and accuracy-vs-SNR of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--subset", choices=("test", "validation", "train", "all"), default="test")
    p.add_argument("--split", type=float, nargs=3, default=[0.70, 0.05, 0.25], metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--bin-width", type=float, default=1.0)
    p.add_argument("--format", choices=("csv", "lines"), default="csv")

    p = subs["shift"] = sub.add_parser("shift", help="train on one profile, test on another")
    _common(p)
    p.add_argument("--train-profile", default="ds1")
    p.add_argument("--test-profile", default="ds2")
    p.add_argument("--train-set", action="append", metavar="FIELD=VALUE")
    p.add_argument("--test-set", action="append", metavar="FIELD=VALUE")
    p.add_argument("--scale", type=int, default=800, help="frames generated per profile")
    p.add_argument("--allow-overlap", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--strict", action=argparse.BooleanOptionalAction, default=False)
    _training(p)

    p = subs["mix"] = sub.add_parser("mix", help="merge datasets, then train and evaluate on the mixture")
    _common(p)
    p.add_argument("--datasets", nargs="+", required=True)
    p.add_argument("--take", type=int, nargs="+", required=True)
    p.add_argument("--classes", nargs="+", default=None)
    _training(p)

    p = subs["inspect"] = sub.add_parser("inspect", help="summarise a dataset or checkpoint")
    _common(p, out_required=False)
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    return parser, subs


def _expand_config(argv: list[str], subs) -> list[str]:
    """Splice ``--config`` contents in right after the command name."""
    if not argv or argv[0] not in subs:
        return argv
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv[1:])
    if known.config is None:
        return argv
    return [argv[0], *config_to_argv(parse_config_file(known.config), subs[argv[0]]), *argv[1:]]


COMMANDS = {
    "generate": cmd_generate,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "shift": cmd_shift,
    "mix": cmd_mix,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser, subs = build_parser()
    try:
        argv = _expand_config(argv, subs)
    except UsageError as exc:
        print(f"capsamc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    sp = subs[args.command]
    try:
        with trainer._blas_limit(1 if args.deterministic else args.threads):
            if args.out is not None:
                write_config_snapshot(args, sp, Path(args.out))
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"capsamc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - top-level report
        log.debug("failure", exc_info=True)
        print(f"capsamc {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
