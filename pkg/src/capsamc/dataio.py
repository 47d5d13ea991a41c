"""On-disk datasets, splits, merging and import adapters.

A dataset directory holds three files:

``frames.bin``
    little-endian float32, interleaved ``I0 Q0 I1 Q1 ...``, frames back to back
``manifest.jsonl``
    one JSON record per frame: index, scheme, label, sps, rolloff, cfo,
    snr_db, seed, profile_tag, offset (bytes), samples, crc32, and for merged
    sets the ``blob`` path and ``origin`` of the frame
``dataset.json``
    header: format version, frame count, master seed, profile description
"""
from __future__ import annotations

import json
import logging
import math
import os
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .modsig import SCHEME_NAMES, ComplexSignal, ModulationScheme, SignalMeta, normalize_power

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
BLOB_NAME = "frames.bin"
MANIFEST_NAME = "manifest.jsonl"
HEADER_NAME = "dataset.json"
_SAMPLE = np.dtype("<f4")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class FrameRecord:
    index: int
    scheme: str
    label: int
    sps: int
    rolloff: float
    cfo: float
    snr_db: float
    seed: int
    profile_tag: str
    offset: int
    samples: int
    crc32: int
    blob: str | None = None
    origin: str | None = None

    @property
    def nbytes(self) -> int:
        return self.samples * 2 * _SAMPLE.itemsize

    def meta(self) -> SignalMeta:
        return SignalMeta(
            scheme=ModulationScheme.from_name(self.scheme),
            sps=self.sps,
            rolloff=self.rolloff,
            cfo=self.cfo,
            inband_snr_db=self.snr_db,
            rng_seed=self.seed,
            profile_tag=self.profile_tag,
        )

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "FrameRecord":
        return cls(**json.loads(line))


@dataclass
class Manifest:
    root: Path
    records: list[FrameRecord]
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def snr_db(self) -> np.ndarray:
        return np.array([r.snr_db for r in self.records])

    @property
    def name(self) -> str:
        return self.header.get("name") or self.root.name

    def blob_path(self, rec: FrameRecord) -> Path:
        if rec.blob is None:
            return self.root / BLOB_NAME
        p = Path(rec.blob)
        return p if p.is_absolute() else self.root / p

    def class_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in SCHEME_NAMES}
        for r in self.records:
            counts[r.scheme] += 1
        return counts


def _record_for(i: int, sig: ComplexSignal, offset: int, crc: int) -> FrameRecord:
    m = sig.meta
    return FrameRecord(
        index=i,
        scheme=m.scheme.label,
        label=int(m.scheme),
        sps=int(m.sps),
        rolloff=float(m.rolloff),
        cfo=float(m.cfo),
        snr_db=float(m.inband_snr_db),
        seed=int(m.rng_seed),
        profile_tag=m.profile_tag,
        offset=offset,
        samples=len(sig.samples),
        crc32=crc,
    )


def _interleave(samples: np.ndarray) -> np.ndarray:
    out = np.empty(2 * len(samples), dtype=_SAMPLE)
    out[0::2] = samples.real
    out[1::2] = samples.imag
    return out


def write_dataset(frames: Iterable[ComplexSignal], path, header: dict | None = None) -> Manifest:
    """Write frames to a dataset directory; on failure no partial files remain."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    blob, man = root / BLOB_NAME, root / MANIFEST_NAME
    records = []
    try:
        with open(blob, "wb") as fb, open(man, "w") as fm:
            offset = 0
            for i, sig in enumerate(frames):
                raw = _interleave(np.asarray(sig.samples)).tobytes()
                rec = _record_for(i, sig, offset, zlib.crc32(raw))
                fb.write(raw)
                fm.write(rec.to_json() + "\n")
                records.append(rec)
                offset += len(raw)
        if not records:
            raise DatasetError("refusing to write an empty dataset")
        head = {"format_version": FORMAT_VERSION, "count": len(records)}
        head.update(header or {})
        (root / HEADER_NAME).write_text(json.dumps(head, indent=2, sort_keys=True) + "\n")
    except BaseException:
        for p in (blob, man, root / HEADER_NAME):
            p.unlink(missing_ok=True)
        raise
    return Manifest(root, records, head)


def write_manifest(manifest: Manifest, path) -> Manifest:
    """Persist a manifest (e.g. a merged one) whose records point at existing blobs."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for rec in manifest.records:
        blob = manifest.blob_path(rec).resolve()
        records.append(replace(rec, blob=os.path.relpath(blob, root.resolve())))
    with open(root / MANIFEST_NAME, "w") as fm:
        for rec in records:
            fm.write(rec.to_json() + "\n")
    head = dict(manifest.header, format_version=FORMAT_VERSION, count=len(records))
    (root / HEADER_NAME).write_text(json.dumps(head, indent=2, sort_keys=True) + "\n")
    return Manifest(root, records, head)


def read_manifest(path) -> Manifest:
    """Metadata only; sample data is not touched."""
    root = Path(path)
    man = root / MANIFEST_NAME
    if not man.exists():
        raise DatasetError(f"{root}: no {MANIFEST_NAME}")
    header = {}
    if (root / HEADER_NAME).exists():
        header = json.loads((root / HEADER_NAME).read_text())
        if header.get("format_version") != FORMAT_VERSION:
            raise DatasetError(f"{root}: format version {header.get('format_version')}, expected {FORMAT_VERSION}")
    records = []
    with open(man) as fm:
        for n, line in enumerate(fm):
            if not line.strip():
                continue
            try:
                rec = FrameRecord.from_json(line)
            except (TypeError, json.JSONDecodeError) as exc:
                raise DatasetError(f"{man}:{n + 1}: bad record ({exc})") from None
            if not 0 <= rec.label < len(SCHEME_NAMES) or SCHEME_NAMES[rec.label] != rec.scheme:
                raise DatasetError(f"{man}:{n + 1}: label {rec.label} inconsistent with scheme {rec.scheme}")
            records.append(rec)
    if header and header.get("count") != len(records):
        raise DatasetError(f"{root}: header says {header.get('count')} frames, manifest has {len(records)}")
    return Manifest(root, records, header)


def _read_frame(fh, manifest: Manifest, rec: FrameRecord, verify: bool) -> ComplexSignal:
    fh.seek(rec.offset)
    raw = fh.read(rec.nbytes)
    if len(raw) != rec.nbytes:
        raise DatasetError(f"frame {rec.index}: blob truncated ({len(raw)} of {rec.nbytes} bytes)")
    if verify and zlib.crc32(raw) != rec.crc32:
        raise DatasetError(f"frame {rec.index}: checksum mismatch")
    flat = np.frombuffer(raw, dtype=_SAMPLE)
    samples = flat[0::2].astype(np.float32) + 1j * flat[1::2].astype(np.float32)
    return ComplexSignal(samples.astype(np.complex64), rec.meta())


def read_dataset(manifest: Manifest | str | os.PathLike, selection=None, verify: bool = True) -> Iterator[ComplexSignal]:
    """Yield frames lazily, in manifest order or in the order of ``selection``."""
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    order = range(len(manifest)) if selection is None else selection
    handles: dict[Path, object] = {}
    try:
        for i in order:
            rec = manifest.records[int(i)]
            path = manifest.blob_path(rec)
            if path not in handles:
                if not path.exists():
                    raise DatasetError(f"frame {rec.index}: blob {path} missing")
                handles[path] = open(path, "rb")
            yield _read_frame(handles[path], manifest, rec, verify)
    finally:
        for fh in handles.values():
            fh.close()


@dataclass
class FrameArrays:
    """Frames packed for the network: ``iq`` is ``(N, 2, L)`` float32."""

    iq: np.ndarray
    labels: np.ndarray
    snr_db: np.ndarray
    tags: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "FrameArrays":
        idx = np.asarray(idx, dtype=np.int64)
        tags = [self.tags[i] for i in idx] if self.tags else []
        return FrameArrays(self.iq[idx], self.labels[idx], self.snr_db[idx], tags)

    @classmethod
    def from_signals(cls, frames: Iterable[ComplexSignal]) -> "FrameArrays":
        frames = list(frames)
        if not frames:
            raise DatasetError("no frames")
        iq = np.empty((len(frames), 2, len(frames[0].samples)), dtype=np.float32)
        for i, f in enumerate(frames):
            if len(f.samples) != iq.shape[2]:
                raise DatasetError(f"frame {i} has {len(f.samples)} samples, expected {iq.shape[2]}")
            iq[i, 0] = f.samples.real
            iq[i, 1] = f.samples.imag
        labels = np.array([int(f.meta.scheme) for f in frames], dtype=np.int64)
        snr = np.array([f.meta.inband_snr_db for f in frames])
        return cls(iq, labels, snr, [f.meta.profile_tag for f in frames])

    def normalized(self) -> "FrameArrays":
        power = np.mean(self.iq.astype(np.float64) ** 2, axis=(1, 2)) * 2
        scale = (1.0 / np.sqrt(power)).astype(np.float32)
        return FrameArrays(self.iq * scale[:, None, None], self.labels, self.snr_db, self.tags)


def load_arrays(manifest: Manifest | str | os.PathLike, selection=None) -> FrameArrays:
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    return FrameArrays.from_signals(read_dataset(manifest, selection))


# -- splitting ---------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.70
    validation: float = 0.05
    test: float = 0.25
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.validation, self.test)
        if min(fr) < 0 or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
            raise ValueError(f"split fractions must be >= 0 and sum to 1, got {fr}")


@dataclass(frozen=True)
class Splits:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def _quota_table(counts: np.ndarray, fractions: np.ndarray, totals: np.ndarray) -> np.ndarray:
    """Integer (class x split) table with given row and column sums, each cell
    within 1 of ``count * fraction``; solved as a tiny integer program."""
    from scipy.optimize import Bounds, LinearConstraint, milp

    target = counts[:, None] * fractions[None, :]
    nc, ns = target.shape
    nvar = nc * ns
    lo = np.maximum(np.ceil(target - 1 - 1e-9), 0).ravel()
    hi = np.floor(target + 1 + 1e-9).ravel()
    # variables: cells x, then deviations d >= |x - target|
    a_rows = np.zeros((nc, 2 * nvar))
    a_cols = np.zeros((ns, 2 * nvar))
    for c in range(nc):
        a_rows[c, c * ns : (c + 1) * ns] = 1
    for s in range(ns):
        a_cols[s, s:nvar:ns] = 1
    dev_pos = np.hstack([np.eye(nvar), -np.eye(nvar)])   # x - d <= t
    dev_neg = np.hstack([-np.eye(nvar), -np.eye(nvar)])  # -x - d <= -t
    t = target.ravel()
    cons = [
        LinearConstraint(a_rows, counts, counts),
        LinearConstraint(a_cols, totals, totals),
        LinearConstraint(dev_pos, -np.inf, t),
        LinearConstraint(dev_neg, -np.inf, -t),
    ]
    c = np.concatenate([np.zeros(nvar), np.ones(nvar)])
    integrality = np.concatenate([np.ones(nvar), np.zeros(nvar)])
    res = milp(c, constraints=cons, integrality=integrality,
               bounds=Bounds(np.concatenate([lo, np.zeros(nvar)]), np.concatenate([hi, np.full(nvar, np.inf)])))
    if res.status != 0:
        return None
    return np.round(res.x[:nvar]).astype(int).reshape(nc, ns)


def split(manifest_or_labels, spec: SplitSpec = SplitSpec()) -> Splits:
    """Stratified, seeded train/validation/test partition.

    Split sizes are ``floor(N * validation)`` and ``floor(N * test)``; the
    remainder goes to training.  Per class, each split gets within one frame
    of its proportional share.
    """
    labels = manifest_or_labels.labels if isinstance(manifest_or_labels, Manifest) else np.asarray(manifest_or_labels)
    n = len(labels)
    n_val = math.floor(n * spec.validation + 1e-9)
    n_test = math.floor(n * spec.test + 1e-9)
    totals = np.array([n - n_val - n_test, n_val, n_test])
    classes = np.unique(labels)
    counts = np.array([(labels == c).sum() for c in classes])
    fractions = np.array([spec.train, spec.validation, spec.test])
    if np.any(counts < 3):
        log.warning("some classes have fewer frames than there are splits: %s",
                    {SCHEME_NAMES[c]: int(k) for c, k in zip(classes, counts) if k < 3})
    table = _quota_table(counts, fractions, totals)
    if table is None:
        log.warning("no stratified split within +-1 per class exists; falling back to an unstratified split")
        rng = np.random.Generator(np.random.PCG64(spec.seed))
        perm = rng.permutation(n)
        return Splits(np.sort(perm[: totals[0]]), np.sort(perm[totals[0] : totals[0] + n_val]),
                      np.sort(perm[totals[0] + n_val :]))
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    parts = [[], [], []]
    for c, row in zip(classes, table):
        idx = rng.permutation(np.flatnonzero(labels == c))
        a, b = row[0], row[0] + row[1]
        parts[0].append(idx[:a])
        parts[1].append(idx[a:b])
        parts[2].append(idx[b:])
    return Splits(*(np.sort(np.concatenate(p)).astype(np.int64) for p in parts))


# -- merging -------------------------------------------------------------------------

def merge(manifests: list[Manifest], take_counts: list[int | None], seed: int = 0, name: str = "mixed") -> Manifest:
    """Sub-sample each source without replacement and concatenate.

    ``None`` in ``take_counts`` takes everything in manifest order.  Each
    merged record keeps its metadata and gains ``blob`` (absolute path of its
    source blob) and ``origin`` (the source dataset's name).
    """
    if len(manifests) != len(take_counts):
        raise ValueError("one take count per manifest required")
    rng = np.random.Generator(np.random.PCG64(seed))
    records = []
    for m, take in zip(manifests, take_counts):
        avail = len(m)
        if take is None or take == avail:
            chosen = np.arange(avail)
        elif take > avail or take < 0:
            raise ValueError(f"cannot take {take} frames from {m.name}, which has {avail}")
        else:
            chosen = np.sort(rng.choice(avail, size=take, replace=False))
        for i in chosen:
            rec = m.records[i]
            records.append(replace(rec, index=len(records), blob=str(m.blob_path(rec).resolve()),
                                   origin=rec.origin or m.name))
    header = {"name": name, "seed": seed, "sources": [m.name for m in manifests],
              "take_counts": [len(m) if t is None else t for m, t in zip(manifests, take_counts)]}
    root = manifests[0].root if manifests else Path(".")
    return Manifest(root, records, header)


# -- import adapters -------------------------------------------------------------------

Adapter = Callable[..., Manifest]
ADAPTERS: dict[str, Adapter] = {}


def register_adapter(name: str):
    def deco(fn: Adapter) -> Adapter:
        ADAPTERS[name] = fn
        return fn
    return deco


@dataclass
class ImportResult:
    manifest: Manifest
    off_power: list[int]


POWER_TOLERANCE = 1e-3


def import_external(path, adapter_name: str, out=None, normalize: bool = False, **kwargs) -> ImportResult:
    """Convert an external archive through a registered adapter.

    Frames whose mean power is off unity by more than 1e-3 are reported in
    ``off_power``; with ``normalize`` they are rescaled and rewritten to ``out``.
    """
    if adapter_name not in ADAPTERS:
        raise DatasetError(f"unknown adapter {adapter_name!r}; available: {', '.join(sorted(ADAPTERS))}")
    manifest = ADAPTERS[adapter_name](Path(path), **kwargs)
    off = []
    for i, sig in enumerate(read_dataset(manifest)):
        if abs(sig.power - 1.0) > POWER_TOLERANCE:
            off.append(i)
    if normalize and off:
        if out is None:
            raise DatasetError("normalising an import needs an output directory")
        frames = (ComplexSignal(normalize_power(s.samples.astype(np.complex128)), s.meta) for s in read_dataset(manifest))
        manifest = write_dataset(frames, out, header=dict(manifest.header, imported_from=str(path), normalized=True))
    return ImportResult(manifest, off)


@register_adapter("raw")
def _raw_adapter(path: Path, **_) -> Manifest:
    """Interleaved little-endian float32 with a manifest, i.e. this package's own layout."""
    return read_manifest(path)


@register_adapter("cspb")
def _cspb_adapter(path: Path, **_) -> Manifest:
    # The public CSPB.ML.2018/2022 archives ship one binary file per signal
    # plus a truth table of (type, symbol period, CFO, roll-off, SNR).  A
    # converter reads each file into complex samples, builds SignalMeta from
    # the truth row and passes the frames to write_dataset.
    raise DatasetError(
        "the CSPB adapter is a stub: convert the archive with a truth-table reader "
        "and write_dataset(); see dataio._cspb_adapter"
    )
