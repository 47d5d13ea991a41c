"""Synthetic complex-baseband I/Q frames for eight digital modulation schemes.

Linear schemes are Gray-mapped, zero-stuffed and shaped with a square-root
raised-cosine (SRRC) filter; MSK is generated directly as continuous-phase
FSK with modulation index 1/2.  Frames then get a carrier frequency offset
(CFO), white Gaussian noise at a labelled *in-band* SNR, and unit-power
normalisation.

In-band SNR is signal power over the noise power that falls inside the
occupied band, ``(1 + rolloff) / sps`` cycles/sample for linear schemes and
the ``1.5 / sps`` main lobe for MSK (both capped at the full band).

Randomness is numpy's PCG64.  Frame ``i`` of a dataset with master seed
``s`` draws from ``PCG64(SeedSequence([s, i]))``, so any frame can be
regenerated on its own and generation can be split across workers.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np


class ModulationScheme(enum.IntEnum):
    BPSK = 0
    QPSK = 1
    PSK8 = 2
    DQPSK = 3
    MSK = 4
    QAM16 = 5
    QAM64 = 6
    QAM256 = 7

    @property
    def label(self) -> str:
        return SCHEME_NAMES[self]

    @classmethod
    def from_name(cls, name: str) -> "ModulationScheme":
        key = name.strip().upper().replace("-", "")
        for s in cls:
            if SCHEME_NAMES[s].replace("-", "") == key or s.name == key:
                return s
        raise ValueError(f"unknown modulation scheme {name!r}; known: {', '.join(SCHEME_NAMES)}")


SCHEME_NAMES = ("BPSK", "QPSK", "8PSK", "DQPSK", "MSK", "16QAM", "64QAM", "256QAM")
BITS_PER_SYMBOL = {
    ModulationScheme.BPSK: 1,
    ModulationScheme.QPSK: 2,
    ModulationScheme.PSK8: 3,
    ModulationScheme.DQPSK: 2,
    ModulationScheme.MSK: 1,
    ModulationScheme.QAM16: 4,
    ModulationScheme.QAM64: 6,
    ModulationScheme.QAM256: 8,
}
FRAME_LENGTH = 32768
ISI_TARGET = 5e-4
MIN_SPAN = 16
MAX_SPAN = 160


@dataclass(frozen=True)
class SignalMeta:
    scheme: ModulationScheme
    sps: int
    rolloff: float
    cfo: float
    inband_snr_db: float = math.inf
    rng_seed: int = 0
    profile_tag: str = ""

    def __post_init__(self):
        if not 0.1 <= self.rolloff <= 1.0:
            raise ValueError(f"rolloff {self.rolloff} outside [0.1, 1.0]")
        if self.sps < 1:
            raise ValueError(f"sps must be >= 1, got {self.sps}")
        if not abs(self.cfo) < 0.5:
            raise ValueError(f"|cfo| must be < 0.5 cycles/sample, got {self.cfo}")

    @property
    def label(self) -> int:
        return int(self.scheme)


@dataclass
class ComplexSignal:
    samples: np.ndarray
    meta: SignalMeta

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))

    def normalized(self) -> "ComplexSignal":
        return ComplexSignal(normalize_power(self.samples), self.meta)


@dataclass(frozen=True)
class DatasetProfile:
    """Parameter envelope for one dataset family; all intervals are closed."""

    name: str
    sps_range: tuple[int, int]
    snr_range_db: tuple[float, float]
    cfo_interval: tuple[float, float]
    rolloff_range: tuple[float, float] = (0.1, 1.0)
    count: int = 800
    length: int = FRAME_LENGTH
    schemes: tuple[str, ...] = SCHEME_NAMES
    pi4_dqpsk: bool = True

    def __post_init__(self):
        for fname in ("sps_range", "snr_range_db", "cfo_interval", "rolloff_range"):
            lo, hi = getattr(self, fname)
            if lo > hi:
                raise ValueError(f"{fname}: empty interval [{lo}, {hi}]")
        if self.sps_range[0] < 1:
            raise ValueError("sps_range: samples per symbol must be >= 1")
        lo, hi = self.rolloff_range
        if lo < 0.1 or hi > 1.0:
            raise ValueError("rolloff_range must lie inside [0.1, 1.0]")
        if not (abs(self.cfo_interval[0]) < 0.5 and abs(self.cfo_interval[1]) < 0.5):
            raise ValueError("cfo_interval must lie inside (-0.5, 0.5)")
        if self.count < 0 or self.length < 1:
            raise ValueError("count must be >= 0 and length >= 1")
        if not self.schemes:
            raise ValueError("schemes: at least one scheme required")
        object.__setattr__(self, "schemes", tuple(ModulationScheme.from_name(s).label for s in self.schemes))

    def scheme_members(self) -> list[ModulationScheme]:
        return [ModulationScheme.from_name(s) for s in self.schemes]

    def with_(self, **changes) -> "DatasetProfile":
        return replace(self, **changes)


def cfo_overlap(a: DatasetProfile, b: DatasetProfile) -> bool:
    return max(a.cfo_interval[0], b.cfo_interval[0]) <= min(a.cfo_interval[1], b.cfo_interval[1])


def check_disjoint_cfo(a: DatasetProfile, b: DatasetProfile) -> None:
    if cfo_overlap(a, b):
        raise ValueError(
            f"CFO intervals overlap: {a.name} {a.cfo_interval} vs {b.name} {b.cfo_interval}"
        )


def builtin_profiles(strict: bool = False) -> dict[str, DatasetProfile]:
    """Envelopes modelled on the two public datasets.

    CFO intervals are placeholders chosen only to be disjoint.  ``strict``
    restores the 1 samples/symbol lower bound, which is excluded by default
    because an sps of 1 leaves no room for pulse shaping.
    """
    low = 1 if strict else 2
    return {
        "ds1": DatasetProfile("ds1", (low, 23), (0.0, 12.0), (-0.001, 0.001)),
        "ds2": DatasetProfile("ds2", (low, 29), (1.0, 18.0), (0.005, 0.015)),
    }


TOY_LENGTH = 4096


def toy_profiles() -> dict[str, DatasetProfile]:
    """Desk-scale envelopes on 4096-sample frames.

    The matched profiles have zero CFO: with any drifting carrier phase the
    network needs far more frames than a desk run can afford before it finds
    phase-invariant cues.  The ``_cfo`` variants carry the second dataset's
    CFO interval and serve as shifted test sets.
    """
    two = ("BPSK", "QPSK")
    return {
        "toy2": DatasetProfile("toy2", (2, 8), (10.0, 14.0), (0.0, 0.0), count=3000, length=TOY_LENGTH, schemes=two),
        "toy2_cfo": DatasetProfile("toy2_cfo", (2, 8), (10.0, 14.0), (0.005, 0.015), count=3000, length=TOY_LENGTH,
                                   schemes=two),
        "toy8": DatasetProfile("toy8", (2, 8), (8.0, 14.0), (0.0, 0.0), count=4000, length=TOY_LENGTH),
        "toy8_cfo": DatasetProfile("toy8_cfo", (2, 8), (8.0, 14.0), (0.005, 0.015), count=4000, length=TOY_LENGTH),
    }


def named_profile(name: str, strict: bool = False) -> DatasetProfile:
    table = {**builtin_profiles(strict), **toy_profiles()}
    if name not in table:
        raise KeyError(f"unknown profile {name!r}; choose from {', '.join(table)}")
    return table[name]


# -- helpers -------------------------------------------------------------------

def normalize_power(samples: np.ndarray) -> np.ndarray:
    p = np.mean(np.abs(samples) ** 2)
    if not p > 0:
        raise ValueError("cannot normalise an all-zero frame")
    return samples / np.sqrt(p)


def occupied_bandwidth(scheme: ModulationScheme, sps: int, rolloff: float) -> float:
    """Occupied band in cycles/sample, capped at 1."""
    bw = 1.5 / sps if scheme == ModulationScheme.MSK else (1.0 + rolloff) / sps
    return min(1.0, bw)


def frame_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def frame_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, np.uint64)[0])


# -- symbol mapping ------------------------------------------------------------

def _gray(n: np.ndarray) -> np.ndarray:
    return n ^ (n >> 1)


def _bits_to_ints(bits: np.ndarray, k: int) -> np.ndarray:
    weights = 1 << np.arange(k - 1, -1, -1)
    return bits.reshape(-1, k) @ weights


def constellation(scheme: ModulationScheme) -> np.ndarray:
    """Unit-average-power alphabet indexed by the integer value of the bit group."""
    k = BITS_PER_SYMBOL[scheme]
    if scheme in (ModulationScheme.BPSK, ModulationScheme.QPSK, ModulationScheme.PSK8):
        m = 1 << k
        pos = np.empty(m, dtype=int)
        pos[_gray(np.arange(m))] = np.arange(m)
        offset = np.pi / 4 if scheme == ModulationScheme.QPSK else 0.0
        return np.exp(1j * (2 * np.pi * pos / m + offset))
    if scheme in (ModulationScheme.QAM16, ModulationScheme.QAM64, ModulationScheme.QAM256):
        side = 1 << (k // 2)
        level = np.empty(side, dtype=int)
        level[_gray(np.arange(side))] = np.arange(side)
        amp = 2 * level - (side - 1)
        ints = np.arange(1 << k)
        i_part = amp[ints >> (k // 2)]
        q_part = amp[ints & (side - 1)]
        scale = np.sqrt(2 * (side * side - 1) / 3)
        return (i_part + 1j * q_part) / scale
    raise ValueError(f"{scheme.label} has no fixed memoryless constellation")


def dqpsk_increments(pi4: bool) -> np.ndarray:
    """Phase increments indexed by dibit value (Gray order 00, 01, 11, 10)."""
    base = np.array([0.0, 0.5, 1.5, 1.0]) * np.pi
    return base + np.pi / 4 if pi4 else base


def map_symbols(scheme: ModulationScheme, bits, *, pi4: bool = False) -> np.ndarray:
    """Gray-map a bit stream onto unit-power symbols.

    DQPSK emits ``s[k] = s[k-1] * exp(j * dphi[k])`` starting from a reference
    of 1; the reference itself is not emitted.
    """
    scheme = ModulationScheme(scheme)
    if scheme == ModulationScheme.MSK:
        raise ValueError("MSK is not a memoryless mapping; use msk_modulate")
    bits = np.asarray(bits, dtype=np.int64)
    k = BITS_PER_SYMBOL[scheme]
    if bits.size % k:
        raise ValueError(f"{scheme.label} needs a multiple of {k} bits, got {bits.size}")
    ints = _bits_to_ints(bits, k)
    if scheme == ModulationScheme.DQPSK:
        return np.exp(1j * np.cumsum(dqpsk_increments(pi4)[ints]))
    return constellation(scheme)[ints]


def dqpsk_decode(symbols: np.ndarray, reference: complex = 1.0, *, pi4: bool = False) -> np.ndarray:
    """Recover dibits from consecutive phase differences."""
    prev = np.concatenate([[reference], symbols[:-1]])
    dphi = np.angle(symbols * np.conj(prev))
    inc = dqpsk_increments(pi4)
    dist = np.abs(np.angle(np.exp(1j * (dphi[:, None] - inc[None, :]))))
    ints = np.argmin(dist, axis=1)
    return ((ints[:, None] >> np.array([1, 0])) & 1).reshape(-1)


# -- pulse shaping -------------------------------------------------------------

def srrc_taps(rolloff: float, sps: int, span_symbols: int | None = None) -> np.ndarray:
    """Unit-energy SRRC impulse response with ``span_symbols * sps + 1`` taps.

    The removable singularities at t = 0 and |t| = 1/(4*rolloff) take their
    analytic limits.  With ``span_symbols=None`` the span is the shortest even
    value >= 16 whose matched-filter ISI is below 5e-4 of the peak.
    """
    if not 0.1 <= rolloff <= 1.0:
        raise ValueError(f"rolloff {rolloff} outside [0.1, 1.0]")
    if sps < 1:
        raise ValueError(f"sps must be >= 1, got {sps}")
    if span_symbols is None:
        return _taps_for(rolloff, sps, default_span(rolloff, sps))
    if span_symbols < 2 or span_symbols % 2:
        raise ValueError(f"span must be a positive even number of symbols, got {span_symbols}")
    return _taps_for(rolloff, sps, span_symbols)


def _taps_for(beta: float, sps: int, span: int) -> np.ndarray:
    t = np.arange(-span * sps // 2, span * sps // 2 + 1) / sps
    h = np.empty_like(t)
    at_zero = np.isclose(t, 0.0, atol=1e-12)
    at_sing = np.isclose(np.abs(t), 1 / (4 * beta), atol=1e-9)
    rest = ~(at_zero | at_sing)
    tr = t[rest]
    h[rest] = (np.sin(np.pi * tr * (1 - beta)) + 4 * beta * tr * np.cos(np.pi * tr * (1 + beta))) / (
        np.pi * tr * (1 - (4 * beta * tr) ** 2)
    )
    h[at_zero] = 1 - beta + 4 * beta / np.pi
    h[at_sing] = beta / np.sqrt(2) * (
        (1 + 2 / np.pi) * np.sin(np.pi / (4 * beta)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta))
    )
    return h / np.linalg.norm(h)


def isi_ratio(taps: np.ndarray, sps: int) -> float:
    """Largest off-peak symbol-spaced sample of the matched response, over the peak."""
    r = np.convolve(taps, taps)
    c = len(r) // 2
    samples = r[c % sps :: sps]
    peak_idx = c // sps
    return float(np.max(np.abs(np.delete(samples, peak_idx))) / abs(samples[peak_idx]))


def default_span(rolloff: float, sps: int) -> int:
    if sps == 1:
        return MIN_SPAN
    span = MIN_SPAN
    while span < MAX_SPAN and isi_ratio(_taps_for(rolloff, sps, span), sps) >= ISI_TARGET:
        span += 2
    return span


# -- modulators ----------------------------------------------------------------

def symbols_needed(length: int, sps: int, span: int) -> int:
    return -(-length // sps) + span + 1


def modulate_linear(symbols: np.ndarray, sps: int, rolloff: float, length: int, span: int | None = None) -> np.ndarray:
    """Upsample by ``sps``, SRRC-filter, and keep ``length`` steady-state samples.

    The first ``span * sps`` samples of the full convolution are discarded, so
    output sample 0 is the first one every filter tap sees a real symbol.  For
    symbol ``k`` the matched-filter peak then lands at full-convolution index
    ``k * sps`` of :func:`matched_filter`.  ``sps == 1`` skips shaping and
    returns the symbols themselves.
    """
    symbols = np.asarray(symbols, dtype=complex)
    if sps == 1:
        if len(symbols) < length:
            raise ValueError(f"need {length} symbols at sps=1, got {len(symbols)}")
        return symbols[:length].copy()
    if span is None:
        span = default_span(rolloff, sps)
    taps = srrc_taps(rolloff, sps, span)
    need = symbols_needed(length, sps, span)
    if len(symbols) < need:
        raise ValueError(f"need at least {need} symbols for {length} samples at sps={sps}, got {len(symbols)}")
    up = np.zeros(len(symbols) * sps, dtype=complex)
    up[::sps] = symbols
    start = span * sps
    full = _fftconvolve(up[: start + length], taps)
    return full[start : start + length]


def _fftconvolve(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    from scipy.signal import fftconvolve

    return fftconvolve(x, h)


def msk_modulate(bits, sps: int, length: int, phase0: float = 0.0) -> np.ndarray:
    """MSK as CPFSK, h = 1/2: the phase moves linearly by +-pi/2 over each symbol."""
    if sps < 2:
        raise ValueError(f"MSK needs sps >= 2, got {sps}")
    bits = np.asarray(bits, dtype=np.int64)
    need = -(-length // sps)
    if bits.size < need:
        raise ValueError(f"need at least {need} bits for {length} samples, got {bits.size}")
    a = 2 * bits[:need] - 1
    step = np.repeat(a * (np.pi / 2 / sps), sps)[:length]
    phase = phase0 + np.concatenate([[0.0], np.cumsum(step)[:-1]])
    return np.exp(1j * phase)


def apply_cfo(samples: np.ndarray, cfo: float) -> np.ndarray:
    if not abs(cfo) < 0.5:
        raise ValueError(f"|cfo| must be < 0.5 cycles/sample, got {cfo}")
    if cfo == 0:
        return samples.copy()
    n = np.arange(len(samples))
    return samples * np.exp(2j * np.pi * cfo * n)


def add_noise_to_snr(signal: ComplexSignal, target_snr_db: float, rng: np.random.Generator) -> ComplexSignal:
    """Add white circular Gaussian noise so the in-band SNR drops to the target.

    The current label (``inf`` for a clean frame) says how much noise is
    already present; only the difference is added.  Sample power is not
    renormalised.
    """
    meta = signal.meta
    current = meta.inband_snr_db
    if math.isinf(target_snr_db) and target_snr_db > 0:
        return ComplexSignal(signal.samples.copy(), meta)
    if target_snr_db > current:
        raise ValueError(f"target SNR {target_snr_db} dB above current label {current} dB")
    bf = occupied_bandwidth(meta.scheme, meta.sps, meta.rolloff)
    total = float(np.mean(np.abs(signal.samples) ** 2))
    if math.isinf(current):
        sig_power, noise_var = total, 0.0
    else:
        snr0 = 10 ** (current / 10)
        sig_power = total * snr0 * bf / (1 + snr0 * bf)
        noise_var = total - sig_power
    want = sig_power / (10 ** (target_snr_db / 10) * bf)
    extra = max(want - noise_var, 0.0)
    noise = np.sqrt(extra / 2) * (rng.standard_normal(len(signal)) + 1j * rng.standard_normal(len(signal)))
    return ComplexSignal(signal.samples + noise, replace(meta, inband_snr_db=float(target_snr_db)))


# -- frame synthesis -----------------------------------------------------------

@dataclass
class Transmission:
    """Clean baseband frame plus the ground truth needed to check a receiver."""

    samples: np.ndarray
    symbols: np.ndarray
    bits: np.ndarray = field(repr=False)


def synthesize(
    scheme: ModulationScheme, sps: int, rolloff: float, length: int, rng: np.random.Generator, *, pi4: bool = True
) -> Transmission:
    scheme = ModulationScheme(scheme)
    if scheme == ModulationScheme.MSK:
        bits = rng.integers(0, 2, -(-length // sps))
        return Transmission(msk_modulate(bits, sps, length), 2 * bits - 1, bits)
    span = default_span(rolloff, sps)
    nsym = length if sps == 1 else symbols_needed(length, sps, span)
    bits = rng.integers(0, 2, nsym * BITS_PER_SYMBOL[scheme])
    symbols = map_symbols(scheme, bits, pi4=pi4)
    return Transmission(modulate_linear(symbols, sps, rolloff, length, span), symbols, bits)


def draw_meta(profile: DatasetProfile, rng: np.random.Generator, seed: int) -> SignalMeta:
    members = profile.scheme_members()
    scheme = members[int(rng.integers(len(members)))]
    lo, hi = profile.sps_range
    if scheme == ModulationScheme.MSK:
        lo = max(lo, 2)
        hi = max(hi, lo)
    sps = int(rng.integers(lo, hi + 1))
    return SignalMeta(
        scheme=scheme,
        sps=sps,
        rolloff=float(rng.uniform(*profile.rolloff_range)),
        cfo=float(rng.uniform(*profile.cfo_interval)),
        inband_snr_db=float(rng.uniform(*profile.snr_range_db)),
        rng_seed=seed,
        profile_tag=profile.name,
    )


def generate_frame(profile: DatasetProfile, seed: int) -> ComplexSignal:
    rng = frame_rng(seed)
    meta = draw_meta(profile, rng, seed)
    tx = synthesize(meta.scheme, meta.sps, meta.rolloff, profile.length, rng, pi4=profile.pi4_dqpsk)
    clean = ComplexSignal(apply_cfo(tx.samples, meta.cfo), replace(meta, inband_snr_db=math.inf))
    noisy = add_noise_to_snr(clean, meta.inband_snr_db, rng)
    return noisy.normalized()


def generate(profile: DatasetProfile, count: int | None = None, seed: int = 0) -> list[ComplexSignal]:
    """Draw ``count`` frames (default ``profile.count``); deterministic in ``seed``."""
    count = profile.count if count is None else count
    return [generate_frame(profile, frame_seed(seed, i)) for i in range(count)]


def iter_generate(profile: DatasetProfile, count: int | None = None, seed: int = 0):
    count = profile.count if count is None else count
    for i in range(count):
        yield generate_frame(profile, frame_seed(seed, i))


# -- receivers used as test oracles ---------------------------------------------

@dataclass
class Demodulated:
    first_symbol: int
    symbols: np.ndarray
    decisions: np.ndarray


def _signal_amplitude(meta: SignalMeta, samples: np.ndarray) -> float:
    total = float(np.mean(np.abs(samples) ** 2))
    if math.isinf(meta.inband_snr_db):
        return math.sqrt(total)
    snr = 10 ** (meta.inband_snr_db / 10)
    bf = occupied_bandwidth(meta.scheme, meta.sps, meta.rolloff)
    return math.sqrt(total * snr * bf / (1 + snr * bf))


def matched_filter(samples: np.ndarray, rolloff: float, sps: int, span: int | None = None) -> np.ndarray:
    span = default_span(rolloff, sps) if span is None else span
    return _fftconvolve(samples, srrc_taps(rolloff, sps, span)[::-1])


def demod_oracle(signal: ComplexSignal, *, pi4: bool = True) -> Demodulated:
    """Coherent receiver with perfect knowledge of timing, CFO and pulse shape.

    Linear schemes: CFO removal, matched filter, symbol-rate sampling, gain
    correction from the labelled SNR, nearest-point decisions.  The returned
    ``first_symbol`` is the index (in the transmitted symbol stream) of the
    first decision.  MSK: decisions are the signs of the per-symbol phase
    advance, returned as +-1.
    """
    meta = signal.meta
    if not isinstance(meta, SignalMeta):
        raise ValueError("demod_oracle needs generation metadata")
    x = apply_cfo(signal.samples, -meta.cfo) if meta.cfo else signal.samples
    sps = meta.sps
    if meta.scheme == ModulationScheme.MSK:
        nsym = (len(x) - 1) // sps
        ends = x[sps : (nsym + 1) * sps : sps]
        starts = x[0 : nsym * sps : sps]
        adv = np.angle(ends * np.conj(starts))
        return Demodulated(0, adv, np.where(adv >= 0, 1, -1))
    amp = _signal_amplitude(meta, x)
    if sps == 1:
        y = x / amp
        first = 0
    else:
        span = default_span(meta.rolloff, sps)
        mf = matched_filter(x, meta.rolloff, sps, span)
        first = span
        last = (len(x) - 1) // sps
        y = mf[first * sps : last * sps + 1 : sps] / (amp * math.sqrt(sps))
    if meta.scheme == ModulationScheme.DQPSK:
        # decisions on the absolute phase: the alphabet is the QPSK ring (plain)
        # or the 8-point ring (pi/4 variant) - both unit-modulus M-PSK points
        m = 8 if pi4 else 4
        idx = np.round(np.angle(y) / (2 * np.pi / m)) % m
        return Demodulated(first, y, np.exp(1j * 2 * np.pi * idx / m))
    alphabet = constellation(meta.scheme)
    idx = np.argmin(np.abs(y[:, None] - alphabet[None, :]), axis=1)
    return Demodulated(first, y, alphabet[idx])


def measure_inband_snr_db(samples: np.ndarray, meta: SignalMeta, nfft: int = 1024) -> float:
    """Periodogram SNR estimate: the noise floor comes from out-of-band bins.

    Uses a Welch average; the signal band is centred on the CFO.  Needs some
    spectrum outside the occupied band, i.e. an occupied bandwidth below 1.
    """
    from scipy.signal import welch

    freqs, psd = welch(samples, fs=1.0, nperseg=nfft, return_onesided=False, detrend=False, scaling="density")
    bw = occupied_bandwidth(meta.scheme, meta.sps, meta.rolloff)
    if bw >= 0.95:
        raise ValueError("occupied band covers the whole spectrum; no noise-only bins")
    offset = np.angle(np.exp(2j * np.pi * (freqs - meta.cfo))) / (2 * np.pi)
    guard = 0.02
    inband = np.abs(offset) <= bw / 2
    noise_bins = np.abs(offset) > bw / 2 + guard
    df = 1.0 / nfft
    floor = float(np.mean(psd[noise_bins]))
    sig = float(psd[inband].sum() * df) - floor * inband.sum() * df
    return 10 * math.log10(max(sig, 1e-30) / (floor * bw))
