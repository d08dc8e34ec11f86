"""Biosignal preprocessing: resampling, Butterworth/notch design and zero-phase filtering.

Butterworth filters are designed as cascaded second-order sections: analog
prototype poles are placed for the requested kind, cutoffs are prewarped, and
each pole pair is mapped through the bilinear transform. The per-section
recursion itself is delegated to ``scipy.signal``.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .errors import ConfigError, DesignError, ValidationError

CHANNELS = ("ECG", "PPG", "EDA")
TARGET_RATE_HZ = 128.0
POWERLINE_HZ = 50.0
NOTCH_Q = 30.0
TRIM_SECONDS = 1.0

# Filter settings per channel kind: (kind, order, cutoffs).
CHANNEL_FILTERS = {
    "PPG": ("bandpass", 3, (0.5, 8.0)),
    "ECG": ("highpass", 5, (0.5,)),
    "EDA": ("lowpass", 4, (3.0,)),
}


@dataclass(frozen=True)
class FilterSpec:
    kind: str
    order: int
    cutoff_hz: tuple
    sample_rate_hz: float

    def __post_init__(self):
        cut = tuple(float(c) for c in np.atleast_1d(self.cutoff_hz))
        object.__setattr__(self, "cutoff_hz", cut)
        if self.kind not in ("lowpass", "highpass", "bandpass", "notch"):
            raise DesignError(f"unknown filter kind {self.kind!r}")
        if int(self.order) != self.order or self.order < 1:
            raise DesignError(f"filter order must be a positive integer, got {self.order}")
        if self.sample_rate_hz <= 0:
            raise DesignError(f"sample rate must be positive, got {self.sample_rate_hz}")
        nyq = self.sample_rate_hz / 2.0
        for c in cut:
            if not 0.0 < c < nyq:
                raise DesignError(f"cutoff {c} Hz must lie strictly inside (0, {nyq}) Hz")
        expected = 2 if self.kind == "bandpass" else 1
        if len(cut) != expected:
            raise DesignError(f"{self.kind} needs {expected} cutoff(s), got {len(cut)}")
        if self.kind == "bandpass" and not cut[0] < cut[1]:
            raise DesignError(f"bandpass needs low < high, got {cut}")


@dataclass(frozen=True)
class BiquadChain:
    """Cascade of sections, each row ``(b0, b1, b2, a1, a2)`` with ``a0 = 1``."""

    sections: np.ndarray

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.sections, dtype=np.float64))
        if s.shape[1] != 5:
            raise DesignError(f"sections must have 5 coefficients each, got shape {s.shape}")
        s.flags.writeable = False
        object.__setattr__(self, "sections", s)

    @property
    def sos(self) -> np.ndarray:
        """Sections in the ``[b0, b1, b2, 1, a1, a2]`` layout scipy expects."""
        s = self.sections
        return np.column_stack([s[:, :3], np.ones(len(s)), s[:, 3:]])

    def poles(self) -> np.ndarray:
        out = []
        for _, _, _, a1, a2 in self.sections:
            out.extend(np.roots([1.0, a1, a2]) if a2 != 0.0 else ([-a1] if a1 != 0.0 else []))
        return np.asarray(out, dtype=complex)

    def is_stable(self, margin: float = 1e-9) -> bool:
        p = self.poles()
        return bool(np.all(np.abs(p) < 1.0 - margin))

    def response(self, freqs_hz, sample_rate_hz: float) -> np.ndarray:
        """Complex frequency response H(e^{jw}) evaluated section by section."""
        w = 2.0 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / sample_rate_hz
        z1 = np.exp(-1j * w)
        z2 = z1 * z1
        h = np.ones_like(z1)
        for b0, b1, b2, a1, a2 in self.sections:
            h = h * (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2)
        return h

    @property
    def warmup_length(self) -> int:
        return 2 * len(self.sections) + 1


@dataclass(frozen=True)
class RawSignal:
    samples: np.ndarray
    sample_rate_hz: float
    channel: str
    trace: tuple = field(default=(), compare=False)

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValidationError(f"signal samples must be 1-D, got shape {x.shape}")
        if self.sample_rate_hz <= 0:
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.channel not in CHANNELS:
            raise ValidationError(f"channel must be one of {CHANNELS}, got {self.channel!r}")
        if not np.all(np.isfinite(x)):
            raise ValidationError(f"{self.channel} signal contains non-finite samples")
        object.__setattr__(self, "samples", x)

    def __len__(self) -> int:
        return len(self.samples)

    def replace(self, samples=None, sample_rate_hz=None, stage: str | None = None) -> "RawSignal":
        return RawSignal(
            self.samples if samples is None else samples,
            self.sample_rate_hz if sample_rate_hz is None else sample_rate_hz,
            self.channel,
            self.trace + ((stage,) if stage else ()),
        )


# ---------------------------------------------------------------------------
# design


def _prewarp(f_hz: float, fs: float) -> float:
    return 2.0 * fs * math.tan(math.pi * f_hz / fs)


def _bilinear(s: complex, fs: float) -> complex:
    return (2.0 * fs + s) / (2.0 * fs - s)


def _group_sections(poles: list, zeros: list, ref_w: float) -> np.ndarray:
    tol = 1e-12
    complex_up = sorted((p for p in poles if p.imag > tol), key=lambda p: abs(p))
    real = sorted(p.real for p in poles if abs(p.imag) <= tol)
    groups = [[p, p.conjugate()] for p in complex_up]
    while len(real) >= 2:
        groups.append([complex(real.pop(0)), complex(real.pop(0))])
    if real:
        groups.append([complex(real.pop())])
    zeros = list(zeros)
    ref = cmath.exp(-1j * ref_w)
    rows = []
    for g in groups:
        zs = [zeros.pop(0) for _ in range(len(g))]
        if len(g) == 2:
            a = [1.0, -(g[0] + g[1]).real, (g[0] * g[1]).real]
            b = [1.0, -(zs[0] + zs[1]).real, (zs[0] * zs[1]).real]
        else:
            a = [1.0, -g[0].real, 0.0]
            b = [1.0, -zs[0].real, 0.0]
        num = b[0] + b[1] * ref + b[2] * ref * ref
        den = a[0] + a[1] * ref + a[2] * ref * ref
        gain = abs(den) / abs(num)
        rows.append([gain * b[0], gain * b[1], gain * b[2], a[1], a[2]])
    return np.asarray(rows)


def design_butterworth(spec: FilterSpec) -> BiquadChain:
    """Digital Butterworth lowpass/highpass/bandpass as second-order sections.

    Each cutoff is prewarped so the digital response is exactly -3 dB there.
    Sections are scaled to unit gain at DC (lowpass), Nyquist (highpass) or
    the band centre (bandpass).
    """
    if spec.kind == "notch":
        raise DesignError("use design_notch for notch filters")
    n = int(spec.order)
    fs = float(spec.sample_rate_hz)
    proto = [cmath.exp(1j * math.pi * (2 * k + n - 1) / (2 * n)) for k in range(1, n + 1)]
    if spec.kind == "lowpass":
        wc = _prewarp(spec.cutoff_hz[0], fs)
        analog = [wc * p for p in proto]
        zeros = [-1.0] * n
        ref_w = 0.0
    elif spec.kind == "highpass":
        wc = _prewarp(spec.cutoff_hz[0], fs)
        analog = [wc / p for p in proto]
        zeros = [1.0] * n
        ref_w = math.pi
    else:
        w1 = _prewarp(spec.cutoff_hz[0], fs)
        w2 = _prewarp(spec.cutoff_hz[1], fs)
        bw = w2 - w1
        w0sq = w1 * w2
        analog = []
        for p in proto:
            disc = cmath.sqrt((p * bw) ** 2 - 4.0 * w0sq)
            analog.extend([(p * bw + disc) / 2.0, (p * bw - disc) / 2.0])
        zeros = [1.0, -1.0] * n
        ref_w = 2.0 * math.atan(math.sqrt(w0sq) / (2.0 * fs))
    poles = [_bilinear(s, fs) for s in analog]
    chain = BiquadChain(_group_sections(poles, zeros, ref_w))
    if not chain.is_stable():
        raise DesignError(f"designed filter is unstable for {spec}")
    return chain


def design_notch(freq_hz: float = POWERLINE_HZ, sample_rate_hz: float = TARGET_RATE_HZ, q: float = NOTCH_Q) -> BiquadChain:
    """Single-section IIR notch with zeros on the unit circle at ``freq_hz``."""
    nyq = sample_rate_hz / 2.0
    if not 0.0 < freq_hz < nyq:
        raise DesignError(f"notch frequency {freq_hz} Hz must lie inside (0, {nyq}) Hz")
    w0 = 2.0 * math.pi * freq_hz / sample_rate_hz
    bw = w0 / q
    g = 1.0 / (1.0 + math.tan(bw / 2.0))
    c = math.cos(w0)
    return BiquadChain([[g, -2.0 * g * c, g, -2.0 * g * c, 2.0 * g - 1.0]])


# ---------------------------------------------------------------------------
# application


def filter_causal(x: np.ndarray, chain: BiquadChain) -> np.ndarray:
    return sps.sosfilt(chain.sos, np.asarray(x, dtype=np.float64))


def filter_forward_backward(x: RawSignal, chain: BiquadChain, stage: str = "filter") -> RawSignal:
    """Zero-phase application: forward pass, then the same chain over the reversed output.

    Ends are extended by odd reflection over ``3 * chain.warmup_length``
    samples with steady-state initial conditions, which suppresses start-up
    transients.
    """
    padlen = 3 * chain.warmup_length
    if len(x) <= padlen:
        raise ValidationError(f"signal of {len(x)} samples is too short for zero-phase filtering (needs > {padlen})")
    y = sps.sosfiltfilt(chain.sos, x.samples, padtype="odd", padlen=padlen)
    return x.replace(samples=y, stage=stage)


def resample_to(x: RawSignal, target_hz: float = TARGET_RATE_HZ) -> RawSignal:
    """Downsample after a zero-phase order-8 Butterworth anti-alias lowpass at 0.45 x target Nyquist."""
    src = float(x.sample_rate_hz)
    if target_hz > src:
        raise ConfigError(f"upsampling {src} Hz -> {target_hz} Hz is not supported")
    if target_hz == src:
        return x.replace(stage=f"resample:{target_hz:g}")
    ratio = Fraction(src).limit_denominator(10_000) / Fraction(target_hz).limit_denominator(10_000)
    n_out = int(round(len(x) * target_hz / src))
    aa = design_butterworth(FilterSpec("lowpass", 8, (0.45 * target_hz / 2.0,), src))
    y = filter_forward_backward(x, aa).samples
    if ratio.denominator == 1:
        out = y[:: ratio.numerator][:n_out]
    else:
        t_src = np.arange(len(y)) / src
        out = np.interp(np.arange(n_out) / target_hz, t_src, y)
    return x.replace(samples=out, sample_rate_hz=float(target_hz), stage=f"resample:{target_hz:g}")


def trim_head(x: RawSignal, seconds: float = TRIM_SECONDS) -> RawSignal:
    n = int(math.floor(seconds * x.sample_rate_hz))
    if len(x) <= n:
        raise ValidationError(f"signal of {len(x)} samples is shorter than the {seconds} s trim ({n} samples)")
    return x.replace(samples=x.samples[n:], stage=f"trim:{seconds:g}s")


def channel_filter(channel: str, sample_rate_hz: float = TARGET_RATE_HZ) -> FilterSpec:
    kind, order, cutoff = CHANNEL_FILTERS[channel]
    return FilterSpec(kind, order, cutoff, sample_rate_hz)


def preprocess_signal(x: RawSignal, dataset: str) -> RawSignal:
    """Fixed per-channel pipeline: resample -> 50 Hz notch -> Butterworth -> 1 s trim (AMIGOS only).

    The returned signal's ``trace`` lists every applied stage in order.
    """
    if dataset not in ("amigos", "deap", "synthetic"):
        raise ConfigError(f"unknown dataset {dataset!r}")
    y = resample_to(x, TARGET_RATE_HZ)
    y = filter_forward_backward(y, design_notch(POWERLINE_HZ, y.sample_rate_hz), stage=f"notch:{POWERLINE_HZ:g}")
    spec = channel_filter(y.channel, y.sample_rate_hz)
    y = filter_forward_backward(y, design_butterworth(spec), stage=f"butter:{spec.kind}")
    if dataset == "amigos":
        y = trim_head(y, TRIM_SECONDS)
    return y
