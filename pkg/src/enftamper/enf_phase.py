"""Per-frame ENF phase estimation with DFT^0 and the derivative-based DFT^1.

Frames are ten nominal mains periods long and advance by one period. Each
frame yields

* ``psi0``: the phase of the zero-padded DFT at the magnitude peak,
* ``freq1``: the sub-bin frequency from the ratio of the derivative-signal
  DFT to the signal DFT at that peak,
* ``psi1``: the phase at the frame's first sample recovered from the
  interpolated phase of the derivative-signal spectrum.

All phases are referenced to the first sample of their frame.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.signal import get_window

from .errors import (ConfigError, DegeneratePeak, InterpolationFailure, NoPeak,
                     TooShort)
from .signal_io import EnfComponent, extract_enfc

DEFAULT_N_DFT = 2 ** 14
SEARCH_HALF_WIDTH_HZ = 10.0
PERIODS_PER_FRAME = 10
MAGNITUDE_FLOOR = 1e-12


def wrap_phase(x):
    """Map angles onto (-pi, pi]."""
    y = np.mod(np.asarray(x, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    y = np.where(y <= -np.pi, y + 2 * np.pi, y)
    return y if y.ndim else float(y)


@dataclass(frozen=True)
class FrameConfig:
    sample_rate: int = 1200
    nominal_freq: int = 60
    n_dft: int = DEFAULT_N_DFT

    def __post_init__(self):
        if (PERIODS_PER_FRAME * self.sample_rate) % self.nominal_freq:
            raise ConfigError(
                f"{self.sample_rate} Hz does not hold a whole number of samples "
                f"per {self.nominal_freq} Hz period")
        if self.n_dft < self.frame_len or self.n_dft & (self.n_dft - 1):
            raise ConfigError("n_dft must be a power of two no smaller than frame_len")

    @property
    def frame_len(self) -> int:
        return PERIODS_PER_FRAME * self.sample_rate // self.nominal_freq

    @property
    def hop(self) -> int:
        return self.frame_len // PERIODS_PER_FRAME

    @property
    def hop_seconds(self) -> float:
        return self.hop / self.sample_rate

    @property
    def window(self) -> np.ndarray:
        return _hann(self.frame_len)

    @property
    def search_bins(self) -> np.ndarray:
        """Integer DFT bins covering nominal +/- 10 Hz."""
        scale = self.n_dft / self.sample_rate
        lo = int(np.floor((self.nominal_freq - SEARCH_HALF_WIDTH_HZ) * scale))
        hi = int(np.ceil((self.nominal_freq + SEARCH_HALF_WIDTH_HZ) * scale))
        return np.arange(lo, hi + 1)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len:
            return 0
        return (n_samples - self.frame_len) // self.hop + 1

    @classmethod
    def for_component(cls, enfc: EnfComponent, n_dft: int = DEFAULT_N_DFT) -> "FrameConfig":
        return cls(enfc.sample_rate, enfc.nominal_freq, n_dft)


@lru_cache(maxsize=8)
def _hann(n: int) -> np.ndarray:
    # periodic Hann: its transform vanishes at every multiple of fs/n beyond the
    # main lobe, which keeps the negative-frequency image out of the peak bin
    w = get_window("hann", n)
    w.flags.writeable = False
    return w


@lru_cache(maxsize=16)
def _dft_matrix(frame_len: int, bins: tuple, n_dft: int) -> np.ndarray:
    n = np.arange(frame_len)
    m = np.exp(-2j * np.pi * np.outer(n, np.asarray(bins)) / n_dft)
    m.flags.writeable = False
    return m


def band_dft(frames: np.ndarray, bins: np.ndarray, n_dft: int) -> np.ndarray:
    """Zero-padded ``n_dft``-point DFT of each row, evaluated only at ``bins``."""
    frames = np.atleast_2d(frames)
    return frames @ _dft_matrix(frames.shape[1], tuple(int(b) for b in bins), n_dft)


@dataclass
class PhaseSequence:
    psi0: np.ndarray
    psi1: np.ndarray
    freq1: np.ndarray
    frame_times: np.ndarray
    nominal_freq: int
    hop_seconds: float
    flags: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.psi0)
        if n < 1 or not (len(self.psi1) == len(self.freq1) == len(self.frame_times) == n):
            raise ValueError("phase sequence arrays must share a nonzero length")
        if self.flags is None:
            self.flags = np.zeros(n, dtype=bool)

    def __len__(self):
        return len(self.psi1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_index", "time_s", "psi0_rad", "psi1_rad", "freq1_hz", "flag"])
            for i in range(len(self)):
                w.writerow([i, repr(float(self.frame_times[i])), repr(float(self.psi0[i])),
                            repr(float(self.psi1[i])), repr(float(self.freq1[i])),
                            int(self.flags[i])])

    @classmethod
    def from_csv(cls, path, nominal_freq: int, hop_seconds: float) -> "PhaseSequence":
        data = np.genfromtxt(path, delimiter=",", names=True, ndmin=1)
        return cls(data["psi0_rad"], data["psi1_rad"], data["freq1_hz"], data["time_s"],
                   nominal_freq, hop_seconds, data["flag"].astype(bool))


# --------------------------------------------------------------------------
# Single-frame building blocks
# --------------------------------------------------------------------------

def frame_and_window(enfc: EnfComponent, cfg: FrameConfig) -> np.ndarray:
    """Split into overlapping frames (one row each) and apply the Hann window."""
    return _frames(enfc.samples, cfg) * cfg.window


def _frames(x: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    count = cfg.n_frames(len(x))
    if count == 0:
        raise TooShort(f"need at least {cfg.frame_len} samples, got {len(x)}")
    view = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_len)
    return view[::cfg.hop][:count]


def derivative_signal(enfc: EnfComponent) -> np.ndarray:
    """Scaled first difference ``f_d * (x[n] - x[n-1])`` with the first sample set to 0."""
    x = enfc.samples
    if x.size < 2:
        raise TooShort("derivative needs at least two samples")
    d = np.empty_like(x)
    d[0] = 0.0
    d[1:] = enfc.sample_rate * np.diff(x)
    return d


def derivative_scale(k, n_dft: int):
    """Factor turning the DFT of the first difference into that of the true derivative.

    For ``x[n] = exp(j w n)`` the scaled difference has DFT
    ``f_d (1 - exp(-j w)) X``; multiplying by ``j w / (1 - exp(-j w))``
    leaves ``j w f_d X = j 2 pi f X`` at bin centres.
    """
    w = 2 * np.pi * np.asarray(k, dtype=np.float64) / n_dft
    return 1j * w / (1 - np.exp(-1j * w))


def dft0_peak(frame: np.ndarray, n_dft: int = DEFAULT_N_DFT, sample_rate: int = 1200,
              nominal_freq: int = 60):
    """Return ``(k_peak, U[k_peak], psi0)`` for one windowed frame."""
    bins = FrameConfig(sample_rate, nominal_freq, n_dft).search_bins
    spec = band_dft(frame, bins, n_dft)[0]
    mag = np.abs(spec)
    i = int(np.argmax(mag))
    if mag[i] < MAGNITUDE_FLOOR:
        raise NoPeak("no spectral peak in the ENF search band")
    return int(bins[i]), spec[i], float(wrap_phase(np.angle(spec[i])))


def dft1_frequency(frame: np.ndarray, dframe: np.ndarray, k_peak: int,
                   n_dft: int = DEFAULT_N_DFT, sample_rate: int = 1200,
                   nominal_freq: int = 60) -> float:
    """Sub-bin frequency estimate from the derivative/signal DFT ratio at ``k_peak``."""
    u0 = band_dft(frame, [k_peak], n_dft)[0, 0]
    u1 = band_dft(dframe, [k_peak], n_dft)[0, 0]
    f = _ratio_frequency(u0, u1, k_peak, n_dft)
    if not np.isfinite(f) or abs(f - nominal_freq) > SEARCH_HALF_WIDTH_HZ:
        raise DegeneratePeak(f"DFT1 frequency {f} outside the search band")
    return float(f)


def _ratio_frequency(u0, u1, k, n_dft):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = derivative_scale(k, n_dft) * u1 / u0
    f = np.abs(ratio) / (2 * np.pi)
    return np.where(np.abs(u0) < MAGNITUDE_FLOOR, np.nan, f)


def phase_from_derivative_angle(theta, omega0):
    """Invert the phase shift the first difference adds to a sinusoid.

    The scaled difference of ``cos(w n + phi)`` carries phase
    ``phi + atan2(sin w, 1 - cos w)`` with an ``exp(-j w n)`` DFT, so
    ``tan(phi) = (tan(theta)(1 - cos w) - sin w) / (1 - cos w + tan(theta) sin w)``.
    The arctan leaves a pi ambiguity that the caller resolves.
    """
    t = np.tan(theta)
    c, s = np.cos(omega0), np.sin(omega0)
    return np.arctan((t * (1 - c) - s) / (1 - c + t * s))


def phase_from_derivative_angle_printed(theta, omega0):
    """Literal ``tan(theta)[1 - cos w + sin w] / (1 - cos w - tan(theta) sin w)`` grouping.

    Kept for comparison only; it does not recover the frame phase (see README).
    """
    t = np.tan(theta)
    c, s = np.cos(omega0), np.sin(omega0)
    return np.arctan(t * (1 - c + s) / (1 - c - t * s))


def closest_branch(psi, psi0):
    """Choose between ``psi`` and ``psi + pi`` (wrapped) by circular distance to ``psi0``."""
    a = wrap_phase(psi)
    b = wrap_phase(np.asarray(psi) + np.pi)
    da = np.abs(wrap_phase(a - np.asarray(psi0)))
    db = np.abs(wrap_phase(b - np.asarray(psi0)))
    out = np.where(db < da, b, a)
    return out if np.ndim(out) else float(out)


def interpolated_angle(theta_low, theta_high, k_frac, k_low, k_high):
    """Linear interpolation of bin phases, unwrapping the upper one first."""
    theta_high = theta_low + wrap_phase(np.asarray(theta_high) - theta_low)
    span = np.asarray(k_high) - np.asarray(k_low)
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = np.where(span == 0, 0.0, (theta_high - theta_low) / np.where(span == 0, 1, span))
    return (np.asarray(k_frac) - k_low) * slope + theta_low


def dft1_phase(frame: np.ndarray, dframe: np.ndarray, k_peak: int, psi0: float,
               f_dft1: float, cfg: FrameConfig) -> float:
    """Phase of the frame's first sample from the DFT^1 estimate."""
    del frame, k_peak  # the estimate only needs the derivative spectrum near f_dft1
    omega0 = 2 * np.pi * f_dft1 / cfg.sample_rate
    if not 0 < omega0 < np.pi:
        raise InterpolationFailure("normalised frequency outside (0, pi)")
    k_frac = f_dft1 * cfg.n_dft / cfg.sample_rate
    k_low, k_high = int(np.floor(k_frac)), int(np.ceil(k_frac))
    ud = band_dft(dframe, [k_low, k_high], cfg.n_dft)[0]
    if np.any(np.abs(ud) < MAGNITUDE_FLOOR):
        raise InterpolationFailure("derivative spectrum vanishes next to the peak")
    theta = interpolated_angle(np.angle(ud[0]), np.angle(ud[1]), k_frac, k_low, k_high)
    return closest_branch(phase_from_derivative_angle(theta, omega0), psi0)


# --------------------------------------------------------------------------
# Whole-clip extraction
# --------------------------------------------------------------------------

def extract_phase_sequence(enfc: EnfComponent, cfg: FrameConfig | None = None) -> PhaseSequence:
    """Run both estimators over every frame of an ENF component.

    Frames whose estimate fails (no peak, out-of-band frequency, vanishing
    spectrum) repeat the previous frame's values and are flagged; a failing
    first frame is filled with zeros.
    """
    cfg = cfg or FrameConfig.for_component(enfc)
    if cfg.sample_rate != enfc.sample_rate or cfg.nominal_freq != enfc.nominal_freq:
        raise ConfigError("frame configuration does not match the ENF component")
    win = cfg.window
    frames = _frames(enfc.samples, cfg) * win
    dframes = _frames(derivative_signal(enfc), cfg) * win
    n = cfg.n_dft
    bins = cfg.search_bins

    spec = band_dft(frames, bins, n)
    dspec = band_dft(dframes, bins, n)
    rows = np.arange(len(frames))
    idx = np.argmax(np.abs(spec), axis=1)
    k_peak = bins[idx]
    u0 = spec[rows, idx]
    u1 = dspec[rows, idx]
    psi0 = wrap_phase(np.angle(u0))

    bad = np.abs(u0) < MAGNITUDE_FLOOR
    freq1 = _ratio_frequency(u0, u1, k_peak, n)
    bad |= ~np.isfinite(freq1) | (np.abs(freq1 - cfg.nominal_freq) > SEARCH_HALF_WIDTH_HZ)
    freq1 = np.where(bad, cfg.nominal_freq, freq1)

    k_frac = freq1 * n / cfg.sample_rate
    k_low = np.floor(k_frac).astype(int)
    k_high = np.ceil(k_frac).astype(int)
    ud_low = dspec[rows, np.clip(k_low - bins[0], 0, len(bins) - 1)]
    ud_high = dspec[rows, np.clip(k_high - bins[0], 0, len(bins) - 1)]
    bad |= (np.abs(ud_low) < MAGNITUDE_FLOOR) | (np.abs(ud_high) < MAGNITUDE_FLOOR)
    theta = interpolated_angle(np.angle(ud_low), np.angle(ud_high), k_frac, k_low, k_high)
    omega0 = 2 * np.pi * freq1 / cfg.sample_rate
    psi1 = closest_branch(phase_from_derivative_angle(theta, omega0), psi0)
    psi1 = np.atleast_1d(psi1)

    if bad.any():
        psi0, psi1, freq1 = (np.array(a, dtype=np.float64) for a in (psi0, psi1, freq1))
        for i in np.flatnonzero(bad):
            if i == 0:
                psi0[i] = psi1[i] = 0.0
                freq1[i] = cfg.nominal_freq
            else:
                psi0[i], psi1[i], freq1[i] = psi0[i - 1], psi1[i - 1], freq1[i - 1]

    times = (rows * cfg.hop + cfg.frame_len / 2) / cfg.sample_rate
    return PhaseSequence(np.atleast_1d(psi0), psi1, np.atleast_1d(freq1), times,
                         cfg.nominal_freq, cfg.hop_seconds, bad)


SPLICE_GUARD_S = 0.35


def _line_fits(u: np.ndarray, width: int):
    """Least-squares line through every run of ``width + 1`` points.

    Returns ``(level_at_start, level_at_end, slope)`` arrays indexed by run start.
    """
    x = np.arange(width + 1, dtype=np.float64)
    xc = x - x.mean()
    win = np.lib.stride_tricks.sliding_window_view(u, width + 1)
    slope = win @ xc / (xc @ xc)
    mean = win.mean(axis=1)
    return mean - slope * x.mean(), mean + slope * (width - x.mean()), slope


def step_profile(psi, pre: int = PERIODS_PER_FRAME, post: int = 0, width: int = 30):
    """Estimated phase step for a cut placed at every frame index.

    For a cut at frame ``c`` the frames ``c - pre`` and earlier and ``c + post``
    and later are assumed clean. A line is fitted to ``width + 1`` clean frames
    on each side; the step is the jump between the two inner end points
    minus the phase advance predicted by the mean of the two slopes, which
    cancels slow mains-frequency drift. Returns ``(cuts, steps)``.

    For a bare ENF component ``pre`` is one frame length (10 hops) and
    ``post`` is 0; after band-pass filtering both grow by the filter smear
    (``guard_frames``).
    """
    u = np.unwrap(np.asarray(psi, dtype=np.float64))
    start_lvl, end_lvl, slope = _line_fits(u, width)
    n_runs = len(slope)
    # before-run for cut c ends at c - pre -> starts at c - pre - width
    # after-run starts at c + post
    first = pre + width
    last = n_runs - 1 - post
    if last < first:
        raise TooShort("phase sequence too short for the requested step profile")
    cuts = np.arange(first, last + 1)
    a = cuts - pre - width
    b = cuts + post
    gap = (cuts + post) - (cuts - pre)
    steps = start_lvl[b] - end_lvl[a] - gap * 0.5 * (slope[a] + slope[b])
    return cuts, np.asarray(steps)


def guard_frames(hop_seconds: float, guard_s: float = SPLICE_GUARD_S) -> int:
    """Frames on each side of a cut disturbed by the band-pass filter."""
    return int(np.ceil(guard_s / hop_seconds))


def recording_step_profile(seq: PhaseSequence, width: int = 30):
    """``step_profile`` with guards sized for a band-passed recording."""
    g = guard_frames(seq.hop_seconds)
    return step_profile(seq.psi1, pre=PERIODS_PER_FRAME + g, post=g, width=width)


def phase_sequence_from_clip(clip, nominal_freq: int = 60, half_bandwidth: float = 1.0,
                             n_dft: int = DEFAULT_N_DFT) -> PhaseSequence:
    """Raw recording to phase sequence: decimate, band-pass, trim, estimate."""
    enfc = extract_enfc(clip, nominal_freq, half_bandwidth)
    return extract_phase_sequence(enfc, FrameConfig.for_component(enfc, n_dft))
