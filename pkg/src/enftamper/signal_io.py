"""WAV I/O, decimation to the analysis rate and ENF band isolation."""

from __future__ import annotations

import os
import struct
import wave
from dataclasses import dataclass, field
from functools import lru_cache
from math import gcd

import numpy as np
from scipy import signal

from .errors import (InvalidBand, InvalidRate, IoFailure, MalformedWav, TooShort,
                     UnsupportedFormat)

ANALYSIS_RATES = (1000, 1200)
NOMINAL_FREQS = (50, 60)
DEFAULT_HALF_BANDWIDTH = 1.0

# The stopband check at nominal +/- 10 Hz is made on the forward-backward
# response, so each single pass only needs half the dB figures.
_PASS_RIPPLE_DB = 0.5
_STOP_ATTEN_DB = 40.0
_STOP_OFFSET_HZ = 10.0


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("AudioClip needs a nonempty 1-D sample buffer")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")
        if np.max(np.abs(self.samples)) > 1.0:
            raise ValueError("AudioClip samples must lie in [-1, 1]")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self):
        return self.samples.size


@dataclass
class EnfComponent:
    samples: np.ndarray
    sample_rate: int
    nominal_freq: int = field(default=60)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate not in ANALYSIS_RATES:
            raise InvalidRate(f"ENF component rate must be one of {ANALYSIS_RATES}")
        if self.nominal_freq not in NOMINAL_FREQS:
            raise InvalidBand(f"nominal frequency must be one of {NOMINAL_FREQS}")

    def __len__(self):
        return self.samples.size


def default_rate_for(nominal_freq: int) -> int:
    """Analysis rate paired with a mains frequency (50 -> 1000, 60 -> 1200)."""
    if nominal_freq not in NOMINAL_FREQS:
        raise InvalidBand(f"nominal frequency must be one of {NOMINAL_FREQS}")
    return 20 * nominal_freq


# --------------------------------------------------------------------------
# WAV
# --------------------------------------------------------------------------

def load_wav(path) -> AudioClip:
    """Read a mono 16-bit PCM RIFF/WAVE file.

    Only the ``fmt `` and ``data`` chunks are interpreted; any other chunk is
    skipped. A data chunk that claims more bytes than the file holds is
    treated as truncation.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc

    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWav(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise MalformedWav(f"{path}: chunk {chunk_id!r} truncated "
                               f"({len(body)} of {size} bytes)")
        if chunk_id == b"fmt ":
            if size < 16:
                raise MalformedWav(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)
        if fmt is not None and data is not None:
            break

    if fmt is None or data is None:
        raise MalformedWav(f"{path}: missing fmt or data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != 1:
        raise UnsupportedFormat(f"{path}: only PCM is supported (format tag {audio_format})")
    if channels != 1:
        raise UnsupportedFormat(f"{path}: only mono is supported ({channels} channels)")
    if bits != 16:
        raise UnsupportedFormat(f"{path}: only 16-bit samples are supported ({bits} bits)")
    if rate == 0:
        raise MalformedWav(f"{path}: zero sample rate")
    if len(data) % 2:
        raise MalformedWav(f"{path}: odd data chunk length")
    if not data:
        raise MalformedWav(f"{path}: empty data chunk")

    samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate, source_id=os.path.basename(str(path)))


def save_wav(clip: AudioClip, path) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    try:
        # open the file first: a failed wave.open(path) leaves a half-built writer behind
        with open(path, "wb") as fh, wave.open(fh, "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(clip.sample_rate)
            wf.writeframes(pcm.tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


# --------------------------------------------------------------------------
# Rate conversion and band isolation
# --------------------------------------------------------------------------

def _antialias_taps(up: int, down: int) -> np.ndarray:
    # Frequencies normalised to the Nyquist of the up-sampled stream; the
    # filter passes up to 0.4 * target_rate and stops from 0.5 * target_rate.
    nyq_target = 1.0 / max(up, down)
    numtaps, beta = signal.kaiserord(60.0, 0.2 * nyq_target)
    numtaps |= 1
    return signal.firwin(numtaps, 0.9 * nyq_target, window=("kaiser", beta))


def decimate(clip: AudioClip, target_rate: int) -> AudioClip:
    """Resample ``clip`` down to ``target_rate`` with a linear-phase anti-alias filter."""
    target_rate = int(target_rate)
    if target_rate <= 0 or target_rate >= clip.sample_rate:
        raise InvalidRate(f"cannot decimate {clip.sample_rate} Hz to {target_rate} Hz")
    g = gcd(clip.sample_rate, target_rate)
    up, down = target_rate // g, clip.sample_rate // g
    taps = _antialias_taps(up, down)
    y = signal.resample_poly(clip.samples, up, down, window=taps)
    # keep only output samples whose time lies inside the input
    y = np.clip(y[:clip.samples.size * up // down], -1.0, 1.0)
    return AudioClip(y, target_rate, clip.source_id)


def _meets_targets(sos, sample_rate, nominal_freq, half_bandwidth) -> bool:
    probe = [nominal_freq - half_bandwidth, nominal_freq + half_bandwidth,
             nominal_freq - _STOP_OFFSET_HZ, nominal_freq + _STOP_OFFSET_HZ]
    _, h = signal.sosfreqz(sos, worN=probe, fs=sample_rate)
    gain_db = 40 * np.log10(np.maximum(np.abs(h), 1e-300))  # forward-backward
    return bool(np.all(gain_db[:2] >= -_PASS_RIPPLE_DB) and np.all(gain_db[2:] <= -_STOP_ATTEN_DB))


def bandpass_design(sample_rate: int, nominal_freq: float, half_bandwidth: float):
    """Butterworth band-pass in SOS form meeting the ENF passband/stopband targets.

    Returns ``(sos, edge_offset_hz)``. Order 4 is used whenever it can hold
    the passband flat to +/-0.5 dB over +/- ``half_bandwidth`` while reaching
    40 dB at +/-10 Hz after forward-backward filtering; wider passbands
    fall back to higher orders.
    """
    for order in (4, 6, 8):
        r_pass = (10 ** (_PASS_RIPPLE_DB / 20) - 1) ** (1 / (2 * order))
        r_stop = (10 ** (_STOP_ATTEN_DB / 20) - 1) ** (1 / (2 * order))
        lo = half_bandwidth / r_pass
        hi = _STOP_OFFSET_HZ / r_stop
        if lo >= hi:
            continue
        # geometric centre first, then walk towards either bound
        for t in (0.5, 0.4, 0.6, 0.3, 0.7, 0.2, 0.8):
            edge = lo ** (1 - t) * hi ** t
            sos = signal.butter(order, [nominal_freq - edge, nominal_freq + edge],
                                btype="bandpass", fs=sample_rate, output="sos")
            if _meets_targets(sos, sample_rate, nominal_freq, half_bandwidth):
                return sos, edge
    raise InvalidBand(f"no band-pass meets the targets for half_bandwidth={half_bandwidth}")


def bandpass_enfc(clip: AudioClip, nominal_freq: int = 60,
                  half_bandwidth: float = DEFAULT_HALF_BANDWIDTH) -> EnfComponent:
    """Zero-phase band-pass around the mains frequency."""
    if clip.sample_rate not in ANALYSIS_RATES:
        raise InvalidBand(f"clip must be at {ANALYSIS_RATES} Hz, got {clip.sample_rate}")
    if nominal_freq not in NOMINAL_FREQS:
        raise InvalidBand(f"nominal frequency must be one of {NOMINAL_FREQS}")
    if not 0 < half_bandwidth <= 5:
        raise InvalidBand("half_bandwidth must be in (0, 5] Hz")
    sos, _ = bandpass_design(clip.sample_rate, nominal_freq, half_bandwidth)
    x = clip.samples
    padlen = min(x.size - 1, 2 * clip.sample_rate)
    y = signal.sosfiltfilt(sos, x, padtype="odd", padlen=padlen)
    return EnfComponent(y, clip.sample_rate, nominal_freq)


@lru_cache(maxsize=32)
def settle_seconds(sample_rate: int, nominal_freq: float,
                   half_bandwidth: float = DEFAULT_HALF_BANDWIDTH, level_db: float = 50.0) -> float:
    """Time for the band-pass impulse-response envelope to decay by ``level_db``."""
    sos, _ = bandpass_design(sample_rate, nominal_freq, half_bandwidth)
    imp = np.zeros(10 * sample_rate)
    imp[0] = 1.0
    env = np.abs(signal.hilbert(signal.sosfilt(sos, imp)))
    above = np.flatnonzero(env > env.max() * 10 ** (-level_db / 20))
    return float(above[-1] + 1) / sample_rate


def extract_enfc(clip: AudioClip, nominal_freq: int = 60,
                 half_bandwidth: float = DEFAULT_HALF_BANDWIDTH,
                 analysis_rate: int | None = None, trim_edges: bool = True) -> EnfComponent:
    """Decimate (if needed) and band-pass a raw recording.

    With ``trim_edges`` the filter's start-up transient is cut from both ends
    so it cannot masquerade as a phase discontinuity.
    """
    rate = analysis_rate or default_rate_for(nominal_freq)
    if clip.sample_rate != rate:
        clip = decimate(clip, rate)
    enfc = bandpass_enfc(clip, nominal_freq, half_bandwidth)
    if trim_edges:
        cut = int(np.ceil(settle_seconds(rate, nominal_freq, half_bandwidth) * rate))
        if len(enfc) <= 2 * cut:
            raise TooShort(f"clip of {clip.duration:.2f} s is shorter than the filter settle time")
        enfc = EnfComponent(enfc.samples[cut:-cut], rate, nominal_freq)
    return enfc
