"""Synthetic recordings with an embedded, drifting ENF hum and controlled edits.

The carrier phase is the running integral of a bounded random-walk
frequency trace, so the only phase discontinuities in a clip are the ones
``apply_tamper`` puts there.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .enf_phase import wrap_phase
from .errors import InvalidParams, IoFailure, MissingDonor, OutOfBounds
from .signal_io import AudioClip, default_rate_for, save_wav

CONTROL_STEP_S = 0.1
MAX_DEVIATION_HZ = 0.5
MAX_CONTROL_STEP_HZ = 0.02
DEFAULT_DRIFT_STD = 0.01
DEFAULT_SOURCE_RATE = 8000
SNR_BAND_HZ = 10.0
CROSSFADE_S = 0.005
MIN_VISIBLE_STEP = 0.5
ADVERSARIAL_MAX_STEP = 0.05
EDGE_GUARD_S = 2.5
SPLIT_FRACTIONS = (("train", 0.64), ("val", 0.16), ("test", 0.20))
MANIFEST_VERSION = 1


@dataclass
class EnfTrace:
    inst_freq: np.ndarray
    nominal: float
    seed: int
    phase0: float = 0.0
    step_s: float = CONTROL_STEP_S

    @property
    def duration(self) -> float:
        return (len(self.inst_freq) - 1) * self.step_s


def gen_enf_trace(duration: float, nominal: float = 60, drift_std: float = DEFAULT_DRIFT_STD,
                  seed: int = 0) -> EnfTrace:
    """Bounded random walk around ``nominal`` sampled every 0.1 s.

    Increments are Gaussian with standard deviation ``drift_std * sqrt(0.1)``,
    clipped to +/-0.02 Hz, and the walk is clamped to nominal +/- 0.5 Hz.
    """
    if duration <= 0 or drift_std < 0 or nominal <= 0:
        raise InvalidParams("duration and nominal must be positive, drift_std non-negative")
    rng = np.random.default_rng(seed)
    n = int(np.ceil(duration / CONTROL_STEP_S)) + 1
    start = nominal + rng.uniform(-0.1, 0.1)
    phase0 = rng.uniform(-np.pi, np.pi)
    steps = rng.normal(0.0, drift_std * np.sqrt(CONTROL_STEP_S), n - 1)
    steps = np.clip(steps, -MAX_CONTROL_STEP_HZ, MAX_CONTROL_STEP_HZ)
    f = np.empty(n)
    f[0] = start
    lo, hi = nominal - MAX_DEVIATION_HZ, nominal + MAX_DEVIATION_HZ
    for k in range(1, n):
        f[k] = min(max(f[k - 1] + steps[k - 1], lo), hi)
    return EnfTrace(f, float(nominal), int(seed), float(phase0))


def carrier_phase(trace: EnfTrace, sample_rate: int, n_samples: int | None = None) -> np.ndarray:
    """Instantaneous carrier phase (radians, unwrapped) at every sample."""
    if n_samples is None:
        n_samples = int(round(trace.duration * sample_rate))
    t = np.arange(n_samples) / sample_rate
    grid = np.arange(len(trace.inst_freq)) * trace.step_s
    f = np.interp(t, grid, trace.inst_freq)
    phase = np.empty(n_samples)
    phase[0] = 0.0
    # trapezoidal integration of 2*pi*f
    phase[1:] = np.cumsum(np.pi * (f[1:] + f[:-1]) / sample_rate)
    return phase + trace.phase0


def _shaped_noise(n: int, sample_rate: int, rng) -> np.ndarray:
    """Pink-plus-white noise standing in for speech and room background."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1 / sample_rate)
    shape = 1 / np.sqrt(np.maximum(freqs, 20.0))
    pink = np.fft.irfft(spec * shape, n)
    pink /= np.std(pink)
    return pink + white


def band_power(x: np.ndarray, sample_rate: int, centre: float, half_width: float) -> float:
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1 / sample_rate)
    sel = np.abs(freqs - centre) <= half_width
    return float(2 * np.sum(np.abs(spec[sel]) ** 2) / len(x) ** 2)


def synth_recording(trace: EnfTrace, f_d_source: int = DEFAULT_SOURCE_RATE, snr_db: float = 30.0,
                    seed: int = 0, carrier_amplitude: float = 0.05,
                    source_id: str = "") -> AudioClip:
    """Render an ENF hum plus background noise at ``f_d_source``.

    The noise is scaled so that hum power over noise power inside
    nominal +/- 10 Hz (the ENF search band) equals ``snr_db``.
    """
    if not 0 <= snr_db <= 60:
        raise InvalidParams("snr_db must lie in [0, 60]")
    if f_d_source < 4 * trace.nominal:
        raise InvalidParams("source rate too low for the mains frequency")
    rng = np.random.default_rng(seed)
    n = int(round(trace.duration * f_d_source))
    hum = carrier_amplitude * np.sin(carrier_phase(trace, f_d_source, n))
    noise = _shaped_noise(n, f_d_source, rng)
    target = (carrier_amplitude ** 2 / 2) / 10 ** (snr_db / 10)
    noise *= np.sqrt(target / band_power(noise, f_d_source, trace.nominal, SNR_BAND_HZ))
    x = hum + noise
    peak = np.max(np.abs(x))
    if peak > 0.95:
        x *= 0.95 / peak
    return AudioClip(x, f_d_source, source_id)


# --------------------------------------------------------------------------
# Edits
# --------------------------------------------------------------------------

@dataclass
class TamperSpec:
    op: str
    position: float
    extent: float
    donor_seed: int | None = None
    donor_offset: float = 0.0

    def __post_init__(self):
        if self.op not in ("delete", "insert", "splice"):
            raise InvalidParams(f"unknown tamper op {self.op!r}")
        if self.extent < 0.1:
            raise InvalidParams("tamper extent must be at least 0.1 s")


def apply_tamper(clip: AudioClip, spec: TamperSpec, donor: AudioClip | None = None) -> AudioClip:
    """Delete, insert or splice audio at ``spec.position``.

    Each join blends the outgoing and incoming audio over 5 ms; the outgoing
    side keeps running past the cut during the blend so the hum's phase jumps
    over the blend instead of fading through silence.
    """
    x = clip.samples
    fs = clip.sample_rate
    p = int(round(spec.position * fs))
    e = int(round(spec.extent * fs))
    m = int(round(CROSSFADE_S * fs))
    if spec.op in ("insert", "splice") and donor is None:
        raise MissingDonor(f"{spec.op} needs donor audio")
    if p < 0 or p > len(x):
        raise OutOfBounds("tamper position outside the clip")
    if spec.op in ("delete", "splice") and p + e + m > len(x):
        raise OutOfBounds("tamper region runs past the end of the clip")
    if donor is not None and donor.sample_rate != fs:
        raise InvalidParams("donor sample rate differs from the clip")

    ramp = (np.arange(m) + 0.5) / m if m else np.zeros(0)

    def join(head_end, tail, tail_start, head_src):
        # head_src[head_end:head_end+m] fades out while tail[tail_start:+m] fades in
        if head_end + m > len(head_src) or tail_start + m > len(tail):
            return np.concatenate([head_src[:head_end], tail[tail_start:]])
        blend = head_src[head_end:head_end + m] * (1 - ramp) + tail[tail_start:tail_start + m] * ramp
        return np.concatenate([head_src[:head_end], blend, tail[tail_start + m:]])

    if spec.op == "delete":
        y = join(p, x, p + e, x)
    else:
        d0 = int(round(spec.donor_offset * fs))
        if d0 < 0 or d0 + e + m > len(donor.samples):
            raise OutOfBounds("donor segment outside the donor clip")
        seg = donor.samples[d0:d0 + e + m]
        resume = p if spec.op == "insert" else p + e
        if resume + m > len(x):
            raise OutOfBounds("tamper region runs past the end of the clip")
        first = join(p, seg, 0, x)
        # ``first`` ends with the spare m donor samples; fade them into the host
        head_len = len(first) - m
        y = join(head_len, x, resume, first)
    y = np.clip(y, -1.0, 1.0)
    return AudioClip(y, fs, clip.source_id)


def tamper_phase_steps(trace: EnfTrace, spec: TamperSpec, sample_rate: int,
                       donor_trace: EnfTrace | None = None, n_samples: int | None = None):
    """Wrapped hum-phase jumps (radians) that ``spec`` introduces at each join."""
    fs = sample_rate
    ph = carrier_phase(trace, fs, n_samples)
    p = int(round(spec.position * fs))
    e = int(round(spec.extent * fs))
    if spec.op == "delete":
        return [float(wrap_phase(ph[p + e] - ph[p]))]
    dph = carrier_phase(donor_trace, fs)
    d0 = int(round(spec.donor_offset * fs))
    resume = p if spec.op == "insert" else p + e
    return [float(wrap_phase(dph[d0] - ph[p])), float(wrap_phase(ph[resume] - dph[d0 + e]))]


# --------------------------------------------------------------------------
# Corpus
# --------------------------------------------------------------------------

@dataclass
class CorpusConfig:
    n_edited: int = 300
    n_original: int = 200
    duration_range: tuple = (9.0, 35.0)
    snr_range: tuple = (15.0, 30.0)
    tamper_mix: dict = field(default_factory=lambda: {"delete": 1 / 3, "insert": 1 / 3, "splice": 1 / 3})
    adversarial_fraction: float = 0.1
    nominal: int = 60
    source_rate: int = DEFAULT_SOURCE_RATE
    drift_std: float = DEFAULT_DRIFT_STD
    extent_range: tuple = (0.2, 2.0)
    seed: int = 0

    def validate(self):
        if self.n_edited < 10 or self.n_original < 10:
            raise InvalidParams("need at least 10 clips per class")
        lo, hi = self.duration_range
        if not 0 < lo <= hi:
            raise InvalidParams("invalid duration range")
        if lo < 2 * EDGE_GUARD_S + self.extent_range[1] + 1:
            raise InvalidParams("shortest clip too short to place a tamper away from the edges")
        s_lo, s_hi = self.snr_range
        if not 0 <= s_lo <= s_hi <= 60:
            raise InvalidParams("snr range must lie within [0, 60] dB")
        if not 0 <= self.adversarial_fraction < 1:
            raise InvalidParams("adversarial_fraction must lie in [0, 1)")
        if not self.tamper_mix or any(v < 0 for v in self.tamper_mix.values()) \
                or set(self.tamper_mix) - {"delete", "insert", "splice"}:
            raise InvalidParams("tamper_mix maps delete/insert/splice to non-negative weights")
        if self.nominal not in (50, 60):
            raise InvalidParams("nominal must be 50 or 60")


@dataclass
class ClipEntry:
    id: str
    label: str
    duration: float
    split: str
    seed: int
    snr_db: float
    path: str | None = None
    tamper: dict | None = None


@dataclass
class CorpusManifest:
    clips: list
    config: dict
    seed: int
    nominal: int
    f_d: int
    source_rate: int
    version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True)

    def save(self, path) -> None:
        try:
            Path(path).write_text(self.to_json())
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        d = json.loads(Path(path).read_text())
        d["clips"] = [ClipEntry(**c) for c in d["clips"]]
        return cls(**d)

    def split(self, name: str) -> list:
        return [c for c in self.clips if c.split == name]


def _round(x, nd=4):
    return float(round(float(x), nd))


def _plan_tamper(rng, op, duration, cfg, trace, adversarial, donor_trace, fs):
    """Draw a tamper whose phase step is visible (or near zero when adversarial)."""
    period = 1.0 / cfg.nominal
    for _ in range(200):
        extent = _round(rng.uniform(*cfg.extent_range), 3)
        pos = _round(rng.uniform(EDGE_GUARD_S, duration - EDGE_GUARD_S - extent), 3)
        donor_offset = 0.0
        if op != "delete":
            donor_offset = _round(rng.uniform(0.5, donor_trace.duration - extent - 0.5), 3)
        spec = TamperSpec(op, pos, extent, None, donor_offset)
        if adversarial:
            if op != "delete":
                raise InvalidParams("adversarial tampers are deletions")
            # nudge the extent to the nearest whole number of carrier cycles
            ph = carrier_phase(trace, fs)
            p = int(round(pos * fs))
            e0 = int(round(extent * fs))
            cands = np.arange(max(e0 - int(2 * period * fs), int(0.1 * fs)), e0 + int(2 * period * fs))
            steps = np.abs(wrap_phase(ph[p + cands] - ph[p]))
            spec.extent = _round(cands[int(np.argmin(steps))] / fs, 6)
        steps = tamper_phase_steps(trace, spec, fs, donor_trace)
        mags = np.abs(steps)
        if adversarial and mags.max() <= ADVERSARIAL_MAX_STEP:
            return spec, steps
        if not adversarial and mags.min() >= MIN_VISIBLE_STEP:
            return spec, steps
    raise InvalidParams("could not place a tamper with the requested phase step")


def make_clip(cfg: CorpusConfig, index: int, label: str, op: str | None = None,
              adversarial: bool = False):
    """Synthesize one corpus clip; returns ``(AudioClip, entry_fields)``.

    Every random draw comes from a generator seeded by ``(cfg.seed, index)``.
    """
    rng = np.random.default_rng([cfg.seed, index])
    fs = cfg.source_rate
    clip_seed = int(rng.integers(2 ** 31))
    duration = _round(rng.uniform(*cfg.duration_range), 2)
    snr = _round(rng.uniform(*cfg.snr_range), 2)
    fields = dict(duration=duration, seed=clip_seed, snr_db=snr, tamper=None)
    if label == "original":
        trace = gen_enf_trace(duration, cfg.nominal, cfg.drift_std, clip_seed)
        clip = synth_recording(trace, fs, snr, clip_seed + 1)
        return AudioClip(clip.samples[:int(round(duration * fs))], fs), fields

    donor_seed = clip_seed + 7919
    hi_ext = cfg.extent_range[1]
    # deletions shorten the host, so it is rendered long; every edit is cut
    # back to ``duration`` afterwards, which keeps all joins inside the clip
    host_duration = duration + (hi_ext if op == "delete" else 0.0)
    trace = gen_enf_trace(host_duration, cfg.nominal, cfg.drift_std, clip_seed)
    donor_trace = None
    if op != "delete":
        donor_trace = gen_enf_trace(hi_ext + 2.0, cfg.nominal, cfg.drift_std, donor_seed)
    spec, steps = _plan_tamper(rng, op, duration, cfg, trace, adversarial, donor_trace, fs)
    spec.donor_seed = donor_seed if op != "delete" else None
    host = synth_recording(trace, fs, snr, clip_seed + 1)
    donor = None
    if donor_trace is not None:
        donor = synth_recording(donor_trace, fs, snr, donor_seed + 1)
    edited = apply_tamper(host, spec, donor)
    edited = AudioClip(edited.samples[:int(round(duration * fs))], fs)
    fields["tamper"] = dict(op=spec.op, position=spec.position, extent=spec.extent,
                            donor_seed=spec.donor_seed, donor_offset=spec.donor_offset,
                            steps_rad=[_round(s, 6) for s in steps],
                            adversarial=bool(adversarial))
    return edited, fields


def _assign_splits(groups: dict, rng) -> dict:
    """Stratified split: each (label, op) group is divided 64/16/20."""
    out = {}
    for key in sorted(groups):
        ids = list(groups[key])
        rng.shuffle(ids)
        n = len(ids)
        n_train = int(round(SPLIT_FRACTIONS[0][1] * n))
        n_val = int(round(SPLIT_FRACTIONS[1][1] * n))
        for j, cid in enumerate(ids):
            out[cid] = "train" if j < n_train else "val" if j < n_train + n_val else "test"
    return out


def corpus_plan(cfg: CorpusConfig):
    """Deterministic list of ``(index, label, op, adversarial)`` for a corpus."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 2 ** 20])
    ops = sorted(cfg.tamper_mix)
    w = np.array([cfg.tamper_mix[o] for o in ops], dtype=float)
    counts = np.floor(w / w.sum() * cfg.n_edited).astype(int)
    counts[np.argsort(-w)[: cfg.n_edited - counts.sum()]] += 1
    n_adv = int(round(cfg.adversarial_fraction * cfg.n_edited))
    plan = []
    kinds = []
    for o, c in zip(ops, counts):
        kinds += [o] * int(c)
    adv_flags = [False] * len(kinds)
    # adversarial tampers are deletions by construction: convert some slots
    for j in range(n_adv):
        adv_flags[j] = True
        kinds[j] = "delete"
    order = rng.permutation(len(kinds))
    idx = 0
    for j in order:
        plan.append((idx, "edited", kinds[j], adv_flags[j]))
        idx += 1
    for _ in range(cfg.n_original):
        plan.append((idx, "original", None, False))
        idx += 1
    return plan


def build_corpus(cfg: CorpusConfig, out_dir=None, keep_audio: bool = False):
    """Generate a labelled corpus.

    With ``out_dir`` each clip is written as ``<id>.wav`` next to
    ``manifest.json``. Returns ``(manifest, clips)`` where ``clips`` maps id to
    ``AudioClip`` when ``keep_audio`` is true (otherwise it is empty).
    """
    plan = corpus_plan(cfg)
    if out_dir is not None:
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as exc:
            raise IoFailure(str(exc)) from exc
    entries = []
    audio = {}
    groups = {}
    for index, label, op, adv in plan:
        cid = f"clip{index:05d}"
        clip, fields = make_clip(cfg, index, label, op, adv)
        clip.source_id = cid
        path = None
        if out_dir is not None:
            path = f"{cid}.wav"
            save_wav(clip, os.path.join(out_dir, path))
        if keep_audio:
            audio[cid] = clip
        entries.append(ClipEntry(id=cid, label=label, split="", path=path, **fields))
        key = (label, (op or "none") + ("-adv" if adv else ""))
        groups.setdefault(key, []).append(cid)
    splits = _assign_splits(groups, np.random.default_rng([cfg.seed, 2 ** 21]))
    for e in entries:
        e.split = splits[e.id]
    cfg_dict = asdict(cfg)
    cfg_dict["duration_range"] = list(cfg.duration_range)
    cfg_dict["snr_range"] = list(cfg.snr_range)
    cfg_dict["extent_range"] = list(cfg.extent_range)
    manifest = CorpusManifest(entries, cfg_dict, cfg.seed, cfg.nominal,
                              default_rate_for(cfg.nominal), cfg.source_rate)
    if out_dir is not None:
        manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest, audio
