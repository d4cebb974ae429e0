"""Fixed-shape framings of a variable-length phase sequence.

``spatial_features`` lays a sequence into an n x n matrix with an
adaptive shift so that every clip of a corpus yields the same square shape;
``temporal_features`` cuts it into ``f_n`` frames of ``p_n`` points that a
recurrent network reads as a sequence. Both copy values, never interpolate,
and pad with 0 past the end of the sequence.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .enf_phase import wrap_phase
from .errors import ConfigError, TooShort

PAD_VALUE = 0.0
REPRESENTATIONS = ("dpsi1", "psi1")
DEFAULT_REPRESENTATION = "dpsi1"


def phase_increments(psi1) -> np.ndarray:
    """Wrapped frame-to-frame change of psi1, with 0 for the first frame.

    Same length as the input and still in (-pi, pi], but free of the 2*pi
    sawtooth that a slightly off-nominal mains frequency draws in psi1.
    """
    psi = np.asarray(psi1, dtype=np.float64)
    out = np.zeros_like(psi)
    out[1:] = wrap_phase(np.diff(psi))
    return out


def feature_input(psi1, representation: str = DEFAULT_REPRESENTATION) -> np.ndarray:
    """The sequence that gets framed: ``dpsi1`` (increments) or ``psi1`` as is."""
    if representation == "psi1":
        return np.asarray(psi1, dtype=np.float64)
    if representation == "dpsi1":
        return phase_increments(psi1)
    raise ConfigError(f"representation must be one of {REPRESENTATIONS}")


def corpus_spatial_size(max_len: int) -> int:
    """Side of the square spatial matrix: ``ceil(sqrt(max_len))``."""
    if max_len < 4:
        raise ValueError("need at least 4 phase points")
    return math.isqrt(max_len - 1) + 1


def spatial_shift(length: int, n: int) -> int:
    """Row-to-row shift ``ceil((L - n) / (n - 1))``, never below 1."""
    if n < 2:
        return 1
    return max(1, -(-(length - n) // (n - 1)))


def _frame_matrix(psi: np.ndarray, size: int, count: int, shift: int) -> np.ndarray:
    out = np.full((count, size), PAD_VALUE)
    for i in range(count):
        seg = psi[i * shift:i * shift + size]
        out[i, :len(seg)] = seg
    return out


def spatial_features(psi1, n: int) -> np.ndarray:
    """Stack ``n`` overlapping frames of length ``n`` as the rows of an n x n matrix."""
    psi = np.asarray(psi1, dtype=np.float64)
    if len(psi) < n:
        raise TooShort(f"phase sequence of {len(psi)} points is shorter than n={n}")
    return _frame_matrix(psi, n, n, spatial_shift(len(psi), n))


def corpus_temporal_size(max_len: int, p_n: int) -> int:
    """Number of temporal frames ``ceil(max_len / p_n)``."""
    if p_n < 1 or max_len < p_n:
        raise ValueError("max_len must be at least p_n")
    return -(-max_len // p_n)


def temporal_shift(length: int, f_n: int) -> int:
    return max(1, length // f_n)


def temporal_features(psi1, p_n: int, f_n: int) -> np.ndarray:
    """``p_n`` x ``f_n`` matrix; column j holds points ``[j*s, j*s + p_n)``, ``s = floor(L / f_n)``."""
    psi = np.asarray(psi1, dtype=np.float64)
    if len(psi) < p_n:
        raise TooShort(f"phase sequence of {len(psi)} points is shorter than p_n={p_n}")
    return _frame_matrix(psi, p_n, f_n, temporal_shift(len(psi), f_n)).T.copy()


def frame_length_seconds(p_n: int, hop_seconds: float) -> float:
    return p_n * hop_seconds


# --------------------------------------------------------------------------
# Dumps
# --------------------------------------------------------------------------

def save_matrix_csv(matrix: np.ndarray, path) -> None:
    # repr() round-trips float64 exactly, so reruns are byte-identical
    lines = [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(matrix)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


@dataclass
class FeatureManifest:
    n: int
    p_n: int
    f_n: int
    max_len: int
    nominal: int
    hop_seconds: float
    representation: str = DEFAULT_REPRESENTATION
    clips: dict = field(default_factory=dict)  # id -> {"label", "split", "spatial", "temporal"}
    skipped: dict = field(default_factory=dict)  # id -> reason
    version: int = 1

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "FeatureManifest":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class CorpusFeatures:
    """In-memory feature set: stacked P and X with labels and split names."""
    ids: list
    P: np.ndarray  # (N, n, n)
    X: np.ndarray  # (N, p_n, f_n)
    y: np.ndarray  # (N,) 0 = original, 1 = edited
    split: np.ndarray  # (N,) of str

    def subset(self, name: str) -> "CorpusFeatures":
        m = self.split == name
        return CorpusFeatures([i for i, k in zip(self.ids, m) if k], self.P[m], self.X[m],
                              self.y[m], self.split[m])

    def __len__(self):
        return len(self.ids)


def frame_corpus(sequences: dict, labels: dict, splits: dict, p_n: int = 85,
                 n: int | None = None, representation: str = DEFAULT_REPRESENTATION,
                 ) -> tuple[CorpusFeatures, dict]:
    """Two-pass framing of a whole corpus of phase sequences.

    The first pass finds the longest sequence and fixes ``n`` and ``f_n``; the
    second frames every clip with those sizes. ``sequences`` maps clip id to
    its psi1 array. Returns the features and a dict of the corpus sizes.
    """
    ids = sorted(sequences)
    seqs = {i: feature_input(sequences[i], representation) for i in ids}
    max_len = max(len(seqs[i]) for i in ids)
    n = n or corpus_spatial_size(max_len)
    f_n = corpus_temporal_size(max_len, p_n)
    P = np.stack([spatial_features(seqs[i], n) for i in ids])
    X = np.stack([temporal_features(seqs[i], p_n, f_n) for i in ids])
    y = np.array([1 if labels[i] == "edited" else 0 for i in ids])
    sp = np.array([splits[i] for i in ids])
    return CorpusFeatures(ids, P, X, y, sp), dict(n=n, p_n=p_n, f_n=f_n, max_len=max_len)
