"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest -s tests/test_acceptance.py`` (or as a script). The lines
are written straight to the terminal, so they also show under plain
``pytest -v``. Criteria 5 and 6 train the full-size model on a 500-clip
corpus and take about 20 minutes together on one CPU core.
"""

import sys
import time

import numpy as np
import pytest

from enftamper.cli import STUDY_SECONDS_PER_POINT, main
from enftamper.enf_phase import (FrameConfig, extract_phase_sequence, guard_frames,
                                 phase_sequence_from_clip, recording_step_profile, wrap_phase)
from enftamper.features import frame_corpus
from enftamper.model import ModelConfig, TrainConfig, ablation_run, build_model
from enftamper.nn import grad_check
from enftamper.nn.tensor import bce_from_probs
from enftamper.signal_io import settle_seconds
from enftamper.synth import (CorpusConfig, TamperSpec, apply_tamper, build_corpus, gen_enf_trace,
                             synth_recording, tamper_phase_steps)

from conftest import jitter_biases, tone_enfc, toy_model_config

RESULTS = {}
VARIANTS = ("full", "cnn_only", "bilstm_only", "no_attention_concat")
SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        RESULTS[number] = ok
        with capsys.disabled():
            print(f"\nC{number} {'PASS' if ok else 'FAIL'}  {detail}", flush=True)
        return ok
    return emit


# ---------------------------------------------------------------- 1

def test_c1_phase_estimator_precision(report):
    t0 = time.time()
    rng = np.random.default_rng(0)
    cfg = FrameConfig(1200, 60)
    bin_hz = 1200 / cfg.n_dft
    worst_f, e0, e1 = 0.0, [], []
    count = 0
    while count < 100:
        f = 60 + rng.uniform(-0.5, 0.5)
        offset = (f / bin_hz) % 1
        if min(offset, 1 - offset) < 0.1:
            continue  # keep the sweep off-bin
        count += 1
        phi = rng.uniform(-np.pi, np.pi)
        seq = extract_phase_sequence(tone_enfc(f, 2.0, phase=phi), cfg)
        truth = wrap_phase(2 * np.pi * f * np.arange(len(seq)) * cfg.hop / 1200 + phi)
        worst_f = max(worst_f, float(np.max(np.abs(seq.freq1 - f))))
        e0.append(np.abs(wrap_phase(seq.psi0 - truth)))
        e1.append(np.abs(wrap_phase(seq.psi1 - truth)))
    m0, m1 = np.mean(np.concatenate(e0)), np.mean(np.concatenate(e1))
    dt = time.time() - t0
    ok = worst_f <= 0.005 and m1 < m0 and dt < 60
    report(1, ok, f"max |f1 err| {worst_f:.2e} Hz (<= 5e-3); mean |psi1 err| {m1:.2e} "
                  f"< mean |psi0 err| {m0:.2e} rad; {dt:.1f} s (< 60)")
    assert ok


# ---------------------------------------------------------------- 2

C2_WIDTH = 59          # frames per side in each line fit
C2_COMPARABLE = 0.5    # a jump of half the true step counts as comparable


def test_c2_discontinuity_visibility(report):
    t0 = time.time()
    trim = int(np.ceil(settle_seconds(1200, 60) * 1200))
    rng = np.random.default_rng(0)
    dur, rel, far_rel = 20, [], []
    for k in range(50):
        tr = gen_enf_trace(dur, 60, 0.01, seed=100 + k)
        host = synth_recording(tr, 8000, rng.uniform(20, 30), seed=200 + k)
        while True:
            extent = round(rng.uniform(0.2, 2.0), 3)
            pos = round(rng.uniform(4, dur - 4 - extent), 3)
            spec = TamperSpec("delete", pos, extent)
            step = tamper_phase_steps(tr, spec, 8000)[0]
            if 0.5 <= abs(step) <= np.pi - 0.5:
                break
        seq = phase_sequence_from_clip(apply_tamper(host, spec))
        cuts, steps = recording_step_profile(seq, width=C2_WIDTH)
        at = int(round((pos * 1200 - trim) / 20))
        i = int(np.flatnonzero(cuts == at)[0])
        g = guard_frames(seq.hop_seconds)
        far = np.abs(cuts - at) > 10 + 2 * g + C2_WIDTH
        rel.append(abs(steps[i] - step) / abs(step))
        far_rel.append(np.max(np.abs(steps[far])) / abs(step))
    rel, far_rel = np.array(rel), np.array(far_rel)
    within = int(np.sum(rel <= 0.1))
    clean = int(np.sum(far_rel < C2_COMPARABLE))
    dt = time.time() - t0
    ok = within == 50 and clean == 50 and dt < 120
    report(2, ok, f"{within}/50 cut steps within 10% (worst {rel.max():.1%}); {clean}/50 clips "
                  f"without a comparable jump elsewhere (largest {far_rel.max():.2f} x step); "
                  f"{dt:.1f} s (< 120)")
    assert ok


# ---------------------------------------------------------------- 3

def test_c3_framing_shapes(report):
    rng = np.random.default_rng(3)
    shapes = {}
    for longest in (2125, 2025):
        seqs = {f"c{i}": rng.normal(size=n) for i, n in enumerate((longest, longest - 300, 900))}
        labels = dict(zip(seqs, ("edited", "original", "edited")))
        splits = dict(zip(seqs, ("train", "val", "test")))
        data, _ = frame_corpus(seqs, labels, splits, 85)
        shapes[longest] = (data.P.shape[1:], data.X.shape[1:])
    ok = (shapes[2125] == ((47, 47), (85, 25)) and shapes[2025][0] == (45, 45))
    report(3, ok, f"max length 2125: P {shapes[2125][0]}, X {shapes[2125][1]}; "
                  f"max length 2025: P {shapes[2025][0]}")
    assert ok


# ---------------------------------------------------------------- 4

def test_c4_gradient_integrity(report):
    t0 = time.time()
    rng = np.random.default_rng(5)
    model = build_model(toy_model_config(dropout=0.0))
    jitter_biases(model, rng)
    P, X = rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 6, 4))
    y = np.array([0, 1, 1])
    params = model.parameters()
    err = grad_check(lambda: bce_from_probs(model.forward(P, X), y), params)
    dt = time.time() - t0
    ok = err < 1e-4 and dt < 60
    report(4, ok, f"max relative error {err:.2e} (< 1e-4) over {len(params)} parameter tensors; "
                  f"{dt:.1f} s (< 60)")
    assert ok


# ---------------------------------------------------------------- 5 and 6

@pytest.fixture(scope="module")
def detection_corpus():
    t0 = time.time()
    man, audio = build_corpus(CorpusConfig(adversarial_fraction=0.0, seed=1), keep_audio=True)
    seqs = {c.id: phase_sequence_from_clip(audio[c.id], 60).psi1 for c in man.clips}
    labels = {c.id: c.label for c in man.clips}
    splits = {c.id: c.split for c in man.clips}
    data, sizes = frame_corpus(seqs, labels, splits, 85)
    return data, sizes, time.time() - t0


ABLATION = {}


def ablation(data, sizes, variant, seed):
    if (variant, seed) not in ABLATION:
        t0 = time.time()
        mc = ModelConfig(n=sizes["n"], p_n=85, f_n=sizes["f_n"], variant=variant, seed=seed)
        metrics, res = ablation_run(data, variant, mc, TrainConfig(epochs=300, patience=25, seed=seed))
        ABLATION[variant, seed] = (metrics.accuracy, len(res.history), time.time() - t0)
    return ABLATION[variant, seed]


def test_c5_end_to_end_detection(report, detection_corpus):
    data, sizes, prep = detection_corpus
    acc, epochs, dt = ablation(data, sizes, "full", 0)
    total = prep + dt
    ok = acc >= 0.90 and total <= 1800
    report(5, ok, f"held-out accuracy {acc:.3f} (>= 0.90) on {int(np.sum(data.split == 'test'))} "
                  f"test clips after {epochs} epochs; corpus+features {prep:.0f} s, training "
                  f"{dt:.0f} s (total <= 1800)")
    assert ok


def test_c6_ablation_ordering(report, detection_corpus):
    data, sizes, _ = detection_corpus
    means = {}
    for variant in VARIANTS:
        accs = [ablation(data, sizes, variant, s)[0] for s in SEEDS]
        means[variant] = float(np.mean(accs))
    ok = all(means["full"] >= means[v] for v in VARIANTS[1:])
    table = ", ".join(f"{v} {means[v]:.3f}" for v in VARIANTS)
    report(6, ok, f"mean test accuracy over seeds {SEEDS}: {table}")
    assert ok


# ---------------------------------------------------------------- 7 and 8

SMALL = ["--edited", "10", "--original", "10", "--duration-min", "9", "--duration-max", "12",
         "--seed", "11"]
TINY = ["--conv-channels", "2,3,4", "--cnn-fc", "12,8", "--lstm-units", "4", "--rnn-fc", "12,8",
        "--mlp", "8,4", "--epochs", "3", "--batch-size", "8"]


def pipeline(root):
    for args in (["synth", *SMALL], ["extract", "--pn", "15"], ["train", *TINY], ["eval"]):
        assert main([args[0], "--run-dir", str(root), *args[1:]]) == 0


def artifacts(root):
    picked = [root / "corpus" / "manifest.json", root / "features" / "manifest.json",
              root / "model" / "history.csv", root / "model" / "model.enfw",
              root / "model" / "model.enfw.json", root / "model" / "metrics.json"]
    picked += sorted((root / "features").glob("*.csv"))
    picked += sorted((root / "features" / "phase").glob("*.csv"))
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in picked}


def test_c7_determinism(report, tmp_path):
    pipeline(tmp_path / "a")
    pipeline(tmp_path / "b")
    a, b = artifacts(tmp_path / "a"), artifacts(tmp_path / "b")
    differ = sorted(k for k in a if a[k] != b.get(k))
    ok = set(a) == set(b) and not differ
    report(7, ok, f"{len(a)} artifacts compared byte for byte across two runs; "
                  f"{len(differ)} differ {differ[:3] if differ else ''}".rstrip())
    assert ok


def test_c8_study_harness(report, tmp_path):
    pipeline(tmp_path)
    code = main(["study", "--run-dir", str(tmp_path), *TINY, "--epochs", "1"])
    lines = (tmp_path / "study" / "study.csv").read_text().splitlines() if code == 0 else []
    rows = [line.split(",") for line in lines[1:]]
    pns = [int(r[1]) for r in rows]
    ok = (code == 0 and pns == [15, 25, 35, 45, 55, 65, 75, 85, 95]
          and all(0.0 <= float(r[3]) <= 1.0 for r in rows)
          and all(abs(float(r[0]) - int(r[1]) * STUDY_SECONDS_PER_POINT) < 1e-9 for r in rows))
    report(8, ok, f"{len(rows)} rows, p_n {pns}, frame lengths "
                  f"{rows[0][0] if rows else '?'}..{rows[-1][0] if rows else '?'} s")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
