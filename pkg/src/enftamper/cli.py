"""``enftamper`` command line: synth, extract, train, eval, detect, study.

Settings come from built-in defaults, then an optional INI file
(``--config``, section ``[enftamper]``), then command-line flags. Outputs go
under the run directory (``--run-dir``, else ``$ENFF_RUN_DIR``, else
``./runs``). Exit codes: 0 success, 2 usage or configuration error, 3 data
error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import features as feat
from .enf_phase import PhaseSequence, phase_sequence_from_clip
from .errors import ConfigError, DataError, EnfError, InvalidParams, TooShort
from .model import (VARIANTS, ModelConfig, TrainConfig, ablation_run, build_model, evaluate,
                    load_model, save_history, save_metrics, save_model, train)
from .signal_io import default_rate_for, load_wav
from .synth import CorpusConfig, CorpusManifest, build_corpus

log = logging.getLogger("enftamper")

SECTION = "enftamper"
STUDY_PN = "15,25,35,45,55,65,75,85,95"
# the frame-length column of the study reports 0.017 s per phase point
STUDY_SECONDS_PER_POINT = 0.017
VARIANT_ALIASES = {"no_attention": "no_attention_concat", "cnn": "cnn_only",
                   "bilstm": "bilstm_only"}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    run_dir: str = ""
    corpus_dir: str = ""
    features_dir: str = ""
    model_dir: str = ""
    out_dir: str = ""
    seed: int = 0
    n_edited: int = 300
    n_original: int = 200
    duration_min: float = 9.0
    duration_max: float = 35.0
    snr_min: float = 15.0
    snr_max: float = 30.0
    adversarial_fraction: float = 0.1
    extent_min: float = 0.2
    extent_max: float = 2.0
    drift_std: float = 0.01
    source_rate: int = 8000
    nominal: int = 60
    half_bandwidth: float = 1.0
    representation: str = feat.DEFAULT_REPRESENTATION
    p_n: int = 85
    n: int = 0
    variant: str = "full"
    epochs: int = 300
    batch_size: int = 64
    lr: float = 0.001
    patience: int = 25
    conv_channels: str = "16,32,64"
    cnn_fc: str = "1024,256"
    lstm_units: int = 85
    rnn_fc: str = "512,256"
    mlp: str = "400,256,128,32"
    dropout: float = 0.2
    study_pn: str = STUDY_PN
    split: str = "test"

    # -- resolved paths -------------------------------------------------
    @property
    def root(self) -> Path:
        return Path(self.run_dir or os.environ.get("ENFF_RUN_DIR") or "runs")

    def path(self, name: str) -> Path:
        explicit = getattr(self, f"{name}_dir")
        return Path(explicit) if explicit else self.root / name

    @staticmethod
    def int_list(text: str) -> list:
        try:
            vals = [int(v) for v in str(text).split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"expected a comma-separated integer list, got {text!r}") from exc
        if not vals:
            raise ConfigError("empty integer list")
        return vals

    def validate(self) -> "RunConfig":
        if self.nominal not in (50, 60):
            raise ConfigError("nominal must be 50 or 60")
        if self.representation not in feat.REPRESENTATIONS:
            raise ConfigError(f"representation must be one of {feat.REPRESENTATIONS}")
        self.variant = VARIANT_ALIASES.get(self.variant, self.variant)
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.p_n < 1 or self.n < 0:
            raise ConfigError("p_n must be positive and n non-negative (0 = from corpus)")
        if self.split not in ("train", "val", "test"):
            raise ConfigError("split must be train, val or test")
        for name in ("conv_channels", "cnn_fc", "rnn_fc", "mlp", "study_pn"):
            if any(v < 1 for v in self.int_list(getattr(self, name))):
                raise ConfigError(f"{name} entries must be positive")
        try:
            self.corpus_config().validate()
        except InvalidParams as exc:
            raise ConfigError(str(exc)) from exc
        self.train_config().validate()
        return self

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(
            n_edited=self.n_edited, n_original=self.n_original,
            duration_range=(self.duration_min, self.duration_max),
            snr_range=(self.snr_min, self.snr_max),
            adversarial_fraction=self.adversarial_fraction, nominal=self.nominal,
            source_rate=self.source_rate, drift_std=self.drift_std,
            extent_range=(self.extent_min, self.extent_max), seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           patience=self.patience, seed=self.seed)

    def model_config(self, n: int, p_n: int, f_n: int) -> ModelConfig:
        return ModelConfig(n=n, p_n=p_n, f_n=f_n, conv_channels=self.int_list(self.conv_channels),
                           cnn_fc=self.int_list(self.cnn_fc), lstm_units=self.lstm_units,
                           rnn_fc=self.int_list(self.rnn_fc), mlp=self.int_list(self.mlp),
                           dropout=self.dropout, variant=self.variant, seed=self.seed)

    def echo(self, directory: Path, command: str) -> None:
        """Persist the effective settings next to the command's outputs."""
        cp = configparser.ConfigParser()
        cp[SECTION] = {f.name: str(getattr(self, f.name)) for f in fields(self)}
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / f"{command}_config.ini", "w") as fh:
            cp.write(fh)


def _coerce(name: str, value: str):
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot read {value!r} as {kind}") from exc
    return value


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    values = {}
    if path:
        cp = configparser.ConfigParser()
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file: {exc}") from exc
        if cp.has_section(SECTION):
            known = {f.name for f in fields(RunConfig)}
            for key, val in cp[SECTION].items():
                if key not in known:
                    raise ConfigError(f"unknown config key {key!r}")
                values[key] = _coerce(key, val)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values).validate()


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> Path:
    out = cfg.path("corpus")
    out.mkdir(parents=True, exist_ok=True)
    manifest, _ = build_corpus(cfg.corpus_config(), out)
    cfg.echo(out, "synth")
    print(f"synth: {len(manifest.clips)} clips -> {out}")
    return out


def _load_manifest(directory: Path) -> CorpusManifest:
    path = directory / "manifest.json"
    if not path.is_file():
        raise UsageError(f"no corpus manifest at {path}")
    try:
        return CorpusManifest.load(path)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"malformed corpus manifest {path}: {exc}") from exc


def _phase_path(fdir: Path, cid: str) -> Path:
    return fdir / "phase" / f"{cid}.csv"


def cmd_extract(cfg: RunConfig) -> Path:
    """Phase sequences for every clip, then corpus-sized P and X dumps."""
    cdir, fdir = cfg.path("corpus"), cfg.path("features")
    manifest = _load_manifest(cdir)
    (fdir / "phase").mkdir(parents=True, exist_ok=True)
    sequences, skipped = {}, {}
    hop = 1.0 / manifest.nominal
    for clip in manifest.clips:
        try:
            audio = load_wav(cdir / clip.path)
            seq = phase_sequence_from_clip(audio, manifest.nominal, cfg.half_bandwidth)
        except EnfError as exc:
            log.warning("skipping %s: %s", clip.id, exc)
            skipped[clip.id] = f"{type(exc).__name__}: {exc}"
            continue
        seq.to_csv(_phase_path(fdir, clip.id))
        sequences[clip.id] = seq.psi1
        hop = seq.hop_seconds
    if not sequences:
        raise DataError("no clip could be processed")
    fm = write_features(cfg, manifest, sequences, fdir, cfg.p_n, hop, skipped)
    cfg.echo(fdir, "extract")
    print(f"extract: {len(fm.clips)} clips, n={fm.n} p_n={fm.p_n} f_n={fm.f_n} -> {fdir}")
    return fdir


def write_features(cfg, manifest, sequences, fdir: Path, p_n: int, hop: float, skipped):
    entries = {c.id: c for c in manifest.clips if c.id in sequences}
    labels = {cid: entries[cid].label for cid in sequences}
    splits = {cid: entries[cid].split for cid in sequences}
    data, sizes = feat.frame_corpus(sequences, labels, splits, p_n, cfg.n or None,
                                    cfg.representation)
    clips = {}
    for i, cid in enumerate(data.ids):
        sp, tp = f"{cid}_P.csv", f"{cid}_X.csv"
        feat.save_matrix_csv(data.P[i], fdir / sp)
        feat.save_matrix_csv(data.X[i], fdir / tp)
        clips[cid] = {"label": labels[cid], "split": splits[cid], "spatial": sp, "temporal": tp}
    fm = feat.FeatureManifest(n=sizes["n"], p_n=p_n, f_n=sizes["f_n"], max_len=sizes["max_len"],
                              nominal=manifest.nominal, hop_seconds=hop,
                              representation=cfg.representation, clips=clips, skipped=skipped)
    fm.save(fdir / "manifest.json")
    return fm


def load_features(fdir: Path):
    path = fdir / "manifest.json"
    if not path.is_file():
        raise UsageError(f"no feature manifest at {path}")
    try:
        fm = feat.FeatureManifest.load(path)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"malformed feature manifest {path}: {exc}") from exc
    ids = sorted(fm.clips)
    P = np.stack([feat.load_matrix_csv(fdir / fm.clips[i]["spatial"]) for i in ids])
    X = np.stack([feat.load_matrix_csv(fdir / fm.clips[i]["temporal"]) for i in ids])
    y = np.array([1 if fm.clips[i]["label"] == "edited" else 0 for i in ids])
    split = np.array([fm.clips[i]["split"] for i in ids])
    return fm, feat.CorpusFeatures(ids, P, X, y, split)


def _progress(rec):
    log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.4f", rec.epoch, rec.train_loss,
             rec.val_loss, rec.val_accuracy)


def _train_on(cfg: RunConfig, fm, data):
    mcfg = cfg.model_config(fm.n, fm.p_n, fm.f_n)
    model = build_model(mcfg)
    tr, va = data.subset("train"), data.subset("val")
    if len(tr) == 0 or len(va) == 0:
        raise DataError("train and val splits must both be nonempty")
    result = train(model, (tr.P, tr.X, tr.y), (va.P, va.X, va.y), cfg.train_config(), _progress)
    return model, result


def cmd_train(cfg: RunConfig) -> Path:
    fm, data = load_features(cfg.path("features"))
    mdir = cfg.path("model")
    mdir.mkdir(parents=True, exist_ok=True)
    model, result = _train_on(cfg, fm, data)
    save_model(model, mdir / "model.enfw", extra={
        "features": {"n": fm.n, "p_n": fm.p_n, "f_n": fm.f_n, "nominal": fm.nominal,
                     "representation": fm.representation,
                     "half_bandwidth": cfg.half_bandwidth}})
    save_history(result.history, mdir / "history.csv")
    cfg.echo(mdir, "train")
    print(f"train: best epoch {result.best_epoch} val_acc {result.best_val_accuracy:.4f} "
          f"({len(result.history)} epochs) -> {mdir}")
    return mdir


def _load_trained(mdir: Path):
    path = mdir / "model.enfw"
    if not path.is_file():
        raise UsageError(f"no trained model at {path}")
    return load_model(path), path


def cmd_eval(cfg: RunConfig, variant_given: bool = False) -> Path:
    fm, data = load_features(cfg.path("features"))
    mdir = cfg.path("model")
    part = data.subset(cfg.split)
    if len(part) == 0:
        raise DataError(f"split {cfg.split!r} is empty")
    if variant_given:
        # ablation: train this variant from scratch with the same settings
        mdir.mkdir(parents=True, exist_ok=True)
        metrics, result = ablation_run(data, cfg.variant, cfg.model_config(fm.n, fm.p_n, fm.f_n),
                                       cfg.train_config(), _progress)
        out = mdir / f"metrics_{cfg.variant}.json"
        save_history(result.history, mdir / f"history_{cfg.variant}.csv")
    else:
        model, _ = _load_trained(mdir)
        metrics = evaluate(model, part.P, part.X, part.y)
        out = mdir / "metrics.json"
    save_metrics(metrics, out, {"split": cfg.split, "variant": cfg.variant, "count": len(part)})
    cfg.echo(mdir, "eval")
    print(f"eval: {cfg.variant} accuracy {metrics.accuracy:.4f} on {cfg.split} -> {out}")
    return out


def cmd_detect(cfg: RunConfig, wav: str) -> Path:
    model, wpath = _load_trained(cfg.path("model"))
    from .nn.weights import read_sidecar
    meta = read_sidecar(wpath).get("meta", {}).get("features")
    if not meta:
        raise UsageError("model sidecar lacks feature sizes; retrain with this version")
    try:
        audio = load_wav(wav)
    except EnfError as exc:
        raise UsageError(f"cannot read {wav}: {exc}") from exc
    try:
        seq = phase_sequence_from_clip(audio, meta["nominal"], meta.get("half_bandwidth", 1.0))
    except TooShort as exc:
        raise DataError(f"clip too short: {exc}") from exc
    series = feat.feature_input(seq.psi1, meta["representation"])
    need = max(meta["n"], meta["p_n"])
    if len(series) < need:
        raise DataError(f"clip too short: {len(series)} phase points, framing needs {need}")
    P = feat.spatial_features(series, meta["n"])
    X = feat.temporal_features(series, meta["p_n"], meta["f_n"])
    probs = model.predict_proba(P[None], X[None])[0]
    out = Path(cfg.out_dir) if cfg.out_dir else cfg.root / "detect"
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(wav).stem
    seq.to_csv(out / f"{stem}_phase.csv")
    verdict = "edited" if probs[1] > probs[0] else "original"
    result = {"file": str(wav), "p_original": float(probs[0]), "p_edited": float(probs[1]),
              "verdict": verdict, "phase_points": len(series)}
    (out / f"{stem}.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"detect: {stem} -> {verdict} (p_edited={probs[1]:.4f})")
    return out / f"{stem}.json"


def cmd_study(cfg: RunConfig) -> Path:
    """Retrain and score the model once per temporal frame size p_n."""
    cdir, fdir = cfg.path("corpus"), cfg.path("features")
    manifest = _load_manifest(cdir)
    fm0 = _load_feature_manifest(fdir)
    sequences = {}
    for cid in sorted(fm0.clips):
        sequences[cid] = PhaseSequence.from_csv(_phase_path(fdir, cid), fm0.nominal,
                                                fm0.hop_seconds).psi1
    out = Path(cfg.out_dir) if cfg.out_dir else cfg.root / "study"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for p_n in cfg.int_list(cfg.study_pn):
        sub = out / f"pn{p_n:03d}"
        sub.mkdir(exist_ok=True)
        fm = write_features(cfg, manifest, sequences, sub, p_n, fm0.hop_seconds, {})
        _, data = load_features(sub)
        model, result = _train_on(cfg, fm, data)
        te = data.subset(cfg.split)
        m = evaluate(model, te.P, te.X, te.y)
        save_history(result.history, sub / "history.csv")
        rows.append((round(p_n * STUDY_SECONDS_PER_POINT, 3), p_n, fm.f_n, m.accuracy))
        log.info("study p_n=%d f_n=%d accuracy=%.4f", p_n, fm.f_n, m.accuracy)
    path = out / "study.csv"
    lines = ["frame_length_s,p_n,f_n,accuracy"]
    lines += [f"{fl!r},{p},{f},{a!r}" for fl, p, f, a in rows]
    path.write_text("\n".join(lines) + "\n")
    cfg.echo(out, "study")
    print(f"study: {len(rows)} rows -> {path}")
    return path


def _load_feature_manifest(fdir: Path):
    path = fdir / "manifest.json"
    if not path.is_file():
        raise UsageError(f"no feature manifest at {path}")
    try:
        return feat.FeatureManifest.load(path)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"malformed feature manifest {path}: {exc}") from exc


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------

ALIASES = {"n_edited": ["--edited"], "n_original": ["--original"], "p_n": ["--pn"]}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with an [enftamper] section")
    common.add_argument("-v", "--verbose", action="store_true", help="progress to stderr")
    for f in fields(RunConfig):
        flags = [f"--{f.name.replace('_', '-')}"] + ALIASES.get(f.name, [])
        common.add_argument(*flags, dest=f.name, default=None, metavar=f.name.upper(),
                            type={"int": int, "float": float}.get(f.type, str))
    parser = argparse.ArgumentParser(prog="enftamper", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("synth", "generate a labelled synthetic corpus"),
                       ("extract", "phase sequences and P/X features for a corpus"),
                       ("train", "train the classifier on extracted features"),
                       ("eval", "score a trained model, or train and score a variant"),
                       ("study", "accuracy against temporal frame size p_n")):
        sub.add_parser(name, parents=[common], help=text)
    det = sub.add_parser("detect", parents=[common], help="classify one WAV file")
    det.add_argument("wav")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        cfg = load_run_config(args.config, overrides)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "extract":
            cmd_extract(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, variant_given=args.variant is not None)
        elif args.command == "detect":
            cmd_detect(cfg, args.wav)
        else:
            cmd_study(cfg)
    except (UsageError, ConfigError) as exc:
        print(f"enftamper {args.command}: {exc}", file=sys.stderr)
        return 2
    except (DataError, TooShort) as exc:
        print(f"enftamper {args.command}: {exc}", file=sys.stderr)
        return 3
    except EnfError as exc:
        print(f"enftamper {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        # InvalidParams and friends from corpus settings
        print(f"enftamper {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
