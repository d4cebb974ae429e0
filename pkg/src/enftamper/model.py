"""Parallel CNN / BiLSTM tamper classifier: build, train, evaluate, persist.

Class 0 is "original", class 1 is "edited". The spatial branch reads the
n x n matrix P, the temporal branch reads X (p_n x f_n) as f_n timesteps
of p_n values. Their 256-wide embeddings are fused by a sigmoid gate and
classified by a small MLP.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptWeights, DataError, ShapeMismatch
from .nn import (AttentionFuse, BiLSTM, Conv2D, Dense, Layer, LayerNorm, adam_step,
                 bce_from_probs, dropout, maxpool2d, pooled_size, zero_grads)
from .nn import weights as wfile
from .nn.tensor import Tensor, concat, reshape, softmax_op

VARIANTS = ("full", "cnn_only", "bilstm_only", "no_attention_concat")
CLASS_NAMES = ("original", "edited")


@dataclass
class ModelConfig:
    n: int = 45
    p_n: int = 85
    f_n: int = 25
    conv_channels: list = field(default_factory=lambda: [16, 32, 64])
    kernel: int = 3
    cnn_fc: list = field(default_factory=lambda: [1024, 256])
    lstm_units: int = 85
    rnn_fc: list = field(default_factory=lambda: [512, 256])
    mlp: list = field(default_factory=lambda: [400, 256, 128, 32])
    dropout: float = 0.2
    variant: str = "full"
    seed: int = 0

    def validate(self) -> "ModelConfig":
        sizes = [self.n, self.p_n, self.f_n, self.kernel, self.lstm_units,
                 *self.conv_channels, *self.cnn_fc, *self.rnn_fc, *self.mlp]
        if any(int(s) < 1 for s in sizes) or not (self.conv_channels and self.cnn_fc
                                                  and self.rnn_fc and self.mlp):
            raise ConfigError("all model sizes must be positive and every layer list nonempty")
        if self.kernel % 2 == 0:
            raise ConfigError("convolution kernel must be odd")
        if self.n < 2:
            # ceil pooling takes any side down to 1 x 1, so n = 2 is the floor
            raise ConfigError("n must be at least 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.variant == "full" and self.fused_width < 16:
            raise ConfigError("attention fusion needs a fused width of at least 16")
        return self

    @property
    def pooled_side(self) -> int:
        side = self.n
        for _ in self.conv_channels:
            side = pooled_size(side, ceil_mode=True)
        return side

    @property
    def flatten_width(self) -> int:
        return self.pooled_side ** 2 * self.conv_channels[-1]

    @property
    def fused_width(self) -> int:
        if self.variant == "cnn_only":
            return self.cnn_fc[-1]
        if self.variant == "bilstm_only":
            return self.rnn_fc[-1]
        return self.cnn_fc[-1] + self.rnn_fc[-1]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 64
    lr: float = 0.001
    patience: int = 40
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        return self


@dataclass
class Metrics:
    accuracy: float
    loss: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


class TamperNet(Layer):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg.validate()
        rng = np.random.default_rng([cfg.seed, 0])
        self.uses_spatial = cfg.variant != "bilstm_only"
        self.uses_temporal = cfg.variant != "cnn_only"

        if self.uses_spatial:
            chans = [1, *cfg.conv_channels]
            self.convs = [Conv2D(chans[i], chans[i + 1], cfg.kernel, rng, f"cnn.conv{i + 1}")
                          for i in range(len(cfg.conv_channels))]
            widths = [cfg.flatten_width, *cfg.cnn_fc]
            self.cnn_fc = [Dense(widths[i], widths[i + 1], "relu", rng, f"cnn.fc{i + 1}")
                           for i in range(len(cfg.cnn_fc))]
        if self.uses_temporal:
            u2 = 2 * cfg.lstm_units
            self.bilstm1 = BiLSTM(cfg.p_n, cfg.lstm_units, rng, "rnn.bilstm1")
            self.norm1 = LayerNorm(u2, "rnn.norm1")
            self.bilstm2 = BiLSTM(u2, cfg.lstm_units, rng, "rnn.bilstm2")
            self.norm2 = LayerNorm(u2, "rnn.norm2")
            widths = [u2, *cfg.rnn_fc]
            self.rnn_fc = [Dense(widths[i], widths[i + 1], "relu", rng, f"rnn.fc{i + 1}")
                           for i in range(len(cfg.rnn_fc))]

        width = cfg.fused_width
        self.fuse = AttentionFuse(width, rng, "fuse") if cfg.variant == "full" else None
        widths = [width, *cfg.mlp]
        self.mlp = [Dense(widths[i], widths[i + 1], "leaky_relu", rng, f"head.fc{i + 1}")
                    for i in range(len(cfg.mlp))]
        self.out = Dense(cfg.mlp[-1], 2, "identity", rng, "head.out")

    def parameters(self) -> list:
        # fixed, explicit order so weight files are stable
        params = []
        for group in ("convs", "cnn_fc", "bilstm1", "norm1", "bilstm2", "norm2", "rnn_fc",
                      "fuse", "mlp", "out"):
            obj = getattr(self, group, None)
            if obj is None:
                continue
            for layer in (obj if isinstance(obj, list) else [obj]):
                params.extend(layer.parameters())
        return params

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    # ------------------------------------------------------------------
    def spatial(self, P) -> Tensor:
        h = Tensor(np.asarray(P, dtype=np.float64)[..., None], requires_grad=False)
        for conv in self.convs:
            h = maxpool2d(conv(h), ceil_mode=True)
        h = reshape(h, (h.shape[0], -1))
        for layer in self.cnn_fc:
            h = layer(h)
        return h

    def temporal(self, X) -> Tensor:
        seq = Tensor(np.asarray(X, dtype=np.float64).transpose(0, 2, 1), requires_grad=False)
        s1, _ = self.bilstm1(seq)
        _, final = self.bilstm2(self.norm1(s1))
        h = self.norm2(final)
        for layer in self.rnn_fc:
            h = layer(h)
        return h

    def forward(self, P, X, training: bool = False, rng=None) -> Tensor:
        cfg = self.cfg
        P = np.asarray(P, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        if P.ndim == 2:
            P = P[None]
        if X.ndim == 2:
            X = X[None]
        if P.shape[1:] != (cfg.n, cfg.n) or X.shape[1:] != (cfg.p_n, cfg.f_n) \
                or P.shape[0] != X.shape[0]:
            raise ShapeMismatch(f"expected P (N, {cfg.n}, {cfg.n}) and X (N, {cfg.p_n}, {cfg.f_n}),"
                                f" got {P.shape} and {X.shape}")
        parts = []
        if self.uses_spatial:
            parts.append(self.spatial(P))
        if self.uses_temporal:
            parts.append(self.temporal(X))
        if self.fuse is not None:
            h = self.fuse(*parts)
        else:
            h = parts[0] if len(parts) == 1 else concat(parts, axis=-1)
        for layer in self.mlp:
            h = dropout(layer(h), cfg.dropout, training, rng)
        return softmax_op(self.out(h))

    def predict_proba(self, P, X, batch_size: int = 64) -> np.ndarray:
        P = np.asarray(P, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        if P.ndim == 2:
            P, X = P[None], X[None]
        out = [self.forward(P[i:i + batch_size], X[i:i + batch_size]).data
               for i in range(0, len(P), batch_size)]
        return np.concatenate(out)

    def named_arrays(self):
        return [(p.name, p.data) for p in self.parameters()]


def build_model(cfg: ModelConfig) -> TamperNet:
    return TamperNet(cfg)


def forward(model: TamperNet, P, X, mode: str = "eval", rng=None) -> np.ndarray:
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    return model.forward(P, X, training=mode == "train", rng=rng).data


# --------------------------------------------------------------------------
# Training and evaluation
# --------------------------------------------------------------------------

def _check_data(P, X, y):
    y = np.asarray(y)
    if len(y) == 0:
        raise DataError("empty data set")
    if not np.all(np.isin(y, (0, 1))):
        raise DataError("labels must be 0 (original) or 1 (edited)")
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(X))):
        raise DataError("features contain NaN or infinity")
    if not len(P) == len(X) == len(y):
        raise DataError("P, X and labels differ in length")
    return y.astype(int)


def evaluate(model: TamperNet, P, X, y, batch_size: int = 64) -> Metrics:
    y = _check_data(P, X, y)
    probs = model.predict_proba(P, X, batch_size)
    pred = probs.argmax(axis=1)
    picked = np.clip(probs[np.arange(len(y)), y], 1e-12, 1 - 1e-12)
    tp = int(np.sum((pred == 1) & (y == 1)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    return Metrics(accuracy=(tp + tn) / len(y), loss=float(-np.mean(np.log(picked))),
                   tp=tp, fp=fp, tn=tn, fn=fn)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_accuracy: float


def train(model: TamperNet, train_set, val_set, tc: TrainConfig, log=None) -> TrainResult:
    """Mini-batch Adam training with best-validation-accuracy weight retention.

    ``train_set`` and ``val_set`` are ``(P, X, y)`` triples. The batch order
    and dropout masks come from ``tc.seed``, so a rerun reproduces the history
    bit for bit. Training stops after ``tc.patience`` epochs without a new best
    validation accuracy; the best weights (earliest on ties) are restored.
    """
    tc.validate()
    Ptr, Xtr, ytr = train_set
    Pva, Xva, yva = val_set
    ytr = _check_data(Ptr, Xtr, ytr)
    yva = _check_data(Pva, Xva, yva)
    Ptr, Xtr = np.asarray(Ptr, dtype=np.float64), np.asarray(Xtr, dtype=np.float64)

    params = model.parameters()
    order_rng = np.random.default_rng([tc.seed, 1])
    drop_rng = np.random.default_rng([tc.seed, 2])
    best = (-1.0, 0, [p.data.copy() for p in params])
    history = []
    step = 0
    for epoch in range(1, tc.epochs + 1):
        order = order_rng.permutation(len(ytr))
        total = 0.0
        for lo in range(0, len(order), tc.batch_size):
            idx = order[lo:lo + tc.batch_size]
            zero_grads(params)
            probs = model.forward(Ptr[idx], Xtr[idx], training=True, rng=drop_rng)
            loss = bce_from_probs(probs, ytr[idx])
            loss.backward()
            step += 1
            adam_step(params, tc.lr, step)
            total += float(loss.data) * len(idx)
        m = evaluate(model, Pva, Xva, yva, tc.batch_size)
        rec = EpochRecord(epoch, total / len(ytr), m.loss, m.accuracy)
        history.append(rec)
        if log:
            log(rec)
        if m.accuracy > best[0]:
            best = (m.accuracy, epoch, [p.data.copy() for p in params])
        elif epoch - best[1] >= tc.patience:
            break
    for p, saved in zip(params, best[2]):
        p.data[...] = saved
    return TrainResult(history, best[1], best[0])


def save_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_accuracy)])


def save_metrics(metrics: Metrics, path, extra: dict | None = None) -> None:
    d = metrics.to_dict()
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

def save_model(model: TamperNet, path, extra: dict | None = None) -> None:
    meta = {"model_config": asdict(model.cfg), **(extra or {})}
    wfile.save_weights(model.named_arrays(), path, meta=meta)


def load_model(path) -> TamperNet:
    named = wfile.load_weights(path)
    side = wfile.read_sidecar(path)
    try:
        cfg = ModelConfig.from_dict(side["meta"]["model_config"])
    except (KeyError, TypeError) as exc:
        raise CorruptWeights("sidecar lacks the model configuration") from exc
    model = build_model(cfg)
    params = model.parameters()
    if [n for n, _ in named] != [p.name for p in params]:
        raise CorruptWeights("parameter names do not match the configured architecture")
    for p, (name, arr) in zip(params, named):
        if arr.shape != p.data.shape:
            raise CorruptWeights(f"{name}: stored shape {arr.shape}, expected {p.data.shape}")
        p.data[...] = arr
    return model


# --------------------------------------------------------------------------
# Ablations
# --------------------------------------------------------------------------

def ablation_run(features, variant: str, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 log=None) -> tuple[Metrics, TrainResult]:
    """Train ``variant`` on the train split, select on val, score on test."""
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    cfg = ModelConfig.from_dict({**asdict(model_cfg), "variant": variant})
    model = build_model(cfg)
    tr, va, te = (features.subset(s) for s in ("train", "val", "test"))
    result = train(model, (tr.P, tr.X, tr.y), (va.P, va.X, va.y), train_cfg, log=log)
    return evaluate(model, te.P, te.X, te.y), result
