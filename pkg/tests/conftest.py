import numpy as np
import pytest

from enftamper.signal_io import EnfComponent


def tone(freq, seconds, rate=1200, phase=0.0, amp=1.0):
    n = np.arange(int(round(seconds * rate)))
    return amp * np.cos(2 * np.pi * freq * n / rate + phase)


def tone_enfc(freq, seconds, rate=1200, nominal=60, phase=0.0):
    return EnfComponent(tone(freq, seconds, rate, phase), rate, nominal)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_model_config(**kw):
    from enftamper.model import ModelConfig
    base = dict(n=8, p_n=6, f_n=4, conv_channels=[2, 3, 4], cnn_fc=[12, 8], lstm_units=5,
                rnn_fc=[12, 8], mlp=[12, 6], dropout=0.2, seed=0)
    base.update(kw)
    return ModelConfig(**base)


def jitter_biases(model, rng, scale=0.05):
    # kink-avoidance: zero biases can leave a ReLU input at exactly 0
    for p in model.parameters():
        if p.data.ndim == 1 and "norm" not in p.name:
            p.data += rng.normal(0, scale, p.shape)


def separable_features(count, seed=0, n=8, p_n=6, f_n=4, length=24):
    """Phase-increment sequences: edited ones carry a single large jump, originals none.

    Returns ``(P, X, y)`` with alternating labels.
    """
    from enftamper.features import spatial_features, temporal_features
    rng = np.random.default_rng(seed)
    P, X, y = [], [], []
    for i in range(count):
        d = rng.normal(0.0, 0.02, length)
        label = i % 2
        if label:
            d[rng.integers(2, length - 2)] += rng.choice([-1, 1]) * rng.uniform(1.0, 2.5)
        P.append(spatial_features(d, n))
        X.append(temporal_features(d, p_n, f_n))
        y.append(label)
    return np.array(P), np.array(X), np.array(y)
