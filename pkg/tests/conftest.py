import numpy as np
import pytest

from csti.data import fit_normalizer, generate_synthetic_market, make_windows, normalize


def windowed_market(stocks, length, shared_strength, seed, lookback=16, horizon=1,
                    fractions=(0.7, 0.1, 0.2), drop_sentiment=False):
    """Generate, normalize and window a synthetic market for tests."""
    market = generate_synthetic_market(stocks, length, shared_strength, seed)
    if drop_sentiment:
        market = [s.drop_sentiment() for s in market]
    train, test, normalizers = [], [], []
    for series in market:
        params = fit_normalizer(series, fractions[0])
        normed = normalize(series, params)
        train.append(make_windows(normed, lookback, horizon, "train", fractions))
        test.append(make_windows(normed, lookback, horizon, "test", fractions))
        normalizers.append(params)
    return train, test, normalizers


def sinusoid_windows(period, lookback=16, horizon=1, total=240):
    """Pure sinusoid fixture; open is the exactly lagged close."""
    from csti.data import WindowedDataset

    t = np.arange(total, dtype=float)
    close = 0.5 + 0.3 * np.sin(2.0 * np.pi * t / period)
    opens = np.empty_like(close)
    opens[0] = close[0]
    opens[1:] = close[:-1]
    feats = np.column_stack([opens, close])
    n = total - lookback - horizon + 1
    inputs = np.stack([feats[s : s + lookback] for s in range(n)])
    targets = np.stack([close[s + lookback : s + lookback + horizon] for s in range(n)])
    return WindowedDataset("SINE", "train", lookback, horizon,
                           inputs, targets, np.arange(n) + lookback)


SANITY_PERIODS = {"dlinear": 16, "paifilter": 8, "texfilter": 8, "frets": 8}


def train_sanity_mse(kind, steps=500, learning_rate=0.1):
    """Train a kind on its matched sinusoid; returns the final epoch MSE."""
    from csti.models import build_model
    from csti.training import train_local

    ds = sinusoid_windows(SANITY_PERIODS[kind])
    steps_per_epoch = -(-ds.n_windows // 64)
    epochs = steps // steps_per_epoch
    model = build_model(kind, 16, 1, 2, seed=42)
    result = train_local(model, ds, epochs=epochs, learning_rate=learning_rate,
                         momentum=0.9, batch_size=64, seed=7)
    assert result.update_steps <= steps
    return result.epoch_losses[-1]


def random_batch(rng, n, lookback, d, horizon):
    inputs = rng.uniform(0.0, 1.0, size=(n, lookback, d))
    targets = rng.uniform(0.0, 1.0, size=(n, horizon))
    return inputs, targets


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def small_market():
    """3 stocks, 300 rows, moderate sharing; enough for fast protocol tests."""
    return windowed_market(3, 300, 0.7, seed=11)
