"""Shared fixtures: small trained networks on Gaussian blobs."""

import numpy as np
import pytest

from warplab.nn import NetworkSpec, TrainConfig, gen_blobs, split_forget, train_from_scratch


def fd_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        e = x.copy()
        e[i] += h
        fp = f(e)
        e[i] -= 2 * h
        out[i] = (fp - f(e)) / (2 * h)
    return out


@pytest.fixture(scope="session")
def blob_scenario():
    """2-hidden-layer net overtrained on 4 blobs in 16-D, with a 2% forget split."""
    data = gen_blobs(0, 200, 16, 4, 0.5)
    retain, forget = split_forget(data, 0.02, 0)
    spec = NetworkSpec((16, 32, 32, 4), seed=0)
    theta = train_from_scratch(spec, data, TrainConfig(200, 0.1, 32, 0))
    return spec, data, retain, forget, theta


@pytest.fixture(scope="session")
def small_scenario():
    """Cheap [8,12,10,3] net for finite-difference style checks."""
    data = gen_blobs(3, 30, 8, 3, 0.6)
    retain, forget = split_forget(data, 0.1, 3)
    spec = NetworkSpec((8, 12, 10, 3), seed=3)
    theta = train_from_scratch(spec, data, TrainConfig(30, 0.1, 16, 3))
    return spec, data, retain, forget, theta


def min_hidden_preact(spec, params, X):
    """Smallest |pre-activation| over hidden units: distance to the nearest relu kink."""
    from warplab.nn import _forward_full
    _, zs = _forward_full(spec, params, np.atleast_2d(X))
    return min(float(np.abs(z).min()) for z in zs[:-1]) if len(zs) > 1 else np.inf


def random_kink_free_triple(rng, margin=1e-3, n=6, n_classes=3):
    """Random (spec, params, batch) whose hidden pre-activations avoid relu ties."""
    from warplab.nn import LabeledSet, NetworkSpec, init_params
    while True:
        dims = (int(rng.integers(2, 6)), int(rng.integers(2, 7)), int(rng.integers(2, 6)), n_classes)
        spec = NetworkSpec(dims, seed=int(rng.integers(2**31)))
        p = init_params(spec)
        batch = LabeledSet(rng.normal(size=(n, dims[0])), rng.integers(0, n_classes, n),
                           n_classes=n_classes)
        if min_hidden_preact(spec, p, batch.X) > margin:
            return spec, p, batch


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
