import numpy as np
import pytest

from gossip_dfl import model as M
from gossip_dfl.numerics import SeededRng


@pytest.fixture
def rng():
    return SeededRng(12345)


def _signs(trace):
    return np.concatenate([z > 0 for z in trace.pre_activations[:-1]])


def finite_difference_grad(params, cfg, v, label, lam, step=1e-5):
    """Central differences of the per-example loss, one coordinate at a time.

    If the +-step probes land on different sides of a leaky-ReLU kink the
    coordinate is re-measured with a step 100x smaller.
    """
    flat = params.flat.copy()
    out = np.empty_like(flat)
    base = _signs(M.forward(params, cfg, v))

    def probe(i, h):
        orig = flat[i]
        flat[i] = orig + h
        tu = M.forward(params.with_flat(flat), cfg, v)
        flat[i] = orig - h
        td = M.forward(params.with_flat(flat), cfg, v)
        flat[i] = orig
        crossed = not (np.array_equal(_signs(tu), base) and np.array_equal(_signs(td), base))
        return (M.loss(tu, v, label, lam) - M.loss(td, v, label, lam)) / (2 * h), crossed

    for i in range(flat.shape[0]):
        out[i], crossed = probe(i, step)
        if crossed:
            out[i], _ = probe(i, step / 100)
    return out


def random_params(cfg, rng, bias_scale=0.2):
    """Glorot weights plus uniform biases, so activations sit away from zero."""
    p = M.init_params(cfg, rng)
    views = p.views()
    for s, v in zip(p.layer_shapes, views):
        if "b" in v:
            v["b"] = rng.uniform(-bias_scale, bias_scale, v["b"].shape)
    return M.ModelParams.from_views(p.layer_shapes, views)


def gradient_mismatch(analytic, numeric, rel=1e-4, abs_floor=1e-7):
    """Indices where neither the relative nor the absolute tolerance holds."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.flatnonzero((diff > rel * scale) & (diff > abs_floor))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
