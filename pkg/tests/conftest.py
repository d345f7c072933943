import numpy as np
import pytest

from tsxai import tsmodel as tm


def central_diff(f, x, h=1e-4):
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def max_rel_err(g, ref):
    """max_i |g_i - ref_i| / max_i |ref_i|."""
    scale = np.max(np.abs(ref))
    return float(np.max(np.abs(g - ref)) / scale) if scale > 0 else float(np.max(np.abs(g)))


def far_from_kinks(model, x, margin=1e-2):
    """True when no relu / leaky relu pre-activation lies within ``margin`` of 0."""
    _, trace = tm.forward(model, x)
    for layer, z in zip(model.layers, trace.pre_activations):
        if layer.kind != "flatten" and layer.activation in ("relu", "leaky_relu"):
            if np.min(np.abs(z)) < margin:
                return False
    return True


def small_model(F=3, T=12, conv=(4, 4), k=3, dilation=2, dense_units=(5,),
                conv_act="tanh", dense_act="leaky_relu", out_act="relu", bias=True, seed=0):
    return tm.init_model(F, T, conv, k, dilation, dense_units, conv_act, dense_act, out_act,
                         bias=bias, seed=seed)


def positive_output_input(model, rng, low=-2.0, high=2.0, tries=500, kink_margin=None):
    """Draw an input with strictly positive prediction (and optionally off-kink)."""
    for _ in range(tries):
        x = rng.uniform(low, high, model.input_shape)
        y = tm.predict(model, x)
        if y > 1e-3 and (kink_margin is None or far_from_kinks(model, x, kink_margin)):
            return x
    pytest.skip("could not draw a suitable input")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[str] = []


def record(criterion, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {title}" + \
        (f" ({detail})" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
