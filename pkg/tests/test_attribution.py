import itertools
import math

import numpy as np
import pytest

from tsxai import attribution as at
from tsxai import segperturb as sp
from tsxai import tsmodel as tm

from conftest import central_diff, max_rel_err, positive_output_input, small_model


def linear_model(W, bias=None):
    F, T = W.shape
    b = None if bias is None else [bias]
    return tm.Model([tm.dense(F * T, 1, "linear", weights=W.reshape(1, -1), biases=b,
                              bias=bias is not None)], (F, T))


def classic_gradcam(model, x, idx):
    """Pool gradients, weight feature maps, ReLU, broadcast to F rows."""
    A, G = tm.feature_map_gradient(model, x, idx)
    alpha = G.mean(axis=1)
    heat = np.maximum(alpha @ A, 0.0)
    return np.broadcast_to(heat, x.shape)


# -- saliency ---------------------------------------------------------------------


def test_saliency_linear_equals_weights(rng):
    W = rng.normal(size=(2, 5))
    m = at.saliency(linear_model(W), rng.normal(size=(2, 5)))
    assert np.array_equal(m.values, W)


def test_saliency_matches_finite_differences(rng):
    model = small_model(seed=8)
    x = positive_output_input(model, rng, kink_margin=1e-2)
    fd = central_diff(lambda v: tm.predict(model, v), x)
    assert max_rel_err(at.saliency(model, x).values, fd) < 1e-5


def test_saliency_deterministic(rng):
    model = small_model()
    x = rng.normal(size=model.input_shape)
    assert np.array_equal(at.saliency(model, x).values, at.saliency(model, x.copy()).values)


# -- grad-cam ---------------------------------------------------------------------


def test_gradcam_reduces_to_classic(rng):
    model = small_model(conv=(4, 4, 4), seed=2)
    for _ in range(5):
        x = rng.uniform(-2, 2, model.input_shape)
        for idx in model.conv_indices:
            got = at.gradcam(model, x, idx, 0.0, 0.0).values
            assert np.array_equal(got, classic_gradcam(model, x, idx))


def test_gradcam_beta_linearity(rng):
    model = small_model(seed=6)
    x = rng.uniform(-2, 2, model.input_shape)
    comp = at.gradcam_components(model, x, 1)
    for beta in (0.1, 0.5, 0.9):
        got = at.gradcam(model, x, 1, beta, 0.0).values
        expected = np.maximum(comp["global"] + beta * comp["time"], 0.0)
        assert np.array_equal(got, np.broadcast_to(expected, x.shape))


def test_gradcam_sigma_modulates_rows(rng):
    model = small_model(seed=6)
    x = rng.uniform(-2, 2, model.input_shape)
    m0 = at.gradcam(model, x, 0, 0.3, 0.0).values
    assert np.all(m0 == m0[0])
    m1 = at.gradcam(model, x, 0, 0.3, 0.5).values
    comp = at.gradcam_components(model, x, 0)
    raw = comp["global"] + 0.3 * comp["time"] + 0.5 * comp["channel"]
    np.testing.assert_allclose(m1, np.maximum(raw, 0), rtol=1e-12, atol=1e-15)


def test_gradcam_nonnegative(rng):
    model = small_model(seed=9)
    for beta, sigma in itertools.product((0, 0.5, 1), (0, 0.5, 1)):
        m = at.gradcam(model, rng.normal(size=model.input_shape), None, beta, sigma)
        assert np.all(m.values >= 0)


def test_gradcam_negative_readout_gives_zero_map():
    layers = [tm.conv1d(1, 2, 1, activation="relu", weights=np.ones((2, 1, 1)), bias=False),
              tm.dense(8, 1, "linear", weights=-np.ones((1, 8)), bias=False)]
    model = tm.Model(layers, (1, 4))
    m = at.gradcam(model, np.array([[1.0, 2.0, 0.5, 3.0]]), 0)
    assert np.all(m.values == 0)


def test_gradcam_constant_gradient_hand_value():
    # one feature map A = x (x >= 0), readout weight c everywhere
    c = 0.7
    layers = [tm.conv1d(1, 1, 1, activation="linear", weights=np.ones((1, 1, 1)), bias=False),
              tm.dense(5, 1, "linear", weights=np.full((1, 5), c), bias=False)]
    model = tm.Model(layers, (1, 5))
    x = np.array([[0.0, 1.0, 2.0, 0.5, 4.0]])
    m = at.gradcam(model, x, 0)
    np.testing.assert_allclose(m.values, c * x, rtol=1e-15)


def test_gradcam_errors(rng):
    model = small_model()
    x = rng.normal(size=model.input_shape)
    with pytest.raises(ValueError):
        at.gradcam(model, x, 0, beta=1.5)
    with pytest.raises(ValueError):
        at.gradcam(model, x, len(model.layers) - 1)


def test_interp_time_is_linear():
    h = np.array([0.0, 1.0, 4.0])
    out = at._interp_time(h, 5)
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0, 2.5, 4.0])


# -- lrp ------------------------------------------------------------------------------


def test_lrp_conserves_on_bias_free_net(rng):
    model = small_model(bias=False, seed=3)
    x = positive_output_input(model, rng)
    m = at.lrp(model, x, 0.0)
    y = tm.predict(model, x)
    assert abs(m.values.sum() - y) / y < 1e-6


def test_lrp_zero_input_bias_free():
    model = small_model(bias=False, seed=3)
    assert np.all(at.lrp(model, np.zeros(model.input_shape)).values == 0)


def test_lrp_linear_layer(rng):
    W = rng.normal(size=(1, 4))
    x = rng.normal(size=(1, 4))
    np.testing.assert_allclose(at.lrp(linear_model(W), x, 0.0).values, W * x, rtol=1e-13)


# -- surrogate fitting ------------------------------------------------------------------


def brute_weighted_lstsq(Z, y, w):
    """Unregularised WLS with intercept via the pseudo-inverse."""
    X = np.hstack([np.ones((len(Z), 1)), Z])
    sw = np.sqrt(w)
    beta = np.linalg.pinv(X * sw[:, None]) @ (y * sw)
    return beta[1:], beta[0]


def test_weighted_ridge_zero_penalty_matches_pinv(rng):
    Z = rng.integers(0, 2, size=(40, 5)).astype(float)
    y = rng.normal(size=40)
    w = rng.uniform(0.1, 1.0, size=40)
    coef, b = at.weighted_ridge(Z, y, w, 0.0)
    ref_c, ref_b = brute_weighted_lstsq(Z, y, w)
    np.testing.assert_allclose(coef, ref_c, rtol=1e-9, atol=1e-12)
    assert math.isclose(b, ref_b, rel_tol=1e-9, abs_tol=1e-12)


def test_weighted_ridge_singular():
    Z = np.ones((6, 2))
    Z[:, 1] = [0, 1, 0, 1, 0, 1]
    Z[:, 0] = Z[:, 1]
    with pytest.raises(at.IllConditionedError):
        at.weighted_ridge(Z, np.arange(6.0), np.ones(6), 0.0)


def test_lime_additive_model_full_enumeration():
    x = np.array([[1.0, 2.0, 3.0, -1.0]])
    model = linear_model(np.ones((1, 4)))
    cfg = at.ExplainerConfig("lime", n_segments=2, full_enumeration=True, ridge=0.0)
    m = at.lime(model, x, cfg)
    np.testing.assert_allclose(m.metadata["coefficients"], [3.0, 2.0], rtol=1e-12)
    np.testing.assert_allclose(m.values, [[3.0, 3.0, 2.0, 2.0]], rtol=1e-12)


def test_lime_constant_model_gives_zero():
    model = tm.Model([tm.dense(6, 1, "linear", weights=np.zeros((1, 6)), biases=[2.0])], (2, 3))
    cfg = at.ExplainerConfig("lime", n_segments=3, neighborhood=40)
    m = at.lime(model, np.random.default_rng(0).normal(size=(2, 3)), cfg)
    assert np.all(m.values == 0)


def test_lime_local_fidelity_linear_in_mask(rng):
    W = rng.normal(size=(2, 6))
    x = rng.normal(size=(2, 6))
    model = linear_model(W, bias=0.3)
    cfg = at.ExplainerConfig("lime", n_segments=3, full_enumeration=True, ridge=0.0)
    m = at.lime(model, x, cfg)
    part = sp.make_partition(x, "uniform", 3)
    masks = sp.all_coalitions(part.n_segments)
    preds = tm.predict_batch(model, sp.perturb_many(x, part, masks, "zero"))
    surrogate = m.metadata["intercept"] + (1 - masks) @ np.array(m.metadata["coefficients"])
    assert np.max(np.abs(surrogate - preds)) < 1e-8


def test_lime_deterministic_given_seed(rng):
    model = small_model()
    x = rng.normal(size=model.input_shape)
    cfg = at.ExplainerConfig("lime", n_segments=3, neighborhood=30, perturbation="normal_noise",
                             seed=4)
    stats = sp.FeatureStats.from_samples(rng.normal(size=(5,) + model.input_shape))
    e = at.Explainer(model, cfg, stats)
    assert np.array_equal(e(x, (1,)), e(x, (1,)))
    assert not np.array_equal(e(x, (1,)), e(x, (2,)))


def test_lime_neighborhood_too_small(rng):
    model = small_model()
    cfg = at.ExplainerConfig("lime", n_segments=4, neighborhood=10)
    with pytest.raises(ValueError):
        at.lime(model, rng.normal(size=model.input_shape), cfg)


# -- shapley ------------------------------------------------------------------------------


def test_kernel_weights():
    assert at.shapley_kernel_weight(4, 1, "unscaled") == 0.25
    assert at.shapley_kernel_weight(4, 1, "standard") == 0.25
    assert at.shapley_kernel_weight(4, 2, "standard") == 3 / (6 * 2 * 2)
    assert at.shapley_kernel_weight(4, 2, "unscaled") == 3 / (6 * 2)
    assert at.shapley_kernel_weight(4, 0) == math.inf
    assert at.shapley_kernel_weight(4, 4) == math.inf
    np.testing.assert_array_equal(at.shapley_kernel_weight(4, np.array([1, 3])), [0.25, 0.25])


def permutation_shapley(v, M):
    """Shapley values by averaging marginal contributions over all orderings."""
    phi = np.zeros(M)
    perms = list(itertools.permutations(range(M)))
    for order in perms:
        present = set()
        for i in order:
            before = v(frozenset(present))
            present.add(i)
            phi[i] += v(frozenset(present)) - before
    return phi / len(perms)


def test_exact_oracle_matches_permutation_definition(rng):
    model = small_model(F=2, T=6, seed=1)
    x = rng.normal(size=(2, 6))
    part = sp.make_partition(x, "uniform", 2)
    M = part.n_segments

    def v(present):
        mask = np.array([0 if i in present else 1 for i in range(M)])
        return tm.predict(model, sp.perturb(x, part, mask, "zero"))

    phi, base = at.exact_shapley_oracle(model, x, part, "zero")
    np.testing.assert_allclose(phi, permutation_shapley(v, M), rtol=1e-10, atol=1e-12)
    assert base == v(frozenset())
    assert math.isclose(base + phi.sum(), tm.predict(model, x), rel_tol=1e-12)


def test_exact_oracle_single_segment(rng):
    model = small_model(F=1, T=6, seed=2)
    x = rng.normal(size=(1, 6))
    part = sp.make_partition(x, "uniform", 1)
    phi, base = at.exact_shapley_oracle(model, x, part, "zero")
    assert phi[0] == tm.predict(model, x) - tm.predict(model, np.zeros((1, 6)))


def test_exact_oracle_additive(rng):
    W = rng.normal(size=(2, 4))
    x = rng.normal(size=(2, 4))
    part = sp.make_partition(x, "uniform", 2)
    phi, _ = at.exact_shapley_oracle(linear_model(W), x, part, "zero")
    own = [np.sum((W * x)[f, i:j]) for f, i, j in part.segments]
    np.testing.assert_allclose(phi, own, rtol=1e-12)


def test_exact_oracle_limit(rng):
    x = rng.normal(size=(13, 2))
    part = sp.make_partition(x, "uniform", 1)
    with pytest.raises(ValueError):
        at.exact_shapley_oracle(linear_model(np.ones((13, 2))), x, part)


@pytest.mark.parametrize("n_seg", [1, 2, 3])
def test_kernel_shap_equals_oracle_on_linear_model(rng, n_seg):
    W = rng.normal(size=(3, 6))
    x = rng.normal(size=(3, 6))
    model = linear_model(W, bias=0.1)
    cfg = at.ExplainerConfig("kernel_shap", n_segments=n_seg, full_enumeration=True)
    m = at.kernel_shap(model, x, cfg)
    part = sp.make_partition(x, "uniform", n_seg)
    phi, base = at.exact_shapley_oracle(model, x, part, "zero")
    np.testing.assert_allclose(m.metadata["phi"], phi, rtol=0, atol=1e-6)
    assert abs(m.metadata["phi0"] + sum(m.metadata["phi"]) - tm.predict(model, x)) < 1e-8


def test_kernel_shap_on_nonlinear_model_full_enumeration(rng):
    # full enumeration recovers exact Shapley values for any game
    model = small_model(F=2, T=6, seed=4)
    x = rng.normal(size=(2, 6))
    cfg = at.ExplainerConfig("kernel_shap", n_segments=3, full_enumeration=True)
    m = at.kernel_shap(model, x, cfg)
    phi, _ = at.exact_shapley_oracle(model, x, sp.make_partition(x, "uniform", 3), "zero")
    np.testing.assert_allclose(m.metadata["phi"], phi, rtol=0, atol=1e-9)


def test_kernel_shap_symmetry():
    x = np.array([[1.0, 2.0, 1.0, 2.0]])
    model = linear_model(np.array([[0.5, -1.0, 0.5, -1.0]]))
    cfg = at.ExplainerConfig("kernel_shap", n_segments=2, full_enumeration=True)
    phi = at.kernel_shap(model, x, cfg).metadata["phi"]
    assert abs(phi[0] - phi[1]) < 1e-9


def test_kernel_shap_sampled_efficiency(rng):
    model = small_model(seed=5)
    x = rng.normal(size=model.input_shape)
    stats = sp.FeatureStats.from_samples(rng.normal(size=(8,) + model.input_shape))
    for pert in sp.PERTURBATIONS:
        cfg = at.ExplainerConfig("kernel_shap", n_segments=4, neighborhood=60, perturbation=pert)
        m = at.Explainer(model, cfg, stats).explain(x, (0,))
        assert abs(m.metadata["phi0"] + sum(m.metadata["phi"]) - tm.predict(model, x)) < 1e-8


def test_kernel_shap_needs_two_segments(rng):
    with pytest.raises(ValueError):
        at.kernel_shap(linear_model(np.ones((1, 4))), np.ones((1, 4)),
                       at.ExplainerConfig("kernel_shap", n_segments=1))


# -- interface ---------------------------------------------------------------------------


@pytest.mark.parametrize("method", at.METHODS)
def test_explainer_interface(rng, method):
    model = small_model()
    x = rng.normal(size=model.input_shape)
    cfg = at.ExplainerConfig(method, n_segments=3, neighborhood=40)
    e = at.Explainer(model, cfg, sp.FeatureStats.from_samples(x[None]))
    out = e.explain(x, (3,))
    assert out.values.shape == x.shape
    assert np.all(np.isfinite(out.values))
    assert np.array_equal(e(x, (3,)), out.values)
    assert e.deterministic == (method in ("saliency", "gradcam", "lrp"))


def test_config_validation():
    with pytest.raises(ValueError):
        at.ExplainerConfig("blah").validate()
    with pytest.raises(ValueError):
        at.ExplainerConfig("gradcam", sigma=-0.1).validate()
    with pytest.raises(ValueError):
        at.ExplainerConfig("lime", perturbation="blur").validate()
    assert at.ExplainerConfig("lime", perturbation="mean").label == "lime-mean"
    assert "beta" in at.ExplainerConfig("gradcam").fingerprint()


def test_map_export(tmp_path, rng):
    v = rng.normal(size=(3, 7))
    at.save_csv(v, tmp_path / "m.csv")
    assert np.array_equal(at.load_csv(tmp_path / "m.csv"), v)
    side = at.save_pgm(v, tmp_path / "m.pgm")
    pix = at.load_pgm(tmp_path / "m.pgm")
    assert pix.shape == (3, 7) and pix.min() == 0 and pix.max() == 255
    assert side["min"] == v.min() and (tmp_path / "m.pgm.json").exists()
    flat = at.save_pgm(np.ones((2, 2)), tmp_path / "c.pgm")
    assert flat["min"] == flat["max"] and np.all(at.load_pgm(tmp_path / "c.pgm") == 0)
