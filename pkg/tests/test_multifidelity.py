import numpy as np
import pytest
from scipy.interpolate import RegularGridInterpolator

from gradcheck import check, numeric_grads
from mfrnp import multifidelity as mf
from mfrnp.errors import ConfigurationError, InputError, StateError, TrainingError
from mfrnp.multifidelity import MFModel, TrainConfig
from mfrnp.neural_process import LatentGaussian, NPSurrogate
from mfrnp.normalization import NormStats
from mfrnp.nn import autodiff as ad
from mfrnp.pde import FidelitySpec, GridField


class StubSurrogate:
    """Duck-typed surrogate whose decoder is a fixed function of the inputs."""

    def __init__(self, fn, d_x, d_y, d_z=2):
        self.fn, self.d_x, self.d_y, self.d_z = fn, d_x, d_y, d_z

    def decode(self, z, X):
        return ad.as_tensor(self.fn(np.asarray(X, dtype=float)))

    def encode(self, X, Y):
        return LatentGaussian(np.zeros(self.d_z), np.zeros(self.d_z))

    def parameters(self):
        return []


def stub_model(fns, resolutions, d_x=2, weights=None):
    specs = [FidelitySpec(k + 1, r) for k, r in enumerate(resolutions)]
    surs = [StubSurrogate(fn, d_x, s.size) for fn, s in zip(fns, specs)]
    latents = [LatentGaussian(np.zeros(2), np.zeros(2)) for _ in specs]
    return MFModel(surs, specs, weights=weights, latents=latents)


def bilinear_oracle(grid, target):
    h, w = grid.shape
    interp = RegularGridInterpolator((np.linspace(0, 1, h), np.linspace(0, 1, w)), grid)
    H, W = target
    pts = np.stack(np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij"), axis=-1)
    return interp(pts.reshape(-1, 2)).reshape(H, W)


# interpolation ------------------------------------------------------------------

def test_interpolating_to_same_resolution_is_identity():
    f = GridField(np.random.default_rng(0).normal(size=(16, 16)))
    assert np.array_equal(mf.interpolate_grid(f, (16, 16)).values, f.values)


def test_constants_are_preserved():
    out = mf.interpolate_grid(GridField(np.full((16, 16), 0.37)), (64, 64)).values
    # each 1-D pass (1 - f) c + f c rounds to within one ulp of c
    assert np.max(np.abs(out - 0.37)) <= 2 * np.spacing(0.37)


def test_two_by_two_center_is_corner_average():
    # u(i, j) = i + j: corners 0, 1, 1, 2
    out = mf.interpolate_grid(GridField(np.array([[0.0, 1.0], [1.0, 2.0]])), (3, 3)).values
    assert out[1, 1] == 1.0
    np.testing.assert_array_equal(out, [[0, 0.5, 1], [0.5, 1, 1.5], [1, 1.5, 2]])


@pytest.mark.parametrize("src, dst", [(16, 31), (16, 46), (5, 17), (32, 63)])
def test_coincident_nodes_are_exact(src, dst):
    f = np.random.default_rng(1).normal(size=(src, src))
    out = mf.interpolate_grid(GridField(f), (dst, dst)).values
    step = (dst - 1) // (src - 1)
    assert np.array_equal(out[::step, ::step], f)


@pytest.mark.parametrize("src, dst", [(16, 32), (32, 64), (3, 7), (16, 128)])
def test_interpolation_matches_independent_bilinear(src, dst):
    f = np.random.default_rng(2).normal(size=(src, src))
    out = mf.interpolate_grid(GridField(f), (dst, dst)).values
    np.testing.assert_allclose(out, bilinear_oracle(f, (dst, dst)), rtol=0, atol=1e-13)


def test_interpolation_endpoints_align():
    f = np.random.default_rng(3).normal(size=(16, 16))
    out = mf.interpolate_grid(GridField(f), (64, 64)).values
    for a, b in ((0, 0), (0, -1), (-1, 0), (-1, -1)):
        assert out[a, b] == f[a, b]


def test_degenerate_resolution_rejected():
    with pytest.raises(InputError):
        mf.interpolate_grid(GridField(np.ones((1, 4))), (4, 4))


def test_nested_refinement_consistency():
    f = np.random.default_rng(4).normal(size=(16, 16))
    direct = mf.interpolate_grid(GridField(f), (61, 61)).values
    two_step = mf.interpolate_grid(mf.interpolate_grid(GridField(f), (31, 31)), (61, 61)).values
    np.testing.assert_allclose(direct, two_step, atol=1e-12)


def test_batch_interpolation_gradient():
    a = ad.parameter(np.random.default_rng(5).normal(size=(2, 9)))
    w = np.random.default_rng(6).normal(size=(2, 25))
    err, *_ = check(lambda: (mf.interpolate_batch(a, (3, 3), (5, 5)) * w).sum(), [a])
    assert err <= 1e-8


# aggregation ----------------------------------------------------------------------

def test_weighted_aggregation_on_known_values():
    preds = [GridField(np.array([[float(v)]])) for v in (1, 2, 3, 4)]
    assert mf.aggregate(preds, [0.1, 0.2, 0.3, 0.4]).values[0, 0] == 3.0


def test_single_prediction_passes_through():
    f = GridField(np.random.default_rng(7).normal(size=(4, 4)))
    assert np.array_equal(mf.aggregate([f], [1.0]).values, f.values)


def test_identical_fields_aggregate_to_themselves():
    f = np.random.default_rng(8).normal(size=(3, 3))
    out = mf.aggregate([GridField(f)] * 3, [0.2, 0.5, 0.3]).values
    np.testing.assert_allclose(out, f, rtol=1e-15, atol=1e-15)


def test_aggregation_is_linear():
    rng = np.random.default_rng(9)
    P = [rng.normal(size=(5,)) for _ in range(3)]
    Q = [rng.normal(size=(5,)) for _ in range(3)]
    w = [0.2, 0.3, 0.5]
    lhs = mf.aggregate([2.0 * p - 0.5 * q for p, q in zip(P, Q)], w).data
    rhs = 2.0 * mf.aggregate(P, w).data - 0.5 * mf.aggregate(Q, w).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-14)


def test_aggregation_mismatch_rejected():
    with pytest.raises(ConfigurationError):
        mf.aggregate([GridField(np.ones((2, 2))), GridField(np.ones((3, 3)))], [0.5, 0.5])
    with pytest.raises(ConfigurationError):
        mf.aggregate([np.ones(3)], [0.5, 0.5])


# model construction ------------------------------------------------------------------

def test_default_weights_are_uniform():
    m = stub_model([lambda X: 0, lambda X: 0, lambda X: 0, lambda X: 0], [(2, 2), (3, 3), (4, 4), (5, 5)])
    np.testing.assert_allclose(m.weights, [1 / 3] * 3)
    assert m.loss_weights.tolist() == [1.0, 1.0, 1.0, 2.0]


@pytest.mark.parametrize("weights", [[0.5, 0.4], [1.2, -0.2], [1.0]])
def test_invalid_aggregation_weights(weights):
    with pytest.raises(ConfigurationError):
        stub_model([lambda X: 0] * 3, [(2, 2), (3, 3), (4, 4)], weights=weights)


def test_output_dimension_must_match_grid():
    sur = NPSurrogate.create(2, 10, np.random.default_rng(0), hidden=4, depth=1)
    with pytest.raises(ConfigurationError):
        MFModel([sur], [FidelitySpec(1, (3, 3))])


def test_resolutions_must_not_decrease():
    with pytest.raises(ConfigurationError):
        stub_model([lambda X: 0] * 2, [(4, 4), (3, 3)])


# ancestral sampling ------------------------------------------------------------------

def test_ancestral_needs_two_fidelities():
    m = stub_model([lambda X: np.zeros((len(X), 4))], [(2, 2)])
    with pytest.raises(ConfigurationError):
        mf.ancestral_lower_predictions(m, np.zeros((1, 2)), np.random.default_rng(0), "cached")


def test_z_independent_decoder_gives_same_output_in_both_modes():
    rng = np.random.default_rng(0)
    sur = NPSurrogate.create(2, 9, rng, hidden=4, depth=2, d_z=3)
    w, _ = sur.decoder.layers[0]
    w.data[:, 2:] = 0.0  # decoder input is concat(x, z)
    top = NPSurrogate.create(2, 25, rng, hidden=4, depth=2, d_z=3)
    m = MFModel([sur, top], [FidelitySpec(1, (3, 3)), FidelitySpec(2, (5, 5))])
    m.latents = [LatentGaussian(rng.normal(size=3), rng.normal(size=3)) for _ in range(2)]
    priors = [LatentGaussian(rng.normal(size=3), np.zeros(3))]
    X = rng.normal(size=(4, 2))
    a = mf.ancestral_lower_predictions(m, X, np.random.default_rng(1), "resampled", priors)[0].data
    b = mf.ancestral_lower_predictions(m, X, np.random.default_rng(2), "cached")[0].data
    assert np.array_equal(a, b)


def test_ancestral_is_deterministic_given_rng():
    rng = np.random.default_rng(3)
    m = MFModel.create([FidelitySpec(1, (3, 3)), FidelitySpec(2, (4, 4))], 2, rng, hidden=4, depth=1)
    m.latents = [LatentGaussian(np.zeros(4), np.zeros(4))] * 2
    X = rng.normal(size=(3, 2))
    a = mf.ancestral_lower_predictions(m, X, np.random.default_rng(9), "cached")[0].data
    b = mf.ancestral_lower_predictions(m, X, np.random.default_rng(9), "cached")[0].data
    assert np.array_equal(a, b)


def test_three_level_pipeline_matches_stepwise_recomputation():
    f1 = lambda X: np.column_stack([X[:, 0], X[:, 1], X[:, 0] + X[:, 1], np.ones(len(X))])  # noqa: E731
    f2 = lambda X: np.outer(X[:, 0] - X[:, 1], np.arange(9.0))  # noqa: E731
    m = stub_model([f1, f2, lambda X: np.zeros((len(X), 16))], [(2, 2), (3, 3), (4, 4)])
    X = np.array([[0.5, -1.0], [2.0, 0.25]])
    out = mf.ancestral_lower_predictions(m, X, np.random.default_rng(0), "cached")
    for k, fn, res in ((0, f1, (2, 2)), (1, f2, (3, 3))):
        vals = fn(X)
        for i in range(len(X)):
            want = bilinear_oracle(vals[i].reshape(res), (4, 4))
            np.testing.assert_allclose(out[k].data[i].reshape(4, 4), want, atol=1e-14)
    agg = mf.aggregation_top(m, X, np.random.default_rng(0), "cached").data
    np.testing.assert_allclose(agg, 0.5 * out[0].data + 0.5 * out[1].data, atol=1e-15)


def test_missing_latents_is_a_state_error():
    m = stub_model([lambda X: np.zeros((len(X), 4))] * 2, [(2, 2), (2, 2)])
    m.latents = None
    with pytest.raises(StateError):
        mf.ancestral_lower_predictions(m, np.zeros((1, 2)), np.random.default_rng(0), "cached")
    with pytest.raises(StateError):
        mf.predict(m, np.zeros((1, 2)), np.random.default_rng(0))


# residuals -------------------------------------------------------------------------

def test_oracle_lower_surrogates_give_zero_residuals():
    Y = np.random.default_rng(4).normal(size=(3, 9))
    X = np.arange(6.0).reshape(3, 2)
    m = stub_model([lambda X_: Y, lambda X_: np.zeros((3, 9))], [(3, 3), (3, 3)])
    R = mf.build_residual_dataset(m, X, Y, np.random.default_rng(0), "cached").R.data
    assert np.all(R == 0)


def test_zero_lower_surrogates_leave_targets_unchanged():
    Y = np.random.default_rng(5).normal(size=(3, 16))
    m = stub_model([lambda X: np.zeros((len(X), 4)), lambda X: np.zeros((len(X), 16))], [(2, 2), (4, 4)])
    R = mf.build_residual_dataset(m, np.zeros((3, 2)), Y, np.random.default_rng(0), "cached").R.data
    assert np.array_equal(R, Y)


def test_residual_equals_target_minus_interpolated_stub():
    g = lambda X: np.column_stack([X[:, 0], 2 * X[:, 1], -X[:, 0], X[:, 0] * X[:, 1]])  # noqa: E731
    m = stub_model([g, lambda X: np.zeros((len(X), 9))], [(2, 2), (3, 3)])
    X = np.array([[1.0, 2.0], [-0.5, 0.5]])
    Y = np.random.default_rng(6).normal(size=(2, 9))
    R = mf.build_residual_dataset(m, X, Y, np.random.default_rng(0), "cached").R.data
    for i in range(2):
        want = Y[i] - bilinear_oracle(g(X)[i].reshape(2, 2), (3, 3)).reshape(-1)
        np.testing.assert_allclose(R[i], want, atol=1e-15)


def test_empty_top_dataset_rejected():
    m = stub_model([lambda X: np.zeros((len(X), 4))] * 2, [(2, 2), (2, 2)])
    with pytest.raises(InputError):
        mf.build_residual_dataset(m, np.zeros((0, 2)), np.zeros((0, 4)), np.random.default_rng(0), "cached")


# prediction ------------------------------------------------------------------------

def closure_model(A, R):
    n, d = A.shape
    side = int(np.sqrt(d))
    lookup = lambda table: (lambda X: table[X[:, 0].astype(int)])  # noqa: E731
    return stub_model([lookup(A), lookup(R)], [(side, side), (side, side)])


def test_residual_closure_is_exact_on_dyadic_fields():
    rng = np.random.default_rng(7)
    y = rng.integers(-2**20, 2**20, size=(6, 16)) / 2**10
    A = rng.integers(-2**20, 2**20, size=(6, 16)) / 2**10
    X = np.column_stack([np.arange(6.0), np.zeros(6)])
    mean, spread = mf.predict(closure_model(A, y - A), X, np.random.default_rng(0))
    assert np.array_equal(mean, y)
    assert np.all(spread == 0)


def test_residual_closure_on_random_fields():
    rng = np.random.default_rng(8)
    y, A = rng.normal(size=(6, 16)), rng.normal(size=(6, 16))
    X = np.column_stack([np.arange(6.0), np.zeros(6)])
    mean, _ = mf.predict(closure_model(A, y - A), X, np.random.default_rng(0))
    assert np.array_equal(mean, A + (y - A))
    np.testing.assert_allclose(mean, y, rtol=0, atol=4 * np.finfo(float).eps * np.max(np.abs(y) + np.abs(A)))


def test_zero_residual_gives_the_aggregation():
    rng = np.random.default_rng(9)
    A = rng.normal(size=(4, 9))
    X = np.column_stack([np.arange(4.0), np.zeros(4)])
    m = closure_model(A, np.zeros((4, 9)))
    mean, _ = mf.predict(m, X, np.random.default_rng(0))
    assert np.array_equal(mean, A)


def test_zero_lower_gives_the_residual_decode():
    rng = np.random.default_rng(10)
    R = rng.normal(size=(4, 9))
    X = np.column_stack([np.arange(4.0), np.zeros(4)])
    mean, _ = mf.predict(closure_model(np.zeros((4, 9)), R), X, np.random.default_rng(0))
    assert np.array_equal(mean, R)
    mean, _ = mf.predict(closure_model(np.zeros((4, 9)), R), X, np.random.default_rng(0), S=3)
    np.testing.assert_allclose(mean, R, rtol=1e-15, atol=1e-15)


# loss and gradients -----------------------------------------------------------------

def generic_k2(seed=0, scaled=True):
    rng = np.random.default_rng(seed)
    specs = [FidelitySpec(1, (3, 3)), FidelitySpec(2, (4, 4))]
    m = MFModel.create(specs, 2, rng, hidden=4, depth=2, d_z=2)
    # nonzero biases keep pre-activations off the relu kink at 0
    for p in m.parameters():
        if p.ndim == 1:
            p.data = rng.normal(scale=0.3, size=p.shape)
    if scaled:
        m.scalings = [
            NormStats(np.array([0.1, -0.2]), np.array([1.5, 0.8]), 0.3, 2.0),
            NormStats(np.array([0.0, 0.1]), np.array([1.2, 0.9]), -0.1, 1.7),
        ]
    data = [(rng.normal(size=(4, 2)), rng.normal(size=(4, s.size))) for s in specs]
    return m, data


def test_mfrnp_loss_gradient_matches_finite_differences():
    m, data = generic_k2()
    cfg = TrainConfig(samples=4)

    def loss():
        return mf.mfrnp_loss(m, data, cfg, np.random.default_rng(1), np.random.default_rng(2))[0]

    err, *_ = check(loss, m.parameters())
    assert err <= 1e-4


def test_loss_decomposes_into_weighted_terms():
    m, data = generic_k2()
    total, diag = mf.mfrnp_loss(m, data, TrainConfig(), np.random.default_rng(1))
    assert diag["loss"] == pytest.approx(diag["residual_loss"] + diag["lower_loss"], rel=1e-14)
    assert diag["residual_loss"] == pytest.approx(2.0 * diag["fidelity_losses"][1], rel=1e-14)
    assert diag["lower_loss"] == pytest.approx(diag["fidelity_losses"][0], rel=1e-14)


def residual_grad_on_lower_decoder(detach):
    m, data = generic_k2(seed=3)
    cfg = TrainConfig(detach_lower=detach)
    _, diag = mf.mfrnp_loss(m, data, cfg, np.random.default_rng(4), np.random.default_rng(5))
    dec = m.surrogates[0].decoder.parameters()
    return ad.grad(diag["terms"]["residual"], dec), m, data, cfg, dec


def test_residual_loss_reaches_lower_decoder():
    grads, m, data, cfg, dec = residual_grad_on_lower_decoder(detach=False)
    assert any(np.any(g != 0) for g in grads)

    def residual_only():
        return mf.mfrnp_loss(m, data, cfg, np.random.default_rng(4), np.random.default_rng(5))[1]["terms"]["residual"].data

    numeric = numeric_grads(lambda: float(residual_only()), dec[-2:])
    for a, n in zip(grads[-2:], numeric):
        np.testing.assert_allclose(a, n, rtol=1e-4, atol=1e-7)


def test_detached_lower_blocks_residual_gradient():
    grads, *_ = residual_grad_on_lower_decoder(detach=True)
    assert all(np.all(g == 0) for g in grads)


def test_empty_dataset_rejected():
    m, data = generic_k2()
    data[0] = (np.zeros((0, 2)), np.zeros((0, 9)))
    with pytest.raises(InputError):
        mf.mfrnp_loss(m, data, TrainConfig(), np.random.default_rng(0))


def test_frozen_oracle_lower_gives_stationary_residuals():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(6, 2))
    Y1 = np.column_stack([X[:, 0], X[:, 1], X.sum(1), X[:, 0] - X[:, 1]])
    lower = StubSurrogate(lambda X_: np.column_stack([X_[:, 0], X_[:, 1], X_.sum(1), X_[:, 0] - X_[:, 1]]), 2, 4)
    top = NPSurrogate.create(2, 9, rng, hidden=4, depth=1, d_z=2)
    m = MFModel([lower, top], [FidelitySpec(1, (2, 2)), FidelitySpec(2, (3, 3))])
    Y2 = rng.normal(size=(6, 9))
    priors = [LatentGaussian(np.zeros(2), np.zeros(2))]
    R1 = mf.build_residual_dataset(m, X, Y2, np.random.default_rng(1), "resampled", priors).R.data
    R2 = mf.build_residual_dataset(m, X, Y2, np.random.default_rng(2), "resampled", priors).R.data
    assert np.array_equal(R1, R2)
    assert np.any(Y1)  # the stub reproduces f_1 on its own inputs


# training --------------------------------------------------------------------------

def smooth_data(n_lower=24, n_top=12, seed=0):
    rng = np.random.default_rng(seed)

    def field(X, res):
        s = np.linspace(0, 1, res)
        gx, gy = np.meshgrid(s, s, indexing="ij")
        return np.stack([np.sin(a * gx) + b * gy for a, b in X]).reshape(len(X), -1)

    X1, X2 = rng.uniform(0, 1, (n_lower, 2)), rng.uniform(0, 1, (n_top, 2))
    return [(X1, field(X1, 3)), (X2, field(X2, 5))]


def small_model(seed=0):
    specs = [FidelitySpec(1, (3, 3)), FidelitySpec(2, (5, 5))]
    return MFModel.create(specs, 2, np.random.default_rng(seed), hidden=8, depth=2)


def test_training_is_deterministic():
    cfg = TrainConfig(max_epochs=30, patience=100, seed=4, eval_every=5)
    _, h1 = mf.train(small_model(), smooth_data(), cfg)
    _, h2 = mf.train(small_model(), smooth_data(), cfg)
    assert h1 == h2


def test_patience_one_stops_one_check_after_best():
    cfg = TrainConfig(max_epochs=50, patience=1, eval_every=1, lr=1e-300)
    _, hist = mf.train(small_model(), smooth_data(), cfg)
    assert [h["epoch"] for h in hist] == [0, 1]
    assert "loss" not in hist[-1]


def test_best_parameters_are_restored():
    cfg = TrainConfig(max_epochs=40, patience=1000, eval_every=10, seed=1)
    m, hist = mf.train(small_model(), smooth_data(), cfg)
    vals = [h["val_loss"] for h in hist if "val_loss" in h]
    X2, Y2 = smooth_data()[1]
    tr, val = mf._validation_split(len(X2), 0.1, mf.substream(1, "validation"))
    data = smooth_data()
    train_sets = data[:-1] + [(X2[tr], Y2[tr])]
    again = mf.validation_loss(m, train_sets, X2[val], Y2[val], None)
    assert again == pytest.approx(min(vals), rel=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_the_fidelity():
    data = smooth_data()
    data[0][1][0, 0] = np.inf
    with pytest.raises(TrainingError, match="fidelity"):
        mf.train(small_model(), data, TrainConfig(max_epochs=3, val_fraction=0.0))


def test_training_reduces_validation_loss_on_heat():
    from mfrnp import pde
    from mfrnp.normalization import fit_norm

    scope = pde.builtin_scopes("heat", "full")
    sets = [
        pde.sample_dataset("heat", FidelitySpec(1, (16, 16)), 60, scope, 1),
        pde.sample_dataset("heat", FidelitySpec(2, (32, 32)), 32, scope, 2),
    ]
    stats = [fit_norm(d.X, d.Y) for d in sets]
    model = MFModel.create([d.spec for d in sets], 3, np.random.default_rng(0), scalings=stats)
    cfg = TrainConfig(max_epochs=2001, patience=5000, eval_every=2000)
    _, hist = mf.train(model, [(s.apply_x(d.X), s.apply_y(d.Y)) for s, d in zip(stats, sets)], cfg)
    vals = {h["epoch"]: h["val_loss"] for h in hist if "val_loss" in h}
    assert vals[2000] < vals[0]


def test_model_checkpoint_round_trip(tmp_path):
    m = small_model(seed=2)
    m.scalings = [NormStats(np.zeros(2), np.ones(2), 0.5, 2.0), NormStats(np.ones(2), np.ones(2), 0.0, 3.0)]
    mf.train(m, smooth_data(), TrainConfig(max_epochs=5, eval_every=1))
    mf.save_model(m, tmp_path / "ck")
    back = mf.load_model(tmp_path / "ck")
    X = np.random.default_rng(0).uniform(size=(4, 2))
    a, _ = mf.predict(m, X, np.random.default_rng(3), S=4)
    b, _ = mf.predict(back, X, np.random.default_rng(3), S=4)
    assert np.array_equal(a, b)
    assert np.array_equal(back.weights, m.weights) and back.specs == m.specs


def test_single_level_model_trains_as_plain_np():
    data = smooth_data()[1:]
    m = MFModel.create([FidelitySpec(1, (5, 5))], 2, np.random.default_rng(0), hidden=8, depth=2)
    m, hist = mf.train(m, data, TrainConfig(max_epochs=10))
    mean, _ = mf.predict(m, data[0][0], use_mean=True)
    assert mean.shape == data[0][1].shape and np.all(np.isfinite(mean))


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(context_fraction=(0.3, 0.2))
    with pytest.raises(ConfigurationError):
        TrainConfig(patience=0)
    cfg = TrainConfig(max_epochs=7)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
