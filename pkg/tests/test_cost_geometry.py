import numpy as np
import pytest

from otadapt.cost_geometry import (
    CostOverflowWarning,
    GeodesicCostParams,
    LabeledFeatureSet,
    cost_gradient_wrt_features,
    cost_gradient_wrt_soft_labels,
    geodesic_cost,
    hard_class_cost,
    one_hot,
    penalized_cost,
    squared_euclidean_cost,
)

HALF_E_SQUARED = 3.694528049465325  # 0.5 * exp(2), evaluated by hand


def feature_set(X, hard=None, soft=None):
    return LabeledFeatureSet(np.asarray(X, float), hard, soft)


def random_soft(rng, n, k):
    S = rng.random((n, k)) + 0.1
    return S / S.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def test_feature_set_rejects_nonfinite():
    with pytest.raises(ValueError):
        feature_set([[np.nan, 0.0]])


def test_feature_set_rejects_bad_soft_rows():
    with pytest.raises(ValueError):
        feature_set([[0.0]], soft=np.array([[0.7, 0.7]]))


def test_feature_set_rejects_negative_labels():
    with pytest.raises(ValueError):
        feature_set([[0.0]], hard=np.array([-1]))


# ---------------------------------------------------------------------------
# squared euclidean
# ---------------------------------------------------------------------------

def test_sqeuclid_identical_points():
    s = feature_set([[1.0, 2.0]])
    np.testing.assert_allclose(squared_euclidean_cost(s, s), [[0.0]], atol=1e-15)


def test_sqeuclid_three_four_five():
    s = feature_set([[0.0, 0.0]])
    t = feature_set([[3.0, 4.0]])
    assert squared_euclidean_cost(s, t)[0, 0] == pytest.approx(25.0)


def test_sqeuclid_matches_naive_loop():
    rng = np.random.default_rng(2)
    Xs, Xt = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    C = squared_euclidean_cost(feature_set(Xs), feature_set(Xt))
    naive = np.empty((3, 4))
    for i in range(3):
        for j in range(4):
            naive[i, j] = np.sum((Xs[i] - Xt[j]) ** 2)
    np.testing.assert_allclose(C, naive, atol=1e-12)


def test_sqeuclid_symmetric_on_identical_inputs():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(6, 3))
    C = squared_euclidean_cost(feature_set(X), feature_set(X))
    np.testing.assert_allclose(C, C.T, atol=1e-12)


def test_sqeuclid_dim_mismatch():
    with pytest.raises(ValueError):
        squared_euclidean_cost(feature_set([[0.0]]), feature_set([[0.0, 1.0]]))


# ---------------------------------------------------------------------------
# hard class cost
# ---------------------------------------------------------------------------

def test_hard_cost_all_same_class_is_plain_euclidean():
    rng = np.random.default_rng(4)
    Xs, Xt = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    s = feature_set(Xs, hard=np.zeros(3, int))
    t = feature_set(Xt, hard=np.zeros(4, int))
    np.testing.assert_allclose(
        hard_class_cost(s, t, GeodesicCostParams()),
        squared_euclidean_cost(s, t),
    )


def test_hard_cost_disjoint_classes_all_sentinel():
    s = feature_set([[0.0], [1.0]], hard=np.array([0, 0]))
    t = feature_set([[2.0], [3.0]], hard=np.array([1, 1]))
    C = hard_class_cost(s, t, GeodesicCostParams(large_M=1e9))
    assert np.all(C == 1e9)


def test_hard_cost_rejects_small_sentinel():
    s = feature_set([[0.0], [10.0]], hard=np.array([0, 1]))
    t = feature_set([[10.0], [0.0]], hard=np.array([0, 1]))
    # same-class distances reach 100, so a sentinel of 10 cannot dominate
    with pytest.raises(ValueError):
        hard_class_cost(s, t, GeodesicCostParams(large_M=10.0))


def test_hard_cost_requires_labels():
    with pytest.raises(ValueError):
        hard_class_cost(feature_set([[0.0]]), feature_set([[0.0]]), GeodesicCostParams())


# ---------------------------------------------------------------------------
# penalized cost
# ---------------------------------------------------------------------------

def test_penalized_zero_penalty_is_plain():
    rng = np.random.default_rng(5)
    s = feature_set(rng.normal(size=(3, 2)), hard=rng.integers(0, 2, 3))
    t = feature_set(rng.normal(size=(4, 2)), hard=rng.integers(0, 2, 4))
    np.testing.assert_allclose(
        penalized_cost(s, t, GeodesicCostParams(penalty_m=0.0)),
        squared_euclidean_cost(s, t),
    )


def test_penalized_large_penalty_matches_hard_cost():
    rng = np.random.default_rng(6)
    s = feature_set(rng.normal(size=(3, 2)), hard=np.array([0, 1, 0]))
    t = feature_set(rng.normal(size=(3, 2)), hard=np.array([1, 0, 0]))
    base = squared_euclidean_cost(s, t)
    sentinel = 1e6 * float(base.max())
    pen = penalized_cost(s, t, GeodesicCostParams(penalty_m=sentinel))
    hard = hard_class_cost(s, t, GeodesicCostParams(large_M=sentinel))
    same = s.hard_labels[:, None] == t.hard_labels[None, :]
    np.testing.assert_allclose(pen[same], hard[same])
    # off-class entries agree up to the retained euclidean part
    np.testing.assert_allclose(pen[~same] - base[~same], hard[~same])


def test_penalized_offsets_are_exactly_m():
    s = feature_set([[0.0], [1.0]], hard=np.array([0, 1]))
    t = feature_set([[0.5], [2.0]], hard=np.array([0, 1]))
    diff = penalized_cost(s, t, GeodesicCostParams(penalty_m=1.5)) - squared_euclidean_cost(s, t)
    same = s.hard_labels[:, None] == t.hard_labels[None, :]
    assert np.all(diff[same] == 0.0)
    assert np.all(diff[~same] == 1.5)


# ---------------------------------------------------------------------------
# geodesic cost
# ---------------------------------------------------------------------------

def test_geodesic_alpha_one_is_plain_euclidean():
    rng = np.random.default_rng(7)
    s = feature_set(rng.normal(size=(4, 3)), soft=random_soft(rng, 4, 2))
    t = feature_set(rng.normal(size=(5, 3)), soft=random_soft(rng, 5, 2))
    C = geodesic_cost(s, t, GeodesicCostParams(alpha=1.0))
    np.testing.assert_allclose(C, squared_euclidean_cost(s, t), atol=1e-12)


def test_geodesic_same_label_floor():
    rng = np.random.default_rng(8)
    Xs, Xt = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    s = feature_set(Xs, hard=np.zeros(3, int))
    t = feature_set(Xt, hard=np.zeros(3, int))
    C = geodesic_cost(s, t, GeodesicCostParams(alpha=0.5), n_classes=2)
    expected = 0.5 * squared_euclidean_cost(s, t) + 0.5
    np.testing.assert_allclose(C, expected, atol=1e-12)


def test_geodesic_hand_value_opposite_onehots():
    s = feature_set([[0.0, 0.0]], soft=np.array([[1.0, 0.0]]))
    t = feature_set([[0.0, 0.0]], soft=np.array([[0.0, 1.0]]))
    C = geodesic_cost(s, t, GeodesicCostParams(alpha=0.5, beta=1.0))
    assert C[0, 0] == pytest.approx(HALF_E_SQUARED, abs=1e-12)


def test_geodesic_lower_bound_and_monotonicity():
    rng = np.random.default_rng(9)
    params = GeodesicCostParams(alpha=0.3, beta=1.7)
    s = feature_set(rng.normal(size=(5, 2)), soft=random_soft(rng, 5, 3))
    t = feature_set(rng.normal(size=(6, 2)), soft=random_soft(rng, 6, 3))
    C = geodesic_cost(s, t, params)
    assert np.all(C >= (1 - params.alpha) - 1e-12)
    # larger label distance with identical features gives larger cost
    x = [[1.0, 1.0]]
    near = feature_set(x, soft=np.array([[0.6, 0.4]]))
    far = feature_set(x, soft=np.array([[0.1, 0.9]]))
    anchor = feature_set(x, soft=np.array([[0.9, 0.1]]))
    c_near = geodesic_cost(anchor, near, params)[0, 0]
    c_far = geodesic_cost(anchor, far, params)[0, 0]
    assert c_far > c_near


def test_geodesic_overflow_guard():
    s = feature_set([[0.0]], soft=np.array([[1.0, 0.0]]))
    t = feature_set([[0.0]], soft=np.array([[0.0, 1.0]]))
    with pytest.warns(CostOverflowWarning):
        C = geodesic_cost(s, t, GeodesicCostParams(alpha=0.5, beta=400.0))
    assert np.isfinite(C).all()
    assert C[0, 0] == pytest.approx(0.5 * np.exp(700.0), rel=1e-12)


def test_geodesic_requires_label_information():
    with pytest.raises(ValueError):
        geodesic_cost(feature_set([[0.0]]), feature_set([[0.0]]), GeodesicCostParams())


def test_geodesic_continuity_slope_bound():
    rng = np.random.default_rng(10)
    params = GeodesicCostParams(alpha=0.4, beta=0.8)
    s = feature_set(rng.normal(size=(4, 2)), soft=random_soft(rng, 4, 3))
    t = feature_set(rng.normal(size=(5, 2)), soft=random_soft(rng, 5, 3))
    base = geodesic_cost(s, t, params)
    delta = 1e-6
    bound_B = 2.0  # max squared distance between probability rows
    lip = (1 - params.alpha) * params.beta * np.exp(params.beta * bound_B) * 2 * np.sqrt(bound_B)
    soft = s.soft_labels.copy()
    soft[2, 0] += delta
    soft[2, 1] -= delta
    bumped = geodesic_cost(feature_set(s.features, soft=soft), t, params)
    slope = np.abs(bumped - base).max() / (delta * np.sqrt(2))
    assert slope <= lip * (1 + 1e-6)


# ---------------------------------------------------------------------------
# gradients vs central finite differences
# ---------------------------------------------------------------------------

def fd_grad(f, X, step=1e-6):
    """Central-difference gradient of a scalar function of an array."""
    g = np.zeros_like(X)
    it = np.nditer(X, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += step
        Xm[idx] -= step
        g[idx] = (f(Xp) - f(Xm)) / (2 * step)
        it.iternext()
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def test_feature_gradient_zero_plan():
    rng = np.random.default_rng(11)
    s = feature_set(rng.normal(size=(3, 2)))
    t = feature_set(rng.normal(size=(4, 2)))
    gs, gt = cost_gradient_wrt_features(s, t, GeodesicCostParams(), np.zeros((3, 4)))
    assert np.all(gs == 0.0) and np.all(gt == 0.0)


def test_feature_gradient_single_pair():
    s = feature_set([[2.0, -1.0]])
    t = feature_set([[0.5, 3.0]])
    gs, gt = cost_gradient_wrt_features(s, t, GeodesicCostParams(alpha=1.0), [[1.0]])
    np.testing.assert_allclose(gs, 2 * (s.features - t.features))
    np.testing.assert_allclose(gt, -gs)


def test_feature_gradient_matches_fd():
    rng = np.random.default_rng(12)
    params = GeodesicCostParams(alpha=0.6, beta=1.2)
    Xs, Xt = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    Ss, St = random_soft(rng, 3, 2), random_soft(rng, 3, 2)
    G = rng.random((3, 3))
    G /= G.sum()

    def val_s(X):
        return float(np.sum(G * geodesic_cost(feature_set(X, soft=Ss), feature_set(Xt, soft=St), params)))

    def val_t(X):
        return float(np.sum(G * geodesic_cost(feature_set(Xs, soft=Ss), feature_set(X, soft=St), params)))

    gs, gt = cost_gradient_wrt_features(
        feature_set(Xs, soft=Ss), feature_set(Xt, soft=St), params, G
    )
    assert rel_err(gs, fd_grad(val_s, Xs)) <= 1e-5
    assert rel_err(gt, fd_grad(val_t, Xt)) <= 1e-5


def test_soft_label_gradient_alpha_one_is_zero():
    rng = np.random.default_rng(13)
    s = feature_set(rng.normal(size=(2, 2)), soft=random_soft(rng, 2, 2))
    t = feature_set(rng.normal(size=(2, 2)), soft=random_soft(rng, 2, 2))
    gs, gt = cost_gradient_wrt_soft_labels(s, t, GeodesicCostParams(alpha=1.0), np.full((2, 2), 0.25))
    assert np.all(gs == 0.0) and np.all(gt == 0.0)


def test_soft_label_gradient_identical_labels_is_zero():
    rng = np.random.default_rng(14)
    soft = np.array([[0.3, 0.7], [0.3, 0.7]])
    s = feature_set(rng.normal(size=(2, 2)), soft=soft)
    t = feature_set(rng.normal(size=(2, 2)), soft=soft.copy())
    gs, gt = cost_gradient_wrt_soft_labels(s, t, GeodesicCostParams(alpha=0.4), np.full((2, 2), 0.25))
    np.testing.assert_allclose(gs, 0.0, atol=1e-15)
    np.testing.assert_allclose(gt, 0.0, atol=1e-15)


def test_soft_label_gradient_matches_fd():
    rng = np.random.default_rng(15)
    params = GeodesicCostParams(alpha=0.4, beta=0.9)
    Xs, Xt = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    Ss, St = random_soft(rng, 3, 3), random_soft(rng, 4, 3)
    G = rng.random((3, 4))
    G /= G.sum()

    def naive_value(Ys, Yt):
        # independent re-evaluation that tolerates off-simplex label rows
        total = 0.0
        for i in range(Xs.shape[0]):
            for j in range(Xt.shape[0]):
                feat = np.sum((Xs[i] - Xt[j]) ** 2)
                lab = np.exp(params.beta * np.sum((Ys[i] - Yt[j]) ** 2))
                total += G[i, j] * (params.alpha * feat + (1 - params.alpha) * lab)
        return total

    def val_s(Y):
        return naive_value(Y, St)

    def val_t(Y):
        return naive_value(Ss, Y)

    gs, gt = cost_gradient_wrt_soft_labels(
        feature_set(Xs, soft=Ss), feature_set(Xt, soft=St), params, G
    )
    assert rel_err(gs, fd_grad(val_s, Ss)) <= 1e-5
    assert rel_err(gt, fd_grad(val_t, St)) <= 1e-5


def test_one_hot_round_trip():
    y = np.array([2, 0, 1, 2])
    H = one_hot(y, 3)
    assert H.shape == (4, 3)
    np.testing.assert_array_equal(H.argmax(axis=1), y)
    np.testing.assert_allclose(H.sum(axis=1), 1.0)
