import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mixcem.classify import misclassification_rate
from mixcem.densities import MixtureModel, MvNormalParams, PanelLinearParams, cholesky
from mixcem.errors import CollinearityError, DomainError, InsufficientDataError
from mixcem.panel import (
    IngestionError,
    PanelConfig,
    PanelDataset,
    PanelStart,
    cluster_robust_variance,
    covariate_params,
    fit_panel,
    generate_exercise2,
    iwgls_step,
    mundlak_expand,
    omega_matrix,
    predict_outcome,
    random_start,
    read_panel_csv,
    transition_counts,
    truth_start,
    variance_components,
    write_panel_csv,
)


def test_generated_covariances_are_spd():
    rng = np.random.default_rng(0)
    for _ in range(10**4):
        p = int(rng.integers(1, 9))
        P = np.eye(p) + np.triu(rng.standard_normal((p, p)), 1)
        cholesky(P @ P.T)


def test_generator_is_deterministic():
    a, ta = generate_exercise2(50, 4, 2, 3, np.random.default_rng(9))
    b, tb = generate_exercise2(50, 4, 2, 3, np.random.default_rng(9))
    assert a.outcome.tobytes() == b.outcome.tobytes()
    assert a.covariates.tobytes() == b.covariates.tobytes()
    assert np.array_equal(ta.labels, tb.labels)


def test_generator_shapes_and_truth():
    ds, truth = generate_exercise2(40, 3, 3, 2, np.random.default_rng(1))
    assert ds.outcome.shape == (40, 3) and ds.covariates.shape == (40, 3, 2)
    assert [c.sigma2_alpha for c in truth.model.components] == [1.0, 2.0, 3.0]
    assert np.allclose(truth.transition.sum(axis=1), 1)
    with pytest.raises(DomainError):
        generate_exercise2(0, 3, 2, 2, np.random.default_rng(1))


def test_mundlak_examples():
    x = np.array([[1.0, 3.0]])
    ds = PanelDataset(np.zeros((1, 2)), x[:, :, None])
    d = mundlak_expand(ds)
    assert np.all(d.X[0, :, 1] == 2.0)
    assert np.all(d.X[0, :, 2:].sum(axis=1) == 1) and np.array_equal(d.X[0, :, 2:], np.eye(2))
    assert d.columns == ["x1", "xbar1", "time1", "time2"]
    dw = mundlak_expand(PanelDataset(np.zeros((1, 2)), x[:, :, None], np.array([[1.0, 0.0]])))
    assert np.all(dw.X[0, :, 1] == 1.0)
    with pytest.raises(DomainError):
        mundlak_expand(PanelDataset(np.zeros((1, 1)), np.zeros((1, 1, 1))))


def test_mundlak_excludes_empty_units():
    ds = PanelDataset(np.zeros((2, 2)), np.ones((2, 2, 1)), np.array([[1.0, 1.0], [0.0, 0.0]]))
    with pytest.warns(UserWarning):
        d = mundlak_expand(ds)
    assert d.excluded_units == [1]


def test_iwgls_identity_is_ols(rng):
    X = rng.standard_normal((30, 4, 6))
    y = rng.standard_normal((30, 4))
    b = iwgls_step(X, y, np.ones((1, 30, 4)), [np.eye(4)])[0]
    ref, *_ = np.linalg.lstsq(X.reshape(-1, 6), y.ravel(), rcond=None)
    np.testing.assert_allclose(b, ref, rtol=1e-10)


def test_iwgls_hand_two_unit_system():
    # three units, T = 2, four columns; Omega block-diagonal and weights scale rows
    X = np.array([
        [[1.0, 2.0, 1.0, 0.0], [3.0, 2.0, 0.0, 1.0]],
        [[-1.0, 0.5, 1.0, 0.0], [2.0, 0.5, 0.0, 1.0]],
        [[0.5, 1.0, 1.0, 0.0], [1.5, 1.0, 0.0, 1.0]],
    ])
    y = np.array([[1.0, 2.0], [0.5, -1.0], [0.3, 0.9]])
    w = np.array([[1.0, 0.5], [0.8, 1.0], [1.0, 1.0]])
    Om = omega_matrix(0.7, 1.3, 2)
    b = iwgls_step(X, y, w[None], [Om])[0]
    Xs = (X * w[:, :, None]).reshape(6, 4)
    ys = (y * w).ravel()
    Oi = np.kron(np.eye(3), np.linalg.inv(Om))
    np.testing.assert_allclose(b, np.linalg.solve(Xs.T @ Oi @ Xs, Xs.T @ Oi @ ys), rtol=1e-10)


def test_iwgls_weight_doubling_invariant(rng):
    X = rng.standard_normal((20, 3, 5))
    y = rng.standard_normal((20, 3))
    w = rng.random((1, 20, 3))
    Om = [omega_matrix(0.5, 1.0, 3)]
    np.testing.assert_allclose(iwgls_step(X, y, w, Om)[0], iwgls_step(X, y, 2 * w, Om)[0], rtol=1e-9)


def test_iwgls_collinearity_names_columns():
    ds = PanelDataset(np.random.default_rng(0).normal(size=(20, 3)), np.ones((20, 3, 1)))
    d = mundlak_expand(ds)
    with pytest.raises(CollinearityError) as err:
        iwgls_step(d.X, ds.outcome, np.ones((1, 20, 3)), [np.eye(3)], d.columns)
    assert set(err.value.columns) <= set(d.columns) and err.value.columns


def test_iwgls_insufficient_weight():
    with pytest.raises(InsufficientDataError):
        iwgls_step(np.ones((1, 2, 4)), np.ones((1, 2)), np.ones((1, 1, 2)), [np.eye(2)])


def test_variance_components_zero_residuals():
    vc = variance_components(np.zeros((1, 10, 3)), np.ones((1, 10, 3)), variance_floor=1e-8)
    assert vc.sigma2_alpha_eps[0] == 0 and vc.sigma2_alpha[0] == 0 and vc.sigma2_eps[0] == 1e-8


def test_variance_components_denominator():
    N, T = 10, 2
    r = np.ones((1, N, T))
    vc = variance_components(r, np.ones((1, N, T)))
    assert vc.sigma2_alpha_eps[0] == pytest.approx(N * T / (N * T - 2 - T))
    with pytest.raises(InsufficientDataError):
        variance_components(np.ones((1, 2, 2)), np.ones((1, 2, 2)))


def test_variance_components_random_intercept():
    rng = np.random.default_rng(2)
    N, T = 10**4, 4
    alpha = rng.normal(0, np.sqrt(2.0), N)
    r = np.repeat(alpha[:, None], T, axis=1)
    vc = variance_components(r[None], np.ones((1, N, T)))
    assert vc.sigma2_alpha[0] == pytest.approx(2.0, rel=0.05)


def test_variance_components_skip_single_period_units():
    r = np.array([[[5.0, 0.0], [1.0, 1.0], [-1.0, -1.0]]])
    w = np.array([[[1.0, 0.0], [1.0, 1.0], [1.0, 1.0]]])
    vc = variance_components(r, w, n_mean_params=0)
    assert vc.sigma2_alpha[0] == pytest.approx(1.0)


def test_omega_spd():
    for a, e in [(0.0, 1e-8), (3.0, 0.5), (100.0, 1e-6)]:
        cholesky(omega_matrix(a, e, 6))


def test_cluster_robust_zero_residuals(rng):
    X = rng.standard_normal((15, 3, 5))
    V = cluster_robust_variance(X, np.zeros((1, 15, 3)), [np.eye(3)], np.ones((1, 15, 3)))[0]
    assert np.all(V == 0)


def test_cluster_robust_matches_hc0_ols():
    rng = np.random.default_rng(3)
    N, T = 4000, 1
    X = np.concatenate([rng.standard_normal((N, T, 1)), np.ones((N, T, 1))], axis=2)
    e = rng.standard_normal((N, T)) * (1 + 0.5 * np.abs(X[:, :, 0]))
    y = X @ np.array([1.0, 2.0]) + e
    b = iwgls_step(X, y, np.ones((1, N, T)), [np.eye(T)])[0]
    r = y - X @ b
    V = cluster_robust_variance(X, r[None], [np.eye(T)], np.ones((1, N, T)))[0]
    Xf = X.reshape(-1, 2)
    Q = np.linalg.inv(Xf.T @ Xf)
    hc0 = Q @ (Xf.T * r.ravel() ** 2) @ Xf @ Q
    np.testing.assert_allclose(np.diag(V), np.diag(hc0), rtol=0.1)


def test_cluster_robust_duplicated_halves(rng):
    X = rng.standard_normal((40, 3, 5))
    r = rng.standard_normal((1, 40, 3))
    Om = [omega_matrix(0.4, 1.0, 3)]
    V1 = cluster_robust_variance(X, r, Om, np.ones((1, 40, 3)))[0]
    V2 = cluster_robust_variance(np.concatenate([X, X]), np.concatenate([r, r], axis=1), Om, np.ones((1, 80, 3)))[0]
    np.testing.assert_allclose(V2, V1 / 2, rtol=1e-6)


def test_cluster_robust_singular():
    with pytest.raises(CollinearityError):
        cluster_robust_variance(np.ones((5, 2, 3)), np.ones((1, 5, 2)), [np.eye(2)], np.ones((1, 5, 2)))


def test_single_group_pooled_gls_recovers_beta():
    rng = np.random.default_rng(4)
    ds, truth = generate_exercise2(2000, 4, 1, 1, rng)
    start = random_start(ds, 1, rng)
    for alg in ("EM", "CEM"):
        fit = fit_panel(ds, 1, alg, start)
        se = np.sqrt(np.diag(fit.variance_estimates[0]))
        assert abs(fit.model.components[0].beta - truth.model.components[0].beta) < 3 * se[0]
    em = fit_panel(ds, 1, "EM", start, PanelConfig(penalty=None))
    cem = fit_panel(ds, 1, "CEM", start)
    np.testing.assert_allclose(em.model.components[0].beta_tilde, cem.model.components[0].beta_tilde, rtol=1e-10)


def test_truth_init_separated_cem():
    rng = np.random.default_rng(5)
    ds, truth = generate_exercise2(400, 5, 2, 20, rng)
    fit = fit_panel(ds, 2, "CEM", truth_start(truth))
    rate, perm = misclassification_rate(fit.extra["labels"].ravel(), truth.labels.ravel(), 2)
    assert rate == 0.0
    for g in range(2):
        est = fit.model.components[perm[g]]
        se = np.sqrt(np.diag(fit.variance_estimates[perm[g]]))
        assert abs(est.beta - truth.model.components[g].beta) < 3 * se[0]


@pytest.mark.parametrize("alg", ["EM", "CEM"])
@given(seed=st.integers(0, 10**6))
def test_exact_m_step_is_monotone(alg, seed):
    rng = np.random.default_rng(seed)
    G = int(rng.integers(1, 4))
    ds, _ = generate_exercise2(int(rng.integers(40, 120)), int(rng.integers(2, 5)), G, int(rng.integers(1, 4)), rng)
    try:
        fit = fit_panel(ds, G, alg, random_start(ds, G, rng), PanelConfig(m_step="ml", check_monotone=True))
    except (InsufficientDataError, CollinearityError):
        return
    except Exception as exc:  # degenerate starts are allowed, monotonicity failures are not
        assert "MonotonicityError" not in type(exc).__name__
        return
    assert np.all(np.diff(fit.objective_trace) >= -1e-8)


def test_label_exchange_exchanges_outputs():
    rng = np.random.default_rng(6)
    ds, truth = generate_exercise2(150, 4, 2, 3, rng)
    s = random_start(ds, 2, rng)
    swapped = PanelStart(s.model.permuted([1, 0]), s.covariate_params[::-1])
    for alg in ("EM", "CEM"):
        a = fit_panel(ds, 2, alg, s)
        b = fit_panel(ds, 2, alg, swapped)
        for g in range(2):
            np.testing.assert_allclose(a.model.components[g].vector(), b.model.components[1 - g].vector(), rtol=1e-9, atol=1e-12)
        if alg == "CEM":
            assert np.array_equal(a.extra["labels"], 1 - b.extra["labels"])


def test_zero_weight_cells_never_matter():
    rng = np.random.default_rng(7)
    ds, truth = generate_exercise2(120, 4, 2, 2, rng)
    w = np.ones_like(ds.outcome)
    w[rng.random(w.shape) < 0.15] = 0.0
    y2 = ds.outcome.copy()
    y2[w == 0] += 1e6
    x2 = ds.covariates.copy()
    x2[w == 0] -= 1e6
    a = PanelDataset(ds.outcome, ds.covariates, w)
    b = PanelDataset(y2, x2, w)
    s = random_start(a, 2, np.random.default_rng(1))
    for alg in ("EM", "CEM"):
        fa, fb = fit_panel(a, 2, alg, s), fit_panel(b, 2, alg, s)
        assert all(ca == cb for ca, cb in zip(fa.model.components, fb.model.components))
        assert fa.objective_trace == fb.objective_trace
        assert np.array_equal(fa.extra["labels"], fb.extra["labels"])
        assert np.all(fa.extra["labels"][w == 0] == -1)


def test_dataset_validation():
    with pytest.raises(DomainError):
        PanelDataset(np.zeros((2, 3)), np.zeros((2, 2, 1)))
    with pytest.raises(DomainError):
        PanelDataset(np.zeros((2, 3)), np.zeros((2, 3, 1)), np.full((2, 3), 1.5))
    y = np.zeros((2, 3))
    y[0, 0] = np.nan
    with pytest.raises(DomainError):
        PanelDataset(y, np.zeros((2, 3, 1)))
    w = np.ones((2, 3))
    w[0, 0] = 0
    assert PanelDataset(y, np.zeros((2, 3, 1)), w).outcome[0, 0] == 0.0


def test_covariate_params_floor():
    x = np.zeros((10, 2, 2))
    x[:, :, 0] = np.arange(20).reshape(10, 2)
    psi = covariate_params(x, np.ones((1, 10, 2)))
    assert np.linalg.eigvalsh(psi[0].sigma).min() >= 1e-8 * 0.999


def test_predict_outcome_soft_midline():
    comps = (PanelLinearParams(np.array([1.0, 0.0, 0.0]), 0.0, 1.0), PanelLinearParams(np.array([1.0, 0.0, 2.0]), 0.0, 1.0))

    class Fit:
        model = MixtureModel(comps, np.array([0.5, 0.5]))

    X = np.array([[[2.0, 0.0, 1.0]]])
    W = np.full((2, 1, 1), 0.5)
    assert predict_outcome(Fit, X, W)[0, 0] == pytest.approx(3.0)
    with pytest.raises(DomainError):
        predict_outcome(Fit, np.ones((1, 1, 5)), W)


def test_transition_counts():
    lab = np.array([[0, 0, 1], [1, -1, 1]])
    np.testing.assert_array_equal(transition_counts(lab, 2), [[1, 1], [0, 0]])


def test_csv_roundtrip(tmp_path):
    ds, truth = generate_exercise2(12, 3, 2, 2, np.random.default_rng(8))
    path = tmp_path / "p.csv"
    write_panel_csv(path, ds)
    back, periods = read_panel_csv(path)
    assert periods == [1, 2, 3]
    np.testing.assert_array_equal(back.outcome, ds.outcome)
    np.testing.assert_array_equal(back.covariates, ds.covariates)
    np.testing.assert_array_equal(back.truth_labels, truth.labels)


@pytest.mark.parametrize(
    "text,row",
    [
        ("unit_id,period,y,w,x1\n1,1,abc,1,0\n", 2),
        ("unit_id,period,y,w,x1\n1,1,1,1,0\n1,1,2,1,0\n", 3),
        ("unit_id,period,y,w,x1\n1,1,,1,0\n", 2),
        ("unit_id,period,y,w,x1\n1,1,1,2,0\n", 2),
        ("unit_id,period,y,x1\n1,1,1,0\n", 1),
        ("unit_id,period,y,w,x1\n1,1,1,1\n", 2),
    ],
)
def test_csv_errors_carry_row(tmp_path, text, row):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(IngestionError) as err:
        read_panel_csv(path)
    assert err.value.row == row


def test_csv_missing_cell_allowed_at_zero_weight(tmp_path):
    path = tmp_path / "ok.csv"
    path.write_text("unit_id,period,y,w,x1\na,1,,0,\na,2,1.5,1,2\n")
    ds, _ = read_panel_csv(path)
    assert ds.weights.tolist() == [[0.0, 1.0]]


def test_empty_csv(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("")
    with pytest.raises(IngestionError):
        read_panel_csv(path)
