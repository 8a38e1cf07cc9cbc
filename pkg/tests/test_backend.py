import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from cgadapt.backend import (
    PLDA,
    BackendError,
    BackendModel,
    adaptive_snorm,
    fit_center_lda,
    fit_plda,
    length_normalize,
    plda_score,
    stats_pool_embed,
    train_backend,
)
from cgadapt.metrics import MetricError, compute_eer, compute_min_dcf


# ------------------------------------------------------------ embedder


def test_stats_pool_examples(rng):
    assert stats_pool_embed(np.full((10, 3), 2.0))[3:].tolist() == [0.0, 0.0, 0.0]
    np.testing.assert_array_equal(stats_pool_embed(np.array([[1.0, 2.0], [3.0, 6.0]])), [2.0, 4.0, 1.0, 2.0])
    x = rng.normal(size=(50, 40))
    e = stats_pool_embed(x)
    assert e.shape == (80,)
    np.testing.assert_allclose(stats_pool_embed(x[rng.permutation(50)]), e, rtol=1e-13)


def test_stats_pool_uses_vad(rng):
    x = rng.normal(size=(6, 2))
    vad = np.array([1, 0, 1, 1, 0, 0], dtype=bool)
    np.testing.assert_array_equal(stats_pool_embed(x, vad), stats_pool_embed(x[vad]))
    with pytest.raises(BackendError):
        stats_pool_embed(x, np.eye(6, dtype=bool)[0])


# ----------------------------------------------------------------- LDA


def test_lda_two_class_direction(rng):
    cov = np.array([[1.0, 0.6], [0.6, 0.5]])
    a = rng.multivariate_normal([0, 0], cov, size=300)
    b = rng.multivariate_normal([4, -1], cov, size=300)
    x = np.vstack([a, b])
    labels = np.r_[np.zeros(300), np.ones(300)]
    _, proj = fit_center_lda(x, labels, 1)
    sw = (np.cov(a.T, bias=True) + np.cov(b.T, bias=True)) / 2
    w = np.linalg.solve(sw, b.mean(0) - a.mean(0))
    cosang = abs(proj[:, 0] @ w) / (np.linalg.norm(proj[:, 0]) * np.linalg.norm(w))
    assert np.arccos(min(1.0, cosang)) < 1e-6


def _isotropic_within(rng, n_cls=6, d=4):
    """Classes whose residuals are +-e_i, so the within scatter is exactly c*I."""
    means = rng.normal(size=(n_cls, d)) * np.array([5.0, 3.0, 1.0, 0.5])
    resid = np.vstack([np.eye(d), -np.eye(d)])
    x = np.vstack([m + resid for m in means])
    labels = np.repeat(np.arange(n_cls), 2 * d)
    return x, labels, means


def test_lda_isotropic_within_matches_between_eigvecs(rng):
    x, labels, means = _isotropic_within(rng)
    sb = np.cov((means - means.mean(0)).T, bias=True)
    evals, evecs = np.linalg.eigh(sb)
    evecs = evecs[:, ::-1]
    _, full = fit_center_lda(x, labels, 4)
    for k in range(4):
        c = abs(full[:, k] @ evecs[:, k]) / np.linalg.norm(full[:, k])
        assert c == pytest.approx(1.0, abs=1e-9)
    _, two = fit_center_lda(x, labels, 2)
    q, _ = np.linalg.qr(two)
    top = evecs[:, :2]
    np.testing.assert_allclose(q @ q.T, top @ top.T, atol=1e-9)


def test_lda_label_names_do_not_matter(rng):
    x = rng.normal(size=(60, 5)) + np.repeat(rng.normal(size=(6, 5)) * 3, 10, axis=0)
    lab = np.repeat(np.arange(6), 10)
    renamed = np.array(["spk%d" % (5 - k) for k in lab])
    m1, p1 = fit_center_lda(x, lab, 3)
    m2, p2 = fit_center_lda(x, renamed, 3)
    np.testing.assert_array_equal(m1, m2)
    np.testing.assert_allclose(p1, p2, rtol=1e-12, atol=1e-14)


def test_lda_sign_convention(rng):
    x = rng.normal(size=(60, 5)) + np.repeat(rng.normal(size=(6, 5)) * 3, 10, axis=0)
    _, p = fit_center_lda(x, np.repeat(np.arange(6), 10), 3)
    for col in p.T:
        assert col[np.argmax(np.abs(col))] > 0


def test_lda_errors_and_ridge(rng, caplog):
    with pytest.raises(BackendError):
        fit_center_lda(rng.normal(size=(10, 3)), np.zeros(10), 1)
    with pytest.raises(BackendError):
        fit_center_lda(rng.normal(size=(10, 3)), np.arange(10) % 2, 4)
    x = rng.normal(size=(40, 3))
    x[:, 2] = 0.0  # rank-deficient within scatter
    fit_center_lda(x, np.arange(40) % 4, 2)
    assert "ridge" in caplog.text


# ----------------------------------------------------------- length norm


@settings(max_examples=30)
@given(seed=st.integers(0, 10**6), scale=st.floats(1e-3, 1e3))
def test_length_normalize_properties(seed, scale):
    x = np.random.default_rng(seed).normal(size=(4, 7))
    y = length_normalize(x)
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, rtol=1e-14)
    np.testing.assert_allclose(length_normalize(x * scale), y, rtol=1e-13)
    np.testing.assert_allclose(length_normalize(y), y, rtol=1e-15)


def test_length_normalize_zero():
    with pytest.raises(BackendError):
        length_normalize(np.zeros(3))


# ---------------------------------------------------------------- PLDA


def oracle_llr(b, w, mu, e, t):
    b, w = np.atleast_2d(b), np.atleast_2d(w)
    d = b.shape[0]
    tot = b + w
    joint = np.block([[tot, b], [b, tot]])
    e, t = np.atleast_1d(e) - mu, np.atleast_1d(t) - mu
    same = multivariate_normal(np.zeros(2 * d), joint).logpdf(np.r_[e, t])
    diff = multivariate_normal(np.zeros(d), tot)
    return same - diff.logpdf(e) - diff.logpdf(t)


def test_plda_scalar_density_oracle():
    m = PLDA(np.zeros(1), np.eye(1), 0.01 * np.eye(1))
    assert abs(plda_score(m, [1.0], [1.0]) - oracle_llr(1.0, 0.01, 0.0, 1.0, 1.0)) <= 1e-9


@pytest.mark.parametrize("d", [1, 2])
def test_plda_random_models_vs_oracle(d, rng):
    for _ in range(20):
        a, c = rng.normal(size=(d, d)), rng.normal(size=(d, d))
        b, w = a @ a.T + 0.1 * np.eye(d), c @ c.T + 0.1 * np.eye(d)
        mu = rng.normal(size=d)
        m = PLDA(mu, b, w)
        e, t = rng.normal(size=d) * 2, rng.normal(size=d) * 2
        assert abs(plda_score(m, e, t) - oracle_llr(b, w, mu, e, t)) <= 1e-9
        assert plda_score(m, e, t) == pytest.approx(plda_score(m, t, e), abs=1e-12)


def test_plda_zero_between_gives_zero(rng):
    m = PLDA(np.zeros(3), np.zeros((3, 3)), np.eye(3))
    assert np.abs(m.score(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)))).max() < 1e-12


def test_plda_rejects_non_pd():
    with pytest.raises(BackendError):
        PLDA(np.zeros(2), np.eye(2), -np.eye(2))


def _synth_plda(rng, n_spk, n_utt, d=5):
    a = rng.normal(size=(d, d))
    b_true = a @ a.T / d + 0.5 * np.eye(d)
    c = rng.normal(size=(d, d))
    w_true = c @ c.T / d + 0.2 * np.eye(d)
    y = rng.multivariate_normal(np.zeros(d), b_true, size=n_spk)
    x = np.repeat(y, n_utt, axis=0) + rng.multivariate_normal(np.zeros(d), w_true, size=n_spk * n_utt)
    return x, np.repeat(np.arange(n_spk), n_utt), b_true, w_true, y


def rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_plda_em_recovers_population_covariances():
    rng = np.random.default_rng(2024)
    x, lab, b, w, _ = _synth_plda(rng, 10000, 10)
    m = fit_plda(x, lab)
    assert rel_fro(m.between, b) <= 0.05
    assert rel_fro(m.within, w) <= 0.05


def test_plda_em_recovers_realised_covariances():
    rng = np.random.default_rng(7)
    x, lab, _, _, y = _synth_plda(rng, 1000, 10)
    m = fit_plda(x, lab)
    b_real = np.cov(y.T, bias=True)
    w_real = np.cov((x - np.repeat(y, 10, axis=0)).T, bias=True)
    assert rel_fro(m.between, b_real) <= 0.05
    assert rel_fro(m.within, w_real) <= 0.05


def test_plda_em_monotone(rng):
    x, lab, *_ = _synth_plda(rng, 50, 4, d=3)
    h = fit_plda(x, lab).loglik_history
    assert len(h) > 2
    assert all(b >= a - 1e-9 * abs(a) for a, b in zip(h, h[1:]))


def test_plda_within_only_data(rng):
    x = rng.normal(size=(300 * 5, 3))
    m = fit_plda(x, np.repeat(np.arange(300), 5))
    assert np.linalg.norm(m.between) <= 0.05 * np.linalg.norm(m.within)


def test_plda_degenerate_inputs(rng):
    with pytest.raises(BackendError):
        fit_plda(rng.normal(size=(5, 2)), np.zeros(5))
    with pytest.raises(BackendError):
        fit_plda(rng.normal(size=(4, 2)), [0, 0, 0, 1])


# -------------------------------------------------------------- S-norm


def test_snorm_identity_stats():
    # top-2 of {1,-1,...}: mean 0, sample std sqrt(2) -> scale cohort so sigma is 1
    c = np.array([[1 / np.sqrt(2), -1 / np.sqrt(2)]])
    assert adaptive_snorm([3.7], c, c, top_k=2)[0] == pytest.approx(3.7, rel=1e-14)


def test_snorm_hand_case():
    got = adaptive_snorm([2.0], [[1.0, 0.0]], [[0.0, -1.0]], top_k=2)[0]
    s = np.sqrt(0.5)
    assert got == pytest.approx(0.5 * ((2 - 0.5) / s + (2 + 0.5) / s), rel=1e-14)


def test_snorm_uses_top_k_and_is_symmetric(rng):
    s = rng.normal(size=4)
    ce, ct = rng.normal(size=(4, 30)), rng.normal(size=(4, 30))
    a = adaptive_snorm(s, ce, ct, top_k=5)
    np.testing.assert_allclose(a, adaptive_snorm(s, ct, ce, top_k=5), rtol=1e-14)
    top = lambda c: -np.sort(-c)[:5]
    i = 2
    ref = 0.5 * ((s[i] - top(ce[i]).mean()) / top(ce[i]).std(ddof=1) + (s[i] - top(ct[i]).mean()) / top(ct[i]).std(ddof=1))
    assert a[i] == pytest.approx(ref, rel=1e-13)


def test_snorm_small_cohort():
    # top_k beyond the cohort falls back to the whole cohort
    assert adaptive_snorm([1.0], [[0.0, 2.0]], [[0.0, 2.0]], top_k=200)[0] == pytest.approx(0.0)
    with pytest.raises(BackendError):
        adaptive_snorm([1.0], [[0.5]], [[0.5]], top_k=1)


# ------------------------------------------------------------- metrics


def brute_force_points(scores, labels):
    """Thresholds from +inf down through every distinct score, O(n^2)."""
    scores, labels = np.asarray(scores), np.asarray(labels, bool)
    nt, nn = labels.sum(), (~labels).sum()
    out = []
    for thr in [np.inf] + sorted(set(scores.tolist()), reverse=True):
        acc = scores >= thr
        out.append((np.sum(labels & ~acc) / nt, np.sum(~labels & acc) / nn))
    return out


def brute_eer(scores, labels):
    pts = brute_force_points(scores, labels)
    for (m0, f0), (m1, f1) in zip(pts, pts[1:]):
        if m0 <= f0:
            return m0
        if m1 <= f1:
            t = (m0 - f0) / ((m0 - f0) - (m1 - f1))
            return m0 + t * (m1 - m0)
    return pts[-1][0]


def brute_dcf(scores, labels, p=0.01, cm=1.0, cf=1.0):
    costs = [cm * p * m + cf * (1 - p) * f for m, f in brute_force_points(scores, labels)]
    return min(costs) / min(cm * p, cf * (1 - p))


def test_metrics_match_brute_force_on_random_sets():
    rng = np.random.default_rng(50)
    for _ in range(50):
        n = int(rng.integers(2, 201))
        labels = rng.random(n) < rng.uniform(0.1, 0.9)
        labels[0], labels[1] = True, False
        scores = np.round(rng.normal(size=n) + labels * rng.uniform(0, 3), int(rng.integers(1, 4)))
        assert compute_eer(scores, labels) == brute_eer(scores, labels)
        assert compute_min_dcf(scores, labels) == brute_dcf(scores, labels)
        assert compute_min_dcf(scores, labels, 0.05, 10, 1) == brute_dcf(scores, labels, 0.05, 10, 1)


def test_eer_examples():
    assert compute_eer([0.8, 0.6, 0.2, 0.4], [1, 1, 0, 0]) == 0.0
    s = [0.9, 0.7, 0.5, 0.3, 0.6, 0.4, 0.2, 0.1]
    lab = [1, 1, 1, 1, 0, 0, 0, 0]
    assert compute_eer(s, lab) == pytest.approx(0.25, abs=1e-15)
    assert compute_eer([0.8, 0.6, 0.2, 0.4], [0, 0, 1, 1]) == 1.0


def test_min_dcf_examples(rng):
    assert compute_min_dcf([0.8, 0.6, 0.2, 0.4], [1, 1, 0, 0]) == 0.0
    for _ in range(10):
        s, lab = rng.normal(size=100), rng.random(100) < 0.3
        lab[:2] = [True, False]
        assert compute_min_dcf(s, lab) <= 1.0 + 1e-12
    s6 = [2.0, 1.5, 0.3, 1.1, 0.2, -0.4]
    l6 = [1, 1, 1, 0, 0, 0]
    assert compute_min_dcf(s6, l6, p_target=0.5) == brute_dcf(s6, l6, 0.5)
    assert compute_min_dcf(s6, l6, p_target=0.5) == pytest.approx(1 / 3)


@settings(max_examples=30)
@given(seed=st.integers(0, 10**6), a=st.floats(0.01, 100), b=st.floats(-50, 50))
def test_eer_invariant_to_monotone_affine_map(seed, a, b):
    r = np.random.default_rng(seed)
    s, lab = r.normal(size=40), np.arange(40) % 3 == 0
    assert compute_eer(a * s + b, lab) == pytest.approx(compute_eer(s, lab), abs=1e-12)


def test_metrics_single_class():
    with pytest.raises(MetricError):
        compute_eer([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        compute_min_dcf([0.1, 0.2], [0, 0])


# ------------------------------------------------------------- backend


def test_backend_round_trip_and_scores(rng):
    x, lab, *_ = _synth_plda(rng, 30, 6, d=8)
    bk = train_backend(x, lab, lda_dim=4)
    z = bk.transform(x[:5])
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0)
    again = BackendModel.from_tensors(bk.to_tensors())
    np.testing.assert_array_equal(again.plda.score(z, z[::-1]), bk.plda.score(z, z[::-1]))
    # same-speaker pairs outscore different-speaker pairs on average
    za = bk.transform(x)
    same = bk.plda.score(za[0::6], za[1::6]).mean()
    diff = bk.plda.score(za[0::6], np.roll(za[1::6], 1, axis=0)).mean()
    assert same > diff
