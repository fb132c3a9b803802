import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

from ufedgan import data, metrics
from ufedgan.errors import ContractError, DimensionError
from ufedgan.metrics import GaussianMoments


def _moments(mean, cov):
    mean, cov = np.atleast_1d(np.asarray(mean, float)), np.atleast_2d(np.asarray(cov, float))
    return GaussianMoments(mean, cov, 1000)


def _fid_oracle(m1, c1, m2, c2):
    covmean = linalg.sqrtm(c1 @ c2).real
    return float(np.sum((m1 - m2) ** 2) + np.trace(c1 + c2 - 2 * covmean))


# FID -------------------------------------------------------------------------

def test_fid_identical_moments_is_zero():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(50, 6))
    cov = a.T @ a / 50
    m = _moments(rng.normal(size=6), cov)
    assert metrics.fid(m, m) < 1e-6


def test_fid_one_dimensional_closed_form():
    # N(0, 1) vs N(3, 1): (0 - 3)^2 + 1 + 1 - 2 * sqrt(1 * 1) = 9
    assert metrics.fid(_moments(0.0, 1.0), _moments(3.0, 1.0)) == pytest.approx(9.0, abs=1e-9)


def test_fid_diagonal_closed_form():
    d1, d2 = np.array([1.0, 4.0, 9.0]), np.array([4.0, 1.0, 0.25])
    expected = 1.0 + np.sum(d1 + d2 - 2 * np.sqrt(d1 * d2))
    got = metrics.fid(_moments([0, 0, 0], np.diag(d1)), _moments([1, 0, 0], np.diag(d2)))
    assert got == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_fid_matches_scipy_sqrtm(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(40, 5)), rng.normal(size=(40, 5)) * 2
    c1, c2 = a.T @ a / 40, b.T @ b / 40
    m1, m2 = rng.normal(size=5), rng.normal(size=5)
    got = metrics.fid(_moments(m1, c1), _moments(m2, c2))
    assert got == pytest.approx(_fid_oracle(m1, c1, m2, c2), rel=1e-7, abs=1e-9)


def test_fid_is_symmetric_and_nonnegative():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(200, 4)), rng.normal(1.0, 2.0, size=(200, 4))
    a, b = GaussianMoments.of(x), GaussianMoments.of(y)
    assert metrics.fid(a, b) == pytest.approx(metrics.fid(b, a), rel=1e-9)
    assert metrics.fid(a, b) >= 0


def test_fid_warns_on_clipped_eigenvalue():
    bad = _moments([0.0, 0.0], [[1.0, 0.0], [0.0, -1e-3]])
    with pytest.warns(metrics.NumericalWarning):
        metrics.fid(bad, _moments([0.0, 0.0], np.eye(2)))


def test_fid_rank_deficient_does_not_warn():
    x = np.random.default_rng(0).normal(size=(3, 10))  # fewer samples than dimensions
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        metrics.fid(GaussianMoments.of(x), GaussianMoments.of(x + 1))


def test_fid_dimension_mismatch():
    with pytest.raises(DimensionError):
        metrics.fid(_moments([0.0], 1.0), _moments([0.0, 0.0], np.eye(2)))


# SSIM ------------------------------------------------------------------------

def test_ssim_of_image_with_itself_is_one():
    img = np.random.default_rng(0).uniform(-1, 1, (1, 16, 16))
    assert metrics.ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_of_binary_complement_is_negative():
    # one 8x8 window covers the whole image, so SSIM reduces to global statistics
    x = np.zeros((8, 8))
    x[:, :3] = 1.0
    x[2, 5] = 1.0
    y = 1.0 - x
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = ((x - mx) * (y - my)).mean()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    expected = (2 * mx * my + c1) * (2 * cov + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    got = metrics.ssim(x, y, data_range=1.0)
    assert got == pytest.approx(expected, abs=1e-12)
    assert got < 0


def test_ssim_is_symmetric():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(-1, 1, (16, 16)), rng.uniform(-1, 1, (16, 16))
    assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-12)


@pytest.mark.parametrize("window", [3, 7])
def test_ssim_matches_scikit_image(window):
    skimage_metrics = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(window)
    a = rng.uniform(-1, 1, (20, 20))
    b = np.clip(a + rng.normal(0, 0.3, a.shape), -1, 1)
    ref = skimage_metrics.structural_similarity(a, b, win_size=window, data_range=2.0,
                                                use_sample_covariance=False, gaussian_weights=False)
    assert metrics.ssim(a, b, window=window) == pytest.approx(ref, abs=1e-9)


def test_ssim_matrix_agrees_with_pairwise():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(-1, 1, (5, 1, 12, 12)), rng.uniform(-1, 1, (7, 1, 12, 12))
    m = metrics.ssim_matrix(a, b, chunk=2)
    assert m.shape == (5, 7)
    assert m[3, 6] == pytest.approx(metrics.ssim(a[3], b[6]), abs=1e-12)


def test_ssim_shape_mismatch():
    with pytest.raises(DimensionError):
        metrics.ssim(np.zeros((8, 8)), np.zeros((9, 9)))


# IS --------------------------------------------------------------------------

def test_uniform_probe_gives_one():
    probs = np.full((100, 7), 1 / 7)
    assert metrics.inception_score_from_probs(probs, splits=10) == pytest.approx(1.0, abs=1e-9)


def test_one_hot_covering_all_classes_gives_k():
    k = 6
    probs = np.eye(k)[np.tile(np.arange(k), 20)]
    assert metrics.inception_score_from_probs(probs, splits=4) == pytest.approx(k, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(20, 200), st.integers(0, 2 ** 32 - 1), st.floats(0.05, 20.0))
def test_inception_score_bounds(k, n, seed, sharpness):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(n, k)) * sharpness
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    score = metrics.inception_score_from_probs(probs, splits=min(10, n // 2))
    assert 1 - 1e-9 <= score <= k + 1e-9


def test_inception_score_needs_enough_samples():
    with pytest.raises(ContractError):
        metrics.inception_score_from_probs(np.full((5, 3), 1 / 3), splits=10)


def test_bin_probe_rewards_matching_quantiles():
    rng = np.random.default_rng(0)
    real = rng.normal(2.0, 0.5, 5000)
    probe = metrics.BinProbe.fit(real)
    good = metrics.inception_score(rng.normal(2.0, 0.5, 2000), probe)
    narrow = metrics.inception_score(rng.normal(2.0, 0.1, 2000), probe)
    shifted = metrics.inception_score(rng.normal(0.0, 0.5, 2000), probe)
    assert good > narrow and good > shifted
    probs = probe.predict_proba(real[:100])
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_mixture_probe_posterior():
    dist = data.mixture2d()
    probs = metrics.MixtureProbe(dist).predict_proba(dist.means)
    np.testing.assert_array_equal(probs.argmax(axis=1), np.arange(8))


def test_probe_classifier_trains_and_freezes():
    ds = data.tiny_images(800, seed=0)
    probe = metrics.train_probe_classifier(ds, seed=0, max_epochs=20)
    assert probe.val_accuracy >= 0.9
    assert probe.features(ds.samples[:10]).shape == (10, 64)
    probe.model.parameters()[0].data[0, 0] += 1.0
    with pytest.raises(ContractError):
        probe.predict_proba(ds.samples[:10])


# moments and linear evaluation ------------------------------------------------

def test_moment_distance_identical_sets():
    x = np.random.default_rng(0).normal(size=(200, 3))
    mean_gap, std_gap = metrics.moment_distance(x, x)
    assert np.all(mean_gap == 0) and np.all(std_gap == 0)


def test_moment_distance_clt_band():
    rng = np.random.default_rng(1)
    mean_gap, _ = metrics.moment_distance(rng.normal(0, 1, (10000, 1)), rng.normal(2, 1, (10000, 1)))
    assert abs(mean_gap[0] - 2.0) < 0.05


def test_moment_distance_shift():
    x = np.full((150, 2), 0.7)
    mean_gap, std_gap = metrics.moment_distance(x + 1.5, x)
    np.testing.assert_allclose(mean_gap, 1.5)
    np.testing.assert_allclose(std_gap, 0.0, atol=1e-12)


def test_moment_distance_needs_samples():
    with pytest.raises(ContractError):
        metrics.moment_distance(np.zeros((10, 1)), np.zeros((200, 1)))


def _blobs(n, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.normal(size=(n, 2)) * 0.5 + np.where(y[:, None] == 1, 4.0, -4.0)
    return x, y


def test_linear_evaluation_separable():
    x, y = _blobs(400, 0)
    tx, ty = _blobs(400, 1)
    assert metrics.linear_evaluation(x, y, tx, ty) >= 0.99


def test_linear_evaluation_shuffled_labels_near_chance():
    rng = np.random.default_rng(2)
    k, n = 4, 4000
    x = rng.normal(size=(n, 5))
    y = rng.integers(0, k, n)
    acc = metrics.linear_evaluation(x[:2000], y[:2000], x[2000:], y[2000:], k)
    # binomial band around 1/k: 4 standard deviations of the test accuracy
    assert abs(acc - 1 / k) < 4 * np.sqrt(0.25 * 0.75 / 2000)


# reports -----------------------------------------------------------------------

def test_metric_report_validation():
    with pytest.raises(ContractError):
        metrics.MetricReport(1, 0, "observer", 1.0)
    with pytest.raises(ContractError):
        metrics.MetricReport(1, 0, "server", 0.5)
    with pytest.raises(ContractError):
        metrics.MetricReport(1, 0, "server", 1.0, ssim=1.5)
    with pytest.raises(ContractError):
        metrics.MetricReport(1, 0, "server", 1.0, fid=-1.0)


def test_metric_csv_roundtrip(tmp_path):
    reports = [metrics.MetricReport(1, 0, "server", 2.5, fid=3.25), metrics.MetricReport(1, 0, "attacker", 1.0)]
    path = tmp_path / "m.csv"
    metrics.write_metric_csv(path, reports[:1])
    metrics.write_metric_csv(path, reports[1:], append=True)
    rows = metrics.read_metric_csv(path)
    assert [r["role"] for r in rows] == ["server", "attacker"]
    assert float(rows[0]["fid"]) == 3.25 and rows[1]["fid"] == ""


def test_evaluate_samples_fields():
    ds = data.tiny_images(300, seed=1)
    probe = metrics.train_probe_classifier(data.tiny_images(800, seed=0), seed=0)
    out = metrics.evaluate_samples(ds.samples[:150], ds.samples[150:], probe)
    assert set(out) == {"inception_score", "fid", "ssim", "mean_gap", "std_gap"}
    assert -1 <= out["ssim"] <= 1 and out["fid"] >= 0
