"""End-to-end sanity of the python surface against known closed forms."""

import math

import numpy as np
import pytest

import dwc


def test_softplus_round_trip():
    x = np.linspace(-4.0, 25.0, 40)
    y = dwc.softplus(x)
    assert np.all(y > 0)
    back = dwc.softplus_inv(y)
    assert np.allclose(back, x, atol=1e-9)


def test_kl_standard_normal_identity():
    mu = np.zeros(64, dtype=np.float32)
    sigma = np.ones(64, dtype=np.float32)
    assert dwc.kl_ffg_scalar(mu, sigma) == pytest.approx(0.0, abs=1e-12)
    # KL(N(0.5, 0.3) || N(0,1)) per element, frozen closed form
    mu[:] = 0.5
    sigma[:] = 0.3
    per = math.log(1 / 0.3) + (0.09 + 0.25) / 2 - 0.5
    assert dwc.kl_ffg_scalar(mu, sigma) == pytest.approx(64 * per, rel=1e-6)


def test_consolidation_matches_hand_algebra():
    prior_mu = np.zeros(3, dtype=np.float32)
    prior_sigma = np.ones(3, dtype=np.float32)
    mu_a = np.array([1.0, -1.0, 0.5], dtype=np.float32)
    sigma_a = np.array([0.5, 0.5, 0.25], dtype=np.float32)
    mu_b = np.array([0.0, 2.0, -0.5], dtype=np.float32)
    sigma_b = np.array([0.25, 0.5, 0.5], dtype=np.float32)

    mu, sigma, clamps = dwc.consolidate(prior_mu, prior_sigma, [mu_a, mu_b],
                                        [sigma_a, sigma_b])
    assert clamps == 0
    for i in range(3):
        tau = 1 / sigma_a[i] ** 2 + 1 / sigma_b[i] ** 2 - 1.0
        mean = (mu_a[i] / sigma_a[i] ** 2 + mu_b[i] / sigma_b[i] ** 2 - 0.0) / tau
        assert sigma[i] == pytest.approx(1 / math.sqrt(tau), rel=1e-6)
        assert mu[i] == pytest.approx(mean, rel=1e-6)


def test_single_site_consolidation_is_identity():
    rng = np.random.default_rng(5)
    mu = rng.normal(size=16).astype(np.float32)
    sigma = (0.1 + rng.random(16) * 0.8).astype(np.float32)
    out_mu, out_sigma, _ = dwc.consolidate(np.zeros(16, np.float32),
                                           np.ones(16, np.float32), [mu], [sigma])
    assert np.allclose(out_mu, mu, atol=1e-6)
    assert np.allclose(out_sigma, sigma, atol=1e-6)


def test_dice_counts():
    pred = np.zeros((2, 2, 2), dtype=np.float32)
    truth = np.zeros((2, 2, 2), dtype=np.float32)
    pred[0, 0, 0] = 1
    truth[0, 0, 0] = 1
    truth[0, 0, 1] = 1
    d = dwc.dice_per_class(pred, truth, 3)
    assert d[0] == pytest.approx(2 * 6 / (2 * 6 + 1 + 0))
    assert d[1] == pytest.approx(2 * 1 / (2 * 1 + 0 + 1))
    assert math.isnan(d[2])


def test_t_distribution_quantile():
    # classic table entry: P(T <= 2.776) = 0.975 at 4 degrees of freedom
    assert dwc.student_t_cdf(2.776445105198, 4) == pytest.approx(0.975, abs=1e-9)
    assert dwc.student_t_cdf(0.0, 11) == pytest.approx(0.5, abs=1e-12)


def test_paired_ttest_matches_hand_value():
    r = dwc.paired_ttest([1.0, 2.0, 4.0], [0.0, 0.0, 1.0])
    # differences 1, 2, 3: mean 2, sd 1, t = 2 sqrt(3)
    assert r["t"] == pytest.approx(2 * math.sqrt(3), rel=1e-12)
    assert r["df"] == 2
    assert not r["degenerate"]
    same = dwc.paired_ttest([0.5, 0.75], [0.5, 0.75])
    assert same["degenerate"] and same["p"] == 1.0


def test_generated_volume_is_deterministic():
    img1, lab1 = dwc.generate_volume(8, 3, geometry_seed=11, site_seed=22, noise=0.05)
    img2, lab2 = dwc.generate_volume(8, 3, geometry_seed=11, site_seed=22, noise=0.05)
    assert np.array_equal(img1, img2)
    assert np.array_equal(lab1, lab2)
    assert set(np.unique(lab1)) <= {0.0, 1.0, 2.0}
    z = dwc.z_scored(img1)
    assert abs(float(z.mean())) < 1e-5
    assert float(z.std()) == pytest.approx(1.0, abs=1e-4)
