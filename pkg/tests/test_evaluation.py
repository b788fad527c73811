import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gammaln

from attrmogen.errors import ConfigError, NumericalError, ParameterError
from attrmogen.evaluation import (
    EvalConfig,
    MetricReport,
    attribute_control_protocol,
    confidence_interval,
    contrastive_loss,
    diversity,
    export_features,
    fid,
    mm_dist,
    multimodality,
    r_precision,
    train_feature_extractor,
    motion_features,
    text_features,
)
from attrmogen.motion_data import read_corpus


def chi_mean(k):
    return math.sqrt(2) * math.exp(gammaln((k + 1) / 2) - gammaln(k / 2))


# -- FID --------------------------------------------------------------------


def test_fid_identical_is_zero():
    a = np.random.default_rng(0).normal(size=(200, 6))
    assert abs(fid(a, a)) < 1e-6


def test_fid_symmetric():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(150, 5)), rng.normal(1, 2, size=(170, 5))
    assert abs(fid(a, b) - fid(b, a)) < 1e-6


def test_fid_1d_shift():
    a = np.random.default_rng(2).normal(size=(500, 1))
    assert fid(a, a + 1) == pytest.approx(1.0, abs=1e-6)


def test_fid_gaussian_closed_form():
    # N(0, I) vs N(0, 4I) in F dims (population fits): F * (1 + 4 - 2*2) = F
    rng = np.random.default_rng(3)
    z = rng.normal(size=(400, 3))
    z = (z - z.mean(0)) @ np.linalg.inv(np.linalg.cholesky(np.cov(z, rowvar=False))).T
    assert fid(z, 2 * z) == pytest.approx(3.0, abs=1e-6)


def test_fid_errors():
    with pytest.raises(ParameterError):
        fid(np.zeros((1, 2)), np.zeros((5, 2)))
    with pytest.raises(NumericalError):
        fid(np.full((3, 2), np.nan), np.zeros((5, 2)))
    with pytest.warns(UserWarning):
        fid(np.random.default_rng(0).normal(size=(4, 8)), np.random.default_rng(1).normal(size=(4, 8)))


# -- R-Precision / MM-Dist / Diversity --------------------------------------


def test_r_precision_identical_pairs():
    f = np.random.default_rng(0).normal(size=(64, 8))
    np.testing.assert_array_equal(r_precision(f, f), [1.0, 1.0, 1.0])


def test_r_precision_random_is_k_over_32():
    rng = np.random.default_rng(4)
    n = 32 * 100
    rp = r_precision(rng.normal(size=(n, 8)), rng.normal(size=(n, 8)))
    for k in range(3):
        p = (k + 1) / 32
        assert abs(rp[k] - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_r_precision_drops_remainder_and_needs_a_batch():
    f = np.random.default_rng(0).normal(size=(40, 4))
    g = f.copy()
    g[32:] = 0.0  # rows in the dropped remainder cannot matter
    np.testing.assert_array_equal(r_precision(f, g), [1.0, 1.0, 1.0])
    with pytest.raises(ParameterError):
        r_precision(f[:31], f[:31])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_r_precision_monotone_and_bounded(seed):
    rng = np.random.default_rng(seed)
    rp = r_precision(rng.normal(size=(64, 3)), rng.normal(size=(64, 3)))
    assert 0 <= rp[0] <= rp[1] <= rp[2] <= 1


def test_mm_dist_examples():
    t = np.zeros((2, 3))
    assert mm_dist(t, t) == 0
    assert mm_dist(t, t + np.array([1.0, 0, 0])) == pytest.approx(1.0)
    assert mm_dist(np.zeros((2, 2)), np.array([[3.0, 0.0], [0.0, 4.0]])) == pytest.approx(3.5)


def test_diversity_examples():
    assert diversity(np.ones((10, 4)), 3) == 0
    assert diversity(np.array([[0.0, 0.0], [3.0, 4.0]]), 1) == pytest.approx(5.0)


def test_diversity_standard_normal_64d():
    f = np.random.default_rng(5).normal(size=(600, 64))
    d = diversity(f, 300, np.random.default_rng(6))
    sigma = math.sqrt(2 * (64 - chi_mean(64) ** 2) / 300)  # std of ||x - y|| / sqrt(n_pairs)
    assert abs(d - math.sqrt(2) * chi_mean(64)) <= 3 * sigma
    assert abs(d - math.sqrt(2 * 64)) <= 3 * sigma


def test_diversity_deterministic_given_rng():
    f = np.random.default_rng(0).normal(size=(100, 5))
    assert diversity(f, 30, np.random.default_rng(1)) == diversity(f, 30, np.random.default_rng(1))


# -- MModality --------------------------------------------------------------


def test_multimodality_deterministic_generator_is_zero():
    assert multimodality(lambda text, seed: np.array([len(text), 1.0]), ["a b", "c"], reps=5) == 0.0


def test_multimodality_two_reps():
    out = {0: np.array([0.0, 0.0]), 1: np.array([3.0, 4.0])}
    assert multimodality(lambda text, seed: out[seed % 2], ["x"], reps=2, seed=0) == pytest.approx(5.0)


# -- repetition statistics --------------------------------------------------


def test_confidence_interval_formula():
    v = np.random.default_rng(7).normal(size=20)
    mean, half = confidence_interval(v)
    assert mean == pytest.approx(v.mean())
    assert half == pytest.approx(1.96 * v.std(ddof=0) / math.sqrt(20))
    report = MetricReport()
    report.add("fid", v)
    assert report.metrics["fid"]["ci95"] == half and len(report.metrics["fid"]["values"]) == 20


# -- attribute control protocol ---------------------------------------------


def test_protocol_identity_generator_matches_classifier_accuracy():
    rng = np.random.default_rng(0)
    labels = np.stack([rng.integers(0, 4, 200), rng.integers(0, 2, 200)], 1)
    motions = labels.astype(float)
    noisy = labels.copy()
    noisy[::5, 1] ^= 1  # classifier wrong on 20% of genders
    classify = lambda m: noisy
    res = attribute_control_protocol(lambda t: motions, labels, classify, "true", rng)
    assert res["gender"]["avg"] == pytest.approx(0.8)
    assert res["age_group"]["avg"] == 1.0


def test_protocol_shuffled_with_attribute_blind_generator():
    rng = np.random.default_rng(1)
    n = 4000
    labels = np.stack([rng.integers(0, 4, n), rng.integers(0, 2, n)], 1)
    res = attribute_control_protocol(lambda t: labels, labels, lambda m: m, "shuffled", rng)
    assert abs(res["gender"]["avg"] - 0.5) <= 3 * math.sqrt(0.25 / n)
    assert abs(res["age_group"]["avg"] - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / n)
    with pytest.raises(ConfigError):
        attribute_control_protocol(lambda t: labels, labels, lambda m: m, "bogus", rng)


# -- contrastive extractor + export -----------------------------------------


def test_contrastive_loss_zero_when_matched_and_separated():
    import torch

    m = torch.tensor([[0.0, 0.0], [5.0, 5.0]])
    assert contrastive_loss(m, m.clone(), np.array([0, 1]), 1.0, 1).item() == 0.0
    # same group: the negative term is skipped even when close
    m2 = torch.zeros(2, 2)
    assert contrastive_loss(m2, m2.clone(), np.array([0, 0]), 1.0, 1).item() == 0.0


def test_feature_extractor_trains_and_export_roundtrips(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 16, 3)).astype(np.float32)
    texts = ["walk" if i % 2 else "run fast" for i in range(40)]
    x[::2] += 2.0
    fx = train_feature_extractor(EvalConfig(steps=60, feat_dim=4, width=8, text_dim=4), x, texts,
                                 np.arange(40) % 2)
    feats = motion_features(fx, x)
    assert feats.shape == (40, 4) and text_features(fx, texts).shape == (40, 4)
    labels = np.stack([np.arange(40) % 4, np.arange(40) % 2], 1)
    export_features(tmp_path / "f", feats, labels, texts)
    back = read_corpus(tmp_path / "f")
    assert len(back) == 40
    np.testing.assert_array_equal(np.concatenate(back.data), feats.astype(np.float32))
    export_features(tmp_path / "g", feats, labels, texts)
    for name in ("manifest.json", "data.bin"):
        assert (tmp_path / "f" / name).read_bytes() == (tmp_path / "g" / name).read_bytes()
