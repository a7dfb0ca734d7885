import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from unmix_gmm.core import GaussianComponent, ProjectionModel, SpectralLibrary, ValidationError
from unmix_gmm.gmm_fit import (
    CvicConfig,
    EmTrace,
    choose_count,
    cvic_fold_scores,
    cvic_score,
    fit_bundle,
    fit_gmm_em,
    fold_labels,
    mixture_logpdf,
    modal_tuple,
    regularization,
    select_components,
)


def two_blobs(rng, n=400, d=3, sep=10.0):
    a = rng.normal(size=(n // 2, d))
    b = rng.normal(size=(n - n // 2, d))
    b[:, 0] += sep
    return np.vstack([a, b])


def test_mixture_logpdf_matches_scipy(rng):
    comps = [
        GaussianComponent(0.3, [0.0, 1.0], [[1.0, 0.2], [0.2, 0.5]]),
        GaussianComponent(0.7, [2.0, -1.0], [[0.4, 0.0], [0.0, 2.0]]),
    ]
    X = rng.normal(size=(20, 2))
    expected = np.log(sum(c.weight * multivariate_normal(c.mean, c.covariance).pdf(X) for c in comps))
    np.testing.assert_allclose(mixture_logpdf(X, comps), expected, rtol=1e-12)


def test_single_component_is_closed_form(rng):
    X = rng.normal(size=(50, 3))
    (c,) = fit_gmm_em(X, 1)
    eps = regularization(X)
    np.testing.assert_allclose(c.mean, X.mean(axis=0))
    np.testing.assert_allclose(c.covariance, np.cov(X, rowvar=False, bias=True) + eps * np.eye(3), rtol=1e-12)
    assert c.weight == 1.0


def test_regularization_scale(rng):
    X = rng.normal(size=(100, 4)) * 2.0
    assert regularization(X) == pytest.approx(1e-6 * np.var(X, axis=0).sum() / 4)
    assert regularization(np.ones((5, 2))) > 0


def test_em_recovers_separated_blobs(rng):
    X = two_blobs(rng, n=4000)
    comps = sorted(fit_gmm_em(X, 2, seed=0), key=lambda c: c.mean[0])
    # sigma = 1; the sample means themselves are within ~0.02 of the truth
    np.testing.assert_allclose(comps[0].mean, np.zeros(3), atol=0.1)
    np.testing.assert_allclose(comps[1].mean, [10.0, 0.0, 0.0], atol=0.1)
    assert sum(c.weight for c in comps) == pytest.approx(1.0, abs=1e-10)


def test_two_points_two_components_get_equal_weights():
    comps = fit_gmm_em(np.array([[0.0, 0.0], [1.0, 1.0]]), 2, seed=0)
    assert [c.weight for c in comps] == [0.5, 0.5]


def test_duplicated_data_with_copy_folds_scores_symmetric(rng):
    base = rng.normal(size=(30, 2))
    X = np.vstack([base] * 5)
    labels = np.repeat(np.arange(5), 30)
    scores = cvic_fold_scores(X, 2, folds=5, seed=0, labels=labels)
    np.testing.assert_allclose(scores, scores[0], rtol=0, atol=1e-9)


def test_standard_normal_score_matches_entropy(rng):
    X = rng.normal(size=(20000, 1))
    assert cvic_score(X, 1) / X.shape[0] == pytest.approx(-0.5 * (1 + np.log(2 * np.pi)), abs=0.05)


def test_extra_components_do_not_help_unimodal_data(rng):
    X = rng.normal(size=(500, 3))
    L1, L4 = cvic_score(X, 1, seed=0), cvic_score(X, 4, seed=0)
    assert L4 <= L1 + 1e-3 * abs(L1)


def test_em_log_likelihood_monotone(rng):
    trace = EmTrace()
    fit_gmm_em(two_blobs(rng), 3, seed=1, trace=trace)
    ll = np.array(trace.log_likelihood)
    steady = ~np.array(trace.reinitialized)
    pairs = steady[1:] & steady[:-1]
    assert np.all(np.diff(ll)[pairs] >= -1e-8 * np.abs(ll[:-1][pairs]))
    assert trace.converged


def test_em_reseeds_collapsed_component(rng):
    # Duplicate points give a degenerate cluster; the fit must stay valid.
    X = np.vstack([np.zeros((30, 2)), rng.normal(size=(3, 2)) + 5])
    comps = fit_gmm_em(X, 4, seed=0)
    assert len(comps) == 4
    for c in comps:
        assert np.linalg.eigvalsh(c.covariance)[0] > 0


def test_em_is_deterministic(rng):
    X = two_blobs(rng)
    assert fit_gmm_em(X, 3, seed=5) == fit_gmm_em(X, 3, seed=5)


def test_em_rejects_bad_k(rng):
    with pytest.raises(ValidationError):
        fit_gmm_em(rng.normal(size=(3, 2)), 4)
    with pytest.raises(ValidationError):
        fit_gmm_em(rng.normal(size=(3, 2)), 0)


def test_fold_labels_balanced():
    labels = fold_labels(23, 5, seed=0)
    assert sorted(np.bincount(labels)) == [4, 4, 5, 5, 5]
    assert np.array_equal(labels, fold_labels(23, 5, seed=0))


def test_cvic_score_is_sum_of_folds(rng):
    X = two_blobs(rng, n=100)
    assert cvic_score(X, 2, seed=3) == pytest.approx(cvic_fold_scores(X, 2, seed=3).sum())


def test_cvic_needs_enough_points(rng):
    with pytest.raises(ValidationError):
        cvic_fold_scores(rng.normal(size=(3, 2)), 1, folds=5)


def test_choose_count_hand_example():
    # |-90 - (-88.5)| = 1.5 <= 0.05 * |-88.5| = 4.425, while K=1 misses by 11.5
    assert choose_count([-100.0, -90.0, -89.0, -88.5], (1, 2, 3, 4), 0.05) == 2


def test_choose_count_threshold_rule():
    scores = [-120.0, -100.5, -100.0, -99.9]
    assert choose_count(scores, (1, 2, 3, 4), 0.0) == 4
    assert choose_count(scores, (1, 2, 3, 4), 0.002) == 3
    assert choose_count(scores, (1, 2, 3, 4), 0.01) == 2
    assert choose_count(scores, (1, 2, 3, 4), 0.5) == 1


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=6, unique=True))
def test_zero_threshold_is_argmax(scores):
    cands = tuple(range(1, len(scores) + 1))
    assert choose_count(scores, cands, 0.0) == cands[int(np.argmax(scores))]


def test_modal_tuple_tie_break():
    assert modal_tuple([(2, 1), (1, 2), (2, 1), (1, 2), (3, 3)]) == (1, 2)
    assert modal_tuple([(3,), (2,), (3,)]) == (3,)


@pytest.mark.parametrize(
    "kwargs", [{"folds": 1}, {"candidates": (2, 1)}, {"candidates": (0, 1)}, {"threshold": 1.0}, {"repeats": 0}]
)
def test_cvic_config_validation(kwargs):
    with pytest.raises(ValidationError):
        CvicConfig(**kwargs)


def test_select_components_small(rng):
    blocks = [two_blobs(rng, n=60, d=2), rng.normal(size=(40, 2))]
    cfg = CvicConfig(candidates=(1, 2), repeats=2, seed=4)
    res = select_components(blocks, cfg, ("ab", "c"))
    assert res.chosen[0] == 2
    assert len(res.scores) == 2 and len(res.scores[0]) == 2
    assert res.to_json()["chosen"] == list(res.chosen)
    threaded = select_components(blocks, cfg, ("ab", "c"), threads=3)
    assert threaded.scores == res.scores


def test_select_components_too_large_candidate_scores_minus_inf(rng):
    res = select_components([rng.normal(size=(6, 2))], CvicConfig(candidates=(1, 5), repeats=1))
    assert res.scores[0][0][1] == -np.inf
    assert res.chosen == (1,)


def test_select_components_too_few_spectra(rng):
    with pytest.raises(ValidationError, match="fewer than"):
        select_components([rng.normal(size=(3, 2))], CvicConfig())


def test_fit_bundle(rng):
    lib = SpectralLibrary(("a", "b"), (two_blobs(rng, n=80, d=3), rng.normal(size=(30, 3))))
    bundle = fit_bundle(lib, ProjectionModel.identity(3), (2, 1), seed=0)
    assert bundle.component_counts == (2, 1)
    assert bundle == fit_bundle(lib, ProjectionModel.identity(3), (2, 1), seed=0, threads=2)
    with pytest.raises(ValidationError):
        fit_bundle(lib, ProjectionModel.identity(3), (1,))


def test_cvic_is_deterministic(rng):
    blocks = [two_blobs(rng, n=50, d=2)]
    cfg = CvicConfig(candidates=(1, 2), repeats=2, seed=1)
    assert select_components(blocks, cfg).scores == select_components(blocks, cfg).scores


def test_fit_bundle_single_class_closed_form(rng):
    X = rng.normal(size=(40, 3))
    lib = SpectralLibrary(("a",), (X,))
    (comp,) = fit_bundle(lib, ProjectionModel.identity(3), (1,)).per_class[0]
    assert comp == fit_gmm_em(X, 1)[0]


def test_fit_bundle_combination_count(rng):
    from math import prod

    from unmix_gmm.unmix import enumerate_combinations

    lib = SpectralLibrary(("a", "b", "c"), tuple(two_blobs(rng, n=60, d=2) for _ in range(3)))
    bundle = fit_bundle(lib, ProjectionModel.identity(2), (2, 1, 3), seed=0)
    assert len(enumerate_combinations(bundle)) == prod(bundle.component_counts) == 6
    for comps in bundle.per_class:
        assert sum(c.weight for c in comps) == pytest.approx(1.0, abs=1e-10)
