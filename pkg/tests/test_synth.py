import numpy as np
import pytest

from unmix_gmm.core import PixelBlock, SpectralLibrary, ValidationError
from unmix_gmm.synth import (
    REDUCED_COUNTS_4M,
    SynthSpec,
    bimodal_library,
    dirichlet_abundances,
    draw_picks,
    fcls,
    generate,
    keep_top,
    make_template,
    mix_pixels,
    sample_endmember_sets,
)


@pytest.fixture(scope="module")
def lib():
    return bimodal_library(n_classes=3, per_class=40, bands=20, seed=1)


def test_reduced_counts():
    assert sum(REDUCED_COUNTS_4M) == 95


def test_bimodal_library_shape_and_range(lib):
    assert lib.counts == (40, 40, 40)
    assert lib.band_count == 20
    X = np.vstack(lib.spectra)
    assert X.min() >= 0 and X.max() <= 1
    assert bimodal_library(n_classes=3, per_class=40, bands=20, seed=1) == lib


def test_fcls_recovers_exact_mixture(rng):
    E = rng.uniform(0, 1, (4, 30))
    A = rng.dirichlet(np.ones(4), size=10)
    np.testing.assert_allclose(fcls(A @ E, E), A, atol=1e-6)


def test_fcls_is_feasible(rng):
    E = rng.uniform(0, 1, (3, 10))
    X = fcls(rng.uniform(0, 1, (5, 10)), E)
    assert np.all(X >= 0)
    np.testing.assert_allclose(X.sum(axis=1), 1.0, atol=1e-15)


def test_keep_top():
    A = np.array([[0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25]])
    out = keep_top(A, 2)
    np.testing.assert_allclose(out[0], [0, 0, 3 / 7, 4 / 7])
    assert np.count_nonzero(out[1]) == 2
    np.testing.assert_allclose(keep_top(A, 4), A)


def test_sample_sets(lib):
    sets = sample_endmember_sets(lib, (3, 5, 1), 0)
    assert [len(s) for s in sets] == [3, 5, 1]
    assert all(len(set(s)) == len(s) and list(s) == sorted(s) for s in sets)
    with pytest.raises(ValidationError):
        sample_endmember_sets(lib, (41, 1, 1), 0)


def test_mix_pixels_linear_model(rng):
    sets = [rng.random((3, 5)), rng.random((2, 5))]
    A = rng.dirichlet(np.ones(2), size=4)
    picks = draw_picks([3, 2], 4, rng)
    Y = mix_pixels(A, sets, picks).pixels
    expected = A[:, :1] * sets[0][picks[:, 0]] + A[:, 1:] * sets[1][picks[:, 1]]
    np.testing.assert_allclose(Y, expected)
    with pytest.raises(ValidationError):
        mix_pixels(A, sets, picks, noise_sd=0.1)


def test_dirichlet_sparsity(rng):
    A = dirichlet_abundances(100, 5, 0.5, 2, rng)
    assert np.all(np.count_nonzero(A, axis=1) <= 2)
    np.testing.assert_allclose(A.sum(axis=1), 1.0)


def test_template_scene(lib):
    template = make_template(lib, 12, 10, seed=4)
    assert template.shape == (12, 10)
    spec = SynthSpec(counts=(2, 3, 2), rows=12, cols=10, seed=9)
    scene = generate(spec, lib, template)
    assert scene.pixels.shape == (12, 10)
    assert np.all(np.count_nonzero(scene.truth.values, axis=1) <= 3)
    E = scene.endmembers(lib)
    recon = sum(scene.truth.values[:, j, None] * E[j][scene.picks[:, j]] for j in range(3))
    np.testing.assert_allclose(scene.pixels.pixels, recon)


def test_generate_is_reproducible(lib):
    spec = SynthSpec(counts=(2, 2, 2), source="dirichlet", rows=5, cols=6, noise_sd=0.01, seed=3)
    a, b = generate(spec, lib), generate(spec, lib)
    assert a.pixels == b.pixels and a.truth == b.truth
    assert a.pixels != generate(SynthSpec(**{**spec.to_json(), "counts": (2, 2, 2), "seed": 4}), lib).pixels


def test_template_required(lib):
    with pytest.raises(ValidationError, match="template"):
        generate(SynthSpec(counts=(1, 1, 1)), lib)


def test_spec_json_round_trip():
    spec = SynthSpec(counts=(1, 2), source="dirichlet", concentration=0.3, seed=5)
    assert SynthSpec.from_json(spec.to_json()) == spec


@pytest.mark.parametrize(
    "kwargs", [{"counts": ()}, {"counts": (0,)}, {"counts": (1,), "source": "x"}, {"counts": (1,), "noise_sd": -1}]
)
def test_spec_validation(kwargs):
    with pytest.raises(ValidationError):
        SynthSpec(**kwargs)


def test_template_band_mismatch(lib):
    bad = PixelBlock(np.zeros((4, 3)), (2, 2))
    small = SpectralLibrary(lib.names, tuple(b[:, :3] for b in lib.spectra))
    assert make_template(small, 2, 2, 0).band_count == 3
    with pytest.raises(ValidationError, match="bands"):
        generate(SynthSpec(counts=(1, 1, 1), rows=2, cols=2), lib, bad)


def test_full_count_returns_whole_class(lib):
    sets = sample_endmember_sets(lib, (40, 2, 40), 0)
    np.testing.assert_array_equal(sets[0], np.arange(40))
    np.testing.assert_array_equal(sets[2], np.arange(40))


def test_fcls_pixel_equal_to_sampled_spectrum(lib):
    sets = sample_endmember_sets(lib, (3, 3, 3), 2)
    stack = np.vstack([lib.spectra[j][idx] for j, idx in enumerate(sets)])
    coef = fcls(stack[4], stack)[0]
    # the 5th row belongs to class 1
    assert coef[3:6].sum() == pytest.approx(1.0, abs=1e-6)


def test_pure_noiseless_pixels_are_the_picked_spectra(rng):
    sets = [rng.random((3, 6)), rng.random((4, 6))]
    picks = draw_picks([3, 4], 8, rng)
    A = np.tile([0.0, 1.0], (8, 1))
    np.testing.assert_array_equal(mix_pixels(A, sets, picks).pixels, sets[1][picks[:, 1]])


def test_mixture_mean_converges(rng):
    sets = [rng.random((5, 4)), rng.random((3, 4))]
    A = np.tile([0.3, 0.7], (10_000, 1))
    Y = mix_pixels(A, sets, draw_picks([5, 3], 10_000, rng)).pixels
    expected = 0.3 * sets[0].mean(axis=0) + 0.7 * sets[1].mean(axis=0)
    se = Y.std(axis=0) / np.sqrt(len(Y))
    assert np.all(np.abs(Y.mean(axis=0) - expected) <= 3 * se)


def test_small_concentration_gives_near_pure_pixels(rng):
    assert dirichlet_abundances(4000, 2, 0.05, 3, rng).max(axis=1).mean() >= 0.95
    # with more classes the gap to a vertex grows roughly like (M - 1) * concentration
    means = [dirichlet_abundances(4000, 4, c, 3, rng).max(axis=1).mean() for c in (0.5, 0.05, 0.005)]
    assert means[0] < means[1] < means[2] and means[2] >= 0.98
