import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.integrate import trapezoid

from c2far.binning import build_spec, discretize, interval_of, paths_to_leaf
from c2far.distribution import (
    StepDensity,
    cdf,
    cdf_grid,
    leaf_probabilities,
    log_prob,
    pdf_grid,
    sample,
    sample_n,
)
from c2far.exceptions import ConfigurationError, InputError


def random_provider(levels, seed):
    """Prefix-dependent conditionals drawn once per prefix from a Dirichlet."""
    cache = {}

    def provider(prefix):
        prefix = tuple(prefix)
        if prefix not in cache:
            rng = np.random.default_rng([seed, len(prefix)] + [z + 1 for z in prefix])
            cache[prefix] = rng.dirichlet(np.ones(levels[len(prefix)]))
        return cache[prefix]

    return provider


def uniform_provider(levels):
    return StepDensity([np.full(k, 1.0 / k) for k in levels], 1.0, 1.0)


def test_uniform_leaf_density():
    spec = build_spec([4], -1.0, 1.0)
    d = uniform_provider([4])
    # leaf [0, 0.5) has probability 1/4 and width 1/2
    assert math.exp(log_prob(spec, d, d.tails, 0.25)) == pytest.approx(0.5, rel=1e-12)


def test_top_tail_density_matches_scipy_pareto():
    spec = build_spec([4], -1.0, 1.0)
    p = np.array([0.1, 0.2, 0.3, 0.4])
    for alpha in (0.5, 1.0, 3.0):
        d = StepDensity([p], alpha, 2.0)
        for x in (0.5, 0.9, 2.02, 40.0):
            # top leaf edge 0.5; shifted coordinate y = x - 0.5 + extent_hi
            want = 0.4 * stats.pareto(b=alpha, scale=1.0).pdf(x - 0.5 + 1.0)
            assert math.exp(log_prob(spec, d, d.tails, x)) == pytest.approx(want, rel=1e-10)


def test_bottom_tail_density_matches_scipy_pareto():
    spec = build_spec([4], -0.5, 1.5)
    p = np.array([0.25, 0.25, 0.25, 0.25])
    d = StepDensity([p], 1.0, 1.7)
    edge = 0.0  # first interior edge
    for x in (-0.01, -0.5, -3.0):
        want = 0.25 * stats.pareto(b=1.7, scale=0.5).pdf(edge - x + 0.5)
        assert math.exp(log_prob(spec, d, d.tails, x)) == pytest.approx(want, rel=1e-10)


def test_tail_median_and_cdf_at_edge():
    spec = build_spec([4], -1.0, 1.0)
    p = np.array([0.1, 0.2, 0.3, 0.4])
    d = StepDensity([p], 2.0, 2.0)
    # cdf at the top leaf's finite edge is the mass below the top leaf
    assert cdf(spec, d, d.tails, 0.5) == pytest.approx(0.6, abs=1e-12)
    # conditional median of Pareto(scale 1, shape 2) is sqrt(2) in the shifted coordinate
    x_med = 0.5 - 1.0 + math.sqrt(2.0)
    assert cdf(spec, d, d.tails, x_med) == pytest.approx(0.6 + 0.4 * 0.5, abs=1e-12)


def test_tails_need_signed_extent():
    spec = build_spec([4], 0.0, 1.0, require_tails=False)
    d = uniform_provider([4])
    with pytest.raises(ConfigurationError):
        log_prob(spec, d, d.tails, 0.3)


def test_zero_probability_path_is_minus_inf():
    spec = build_spec([2, 2], -1.0, 1.0)
    d = StepDensity([np.array([1.0, 0.0]), np.array([0.5, 0.5])], 1.0, 1.0)
    assert log_prob(spec, d, d.tails, 0.7) == -math.inf


def test_step_density_validation():
    with pytest.raises(InputError):
        StepDensity([np.array([0.5, 0.6])], 1.0, 1.0)
    with pytest.raises(InputError):
        StepDensity([np.array([0.5, 0.5])], 0.0, 1.0)
    with pytest.raises(InputError):
        StepDensity([np.array([1.5, -0.5])], 1.0, 1.0)


@pytest.mark.parametrize("levels", [[5], [3, 4], [2, 3, 2]])
def test_log_prob_matches_enumeration(levels):
    spec = build_spec(levels, -0.2, 1.3)
    prov = random_provider(levels, 11)
    probs = leaf_probabilities(spec, prov)
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    rng = np.random.default_rng(0)
    for x in rng.uniform(-1, 3, 40):
        path = discretize(spec, float(x))
        leaf = int(paths_to_leaf(spec, path))
        iv = interval_of(spec, path)
        if iv.hi_open_ended:
            dens = stats.pareto(b=0.8, scale=1.3).pdf(x - iv.lo + 1.3)
        elif iv.lo_open_ended:
            dens = stats.pareto(b=1.9, scale=0.2).pdf(iv.hi - x + 0.2)
        else:
            dens = 1.0 / iv.width
        want = math.log(probs[leaf] * dens)
        assert log_prob(spec, prov, (0.8, 1.9), float(x)) == pytest.approx(want, rel=1e-9, abs=1e-12)


def _total_mass(spec, prov, tails, n_per_leaf=64, far=1e4):
    """Integrate the pdf over the finite leaves on a grid and add the tails analytically.

    Inside the extent the density is piecewise constant, so a midpoint rule per
    leaf is exact up to rounding; each tail is integrated numerically out to
    ``far`` and the remaining survival mass is added in closed form.
    """
    edges = spec.leaf_edges
    total = 0.0
    for a, b in zip(edges[1:-2], edges[2:-1]):
        mids = a + (np.arange(n_per_leaf) + 0.5) * (b - a) / n_per_leaf
        total += pdf_grid(spec, prov, tails, mids).sum() * (b - a) / n_per_leaf
    probs = leaf_probabilities(spec, prov)
    s_hi, s_lo = spec.extent_hi, -spec.extent_lo
    a_hi, a_lo = tails
    # top tail: numeric on a log grid, then the analytic remainder beyond `far`
    top_edge = edges[-2]
    x = top_edge + np.concatenate([[0.0], np.geomspace(1e-9, far, 4000)])
    total += trapezoid(pdf_grid(spec, prov, tails, x), x)
    total += probs[-1] * (s_hi / (far + s_hi)) ** a_hi
    bot_edge = edges[1]
    x = bot_edge - np.concatenate([[0.0], np.geomspace(1e-9, far, 4000)])[::-1]
    x = np.nextafter(x, -np.inf)
    total += trapezoid(pdf_grid(spec, prov, tails, x), x)
    total += probs[0] * (s_lo / (far + s_lo)) ** a_lo
    return total


@pytest.mark.parametrize("levels, tails", [([8], (2.0, 3.0)), ([4, 5], (1.5, 2.5)), ([3, 3, 3], (4.0, 1.2))])
def test_density_normalizes(levels, tails):
    spec = build_spec(levels, -0.05, 1.05)
    prov = random_provider(levels, 5)
    assert _total_mass(spec, prov, tails) == pytest.approx(1.0, abs=1e-3)


def test_cdf_monotone_and_limits():
    spec = build_spec([4, 3], -0.1, 1.1)
    prov = random_provider([4, 3], 2)
    xs = np.linspace(-5, 6, 801)
    c = cdf_grid(spec, prov, (1.3, 2.2), xs)
    assert np.all(np.diff(c) >= -1e-15)
    assert cdf(spec, prov, (1.3, 2.2), -math.inf) == 0.0
    assert cdf(spec, prov, (1.3, 2.2), math.inf) == 1.0
    assert c[0] < 0.05 and c[-1] > 0.95


def test_cdf_is_integral_of_pdf():
    spec = build_spec([4, 3], -0.1, 1.1)
    prov = random_provider([4, 3], 8)
    tails = (2.0, 2.0)
    xs = np.linspace(0.05, 0.95, 20001)
    integral = trapezoid(pdf_grid(spec, prov, tails, xs), xs)
    diff = cdf(spec, prov, tails, 0.95) - cdf(spec, prov, tails, 0.05)
    assert integral == pytest.approx(diff, abs=1e-3)


def test_spike_bounded_by_finest_finite_bin():
    spec = build_spec([10, 10], -0.01, 1.01)
    # all mass on a single interior leaf
    p1 = np.zeros(10)
    p1[4] = 1.0
    p2 = np.zeros(10)
    p2[7] = 1.0
    d = StepDensity([p1, p2], 1.0, 1.0)
    xs = np.linspace(0.0, 1.0, 100001)
    peak = pdf_grid(spec, d, d.tails, xs).max()
    assert peak == pytest.approx(1.0 / spec.min_finite_width, rel=1e-9)


def _total_variation(spec, prov, tails, values, cuts):
    counts = np.histogram(values, bins=np.concatenate([[-np.inf], cuts, [np.inf]]))[0] / len(values)
    c = np.concatenate([[0.0], cdf_grid(spec, prov, tails, cuts), [1.0]])
    return 0.5 * np.abs(counts - np.diff(c)).sum()


@pytest.mark.parametrize("levels", [[12], [4, 4], [3, 2, 3]])
def test_sampling_matches_pdf(levels):
    spec = build_spec(levels, -0.1, 1.1)
    prov = random_provider(levels, 21)
    tails = (1.5, 2.5)
    _, values = sample_n(spec, prov, tails, np.random.default_rng(0), 100_000)
    edges = spec.leaf_edges
    inner = np.unique(np.concatenate([np.linspace(a, b, 5) for a, b in zip(edges[1:-2], edges[2:-1])]))
    cuts = np.concatenate([edges[1] - np.array([3.0, 1.0, 0.3, 0.1]), inner, edges[-2] + np.array([0.1, 0.3, 1.0, 3.0])])
    assert _total_variation(spec, prov, tails, values, np.sort(cuts)) <= 0.02


def test_sample_single_path_consistent():
    spec = build_spec([3, 3], -0.1, 1.1)
    prov = random_provider([3, 3], 4)
    rng = np.random.default_rng(1)
    for _ in range(200):
        path, value = sample(spec, prov, (2.0, 2.0), rng)
        iv = interval_of(spec, path)
        assert (iv.lo <= value < iv.hi) or (iv.hi_open_ended and value >= iv.lo)


def test_sampling_reproducible():
    spec = build_spec([5, 5], -0.1, 1.1)
    prov = random_provider([5, 5], 4)
    a = sample_n(spec, prov, (2.0, 2.0), np.random.default_rng(9), 1000)[1]
    b = sample_n(spec, prov, (2.0, 2.0), np.random.default_rng(9), 1000)[1]
    assert np.array_equal(a, b)


def test_pdf_grid_rejects_unsorted():
    spec = build_spec([4], -1, 1)
    d = uniform_provider([4])
    with pytest.raises(InputError):
        pdf_grid(spec, d, d.tails, [0.2, 0.1])


@settings(max_examples=40, deadline=None)
@given(
    x=st.floats(-50, 50, allow_nan=False),
    a_hi=st.floats(0.2, 8.0),
    a_lo=st.floats(0.2, 8.0),
)
def test_log_prob_finite_for_positive_probs(x, a_hi, a_lo):
    spec = build_spec([3, 4], -0.3, 1.4)
    prov = random_provider([3, 4], 1)
    assert math.isfinite(log_prob(spec, prov, (a_hi, a_lo), x))
