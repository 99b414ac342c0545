import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from c2far.exceptions import InputError, MetricError
from c2far.metrics import MetricReport, coverage_sharpness, evaluate_grids, nd, pinball, quantile_loss, wql
from c2far.windows import QUANTILES, ForecastGrid


def lambda_by_hand(alpha, q, z):
    return alpha * (z - q) if z >= q else (1 - alpha) * (q - z)


def test_pinball_examples():
    assert pinball(0.9, 5, 10) == pytest.approx(4.5)
    assert pinball(0.9, 5, 3) == pytest.approx(0.2)
    for a in (0.1, 0.5, 0.9):
        assert pinball(a, 2.5, 2.5) == 0.0


def test_nd_example():
    assert nd([1, 1, 1], [1, 2, 3]) == 0.5
    assert nd([1, 2, 3], [1, 2, 3]) == 0.0


def test_quantile_loss_single_point_is_absolute_percentage():
    assert quantile_loss(0.5, [7.0], [5.0]) == pytest.approx(2.0 / 5.0)


def test_zero_denominator():
    with pytest.raises(MetricError):
        nd([1.0], [0.0])
    with pytest.raises(MetricError):
        quantile_loss(0.5, [1.0, 2.0], [0.0, 0.0])


def test_length_mismatch():
    with pytest.raises(InputError):
        nd([1.0, 2.0], [1.0])


def test_wql_equals_nd_for_point_forecasts():
    rng = np.random.default_rng(0)
    z = rng.normal(5, 2, 300)
    f = rng.normal(5, 2, 300)
    grid = {q: f for q in QUANTILES}
    assert abs(wql(grid, z) - nd(f, z)) <= 1e-12


def test_wql_from_pinball_primitives():
    rng = np.random.default_rng(1)
    z = rng.gamma(2.0, 3.0, 200)
    grid = {q: np.quantile(z, q) + rng.normal(0, 0.5, 200) for q in QUANTILES}
    by_hand = np.mean(
        [2 * sum(lambda_by_hand(q, f, t) for f, t in zip(grid[q], z)) / np.abs(z).sum() for q in QUANTILES]
    )
    assert abs(wql(grid, z) - by_hand) <= 1e-12


def test_wql_missing_quantile():
    with pytest.raises(InputError):
        wql({0.5: np.ones(3)}, np.ones(3))


def test_coverage_examples():
    z = np.array([1.0, 2.0, 3.0])
    inside = {0.1: z - 0.5, 0.9: z + 0.5}
    assert coverage_sharpness(inside, z, 0.1, 0.9) == (1.0, pytest.approx(3.0 / 6.0))
    # zero-width bands at the truth: strict lower inequality excludes it
    cov, sharp = coverage_sharpness({0.1: z, 0.9: z}, z, 0.1, 0.9)
    assert cov == 0.0 and sharp == 0.0
    # upper bound is inclusive
    assert coverage_sharpness({0.1: z - 1, 0.9: z}, z, 0.1, 0.9)[0] == 1.0
    with pytest.raises(InputError):
        coverage_sharpness(inside, z, 0.05, 0.9)
    with pytest.raises(InputError):
        coverage_sharpness(inside, z, 0.9, 0.1)


def test_constant_band_sharpness():
    z = np.array([2.0, -3.0, 4.0, 1.0])
    w = 0.7
    _, sharp = coverage_sharpness({0.1: z - w / 2, 0.9: z + w / 2}, z, 0.1, 0.9)
    assert sharp == pytest.approx(len(z) * w / np.abs(z).sum())


def test_scale_invariance():
    rng = np.random.default_rng(3)
    z = rng.uniform(1, 5, 50)
    f = rng.uniform(1, 5, 50)
    assert quantile_loss(0.3, 7 * f, 7 * z) == pytest.approx(quantile_loss(0.3, f, z), rel=1e-12)
    assert nd(7 * f, 7 * z) == pytest.approx(nd(f, z), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    data=st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=1, max_size=30),
    seed=st.integers(0, 1000),
)
def test_metrics_invariant_to_point_order(data, seed):
    f = np.array([d[0] for d in data])
    z = np.array([d[1] for d in data])
    if np.abs(z).sum() == 0:
        return
    perm = np.random.default_rng(seed).permutation(len(z))
    assert nd(f[perm], z[perm]) == pytest.approx(nd(f, z), rel=1e-12, abs=1e-15)
    assert quantile_loss(0.5, f, z) == pytest.approx(nd(f, z), rel=1e-12, abs=1e-15)
    cov, sharp = coverage_sharpness({0.1: f - 1, 0.9: f + 1}, z, 0.1, 0.9)
    assert 0.0 <= cov <= 1.0 and sharp >= 0.0


def test_evaluate_grids_pools_and_masks():
    g1 = ForecastGrid.point(np.array([1.0, 1.0, 1.0]))
    g2 = ForecastGrid.point(np.array([2.0, 2.0, 2.0]))
    t1 = np.array([1.0, 2.0, 3.0])
    t2 = np.array([np.nan, 2.0, 4.0])
    rep = evaluate_grids([g1, g2], [t1, t2])
    # pooled points: (1,1) (1,2) (1,3) (2,2) (2,4)
    assert rep.nd == pytest.approx((0 + 1 + 2 + 0 + 2) / 12)
    assert rep.n_points == 5
    assert rep.wql == pytest.approx(rep.nd, abs=1e-12)
    assert rep.nd_by_horizon[0] == 0.0
    assert rep.nd_by_horizon[1] == pytest.approx(1 / 4)
    assert rep.nd_by_horizon[2] == pytest.approx(4 / 7)


def test_report_csv_and_wql_invariant():
    rng = np.random.default_rng(0)
    samples = rng.normal(10, 1, (200, 4))
    grid = ForecastGrid.from_samples(samples, sorted(QUANTILES + (0.005, 0.995)))
    rep = evaluate_grids([grid], [rng.normal(10, 1, 4)])
    assert abs(rep.wql - np.mean(list(rep.ql.values()))) <= 1e-12
    assert set(rep.coverage) == {"80", "99"}
    lines = rep.to_csv().splitlines()
    assert lines[0] == "metric,scope,horizon,value"
    assert "nd,horizon,4," in "\n".join(lines)
    assert isinstance(rep, MetricReport)


def test_grid_quantiles_monotone():
    samples = np.random.default_rng(0).standard_cauchy((25, 6))
    g = ForecastGrid.from_samples(samples)
    assert np.all(np.diff(g.values, axis=1) >= 0)
    with pytest.raises(InputError):
        g.quantile(0.25)


def _normalized_windows(pred, seed=0):
    from c2far.windows import SeriesWindow

    rng = np.random.default_rng(seed)
    out = []
    for i, p in enumerate(pred):
        cond = np.concatenate([[0.0, 1.0], rng.uniform(0, 1, 6)])
        cov = rng.uniform(0, 1, (len(cond) + len(p), 2))
        out.append(SeriesWindow("s", i, 0, cond, np.asarray(p), cov, normalized=True))
    return out


def test_nll_eval_uniform_density():
    import torch

    from c2far.metrics import nll_eval
    from c2far.model import C2farConfig, C2farRnn

    model = C2farRnn(C2farConfig((4, 4), n_hidden=6))
    with torch.no_grad():
        for head in model.heads:
            head.weight.zero_()
            head.bias.zero_()
    pred = np.random.default_rng(1).uniform(0.1, 0.9, (20, 5))
    # uniform leaves of width 1.02/16 each with mass 1/16: density 1/1.02
    assert nll_eval(model, _normalized_windows(pred)) == pytest.approx(np.log(1.02), abs=1e-5)


def test_nll_eval_gaussian_entropy():
    import torch

    from c2far.metrics import nll_eval
    from c2far.model import GaussianConfig, GaussianRnn

    mu, sigma = 0.4, 0.2
    model = GaussianRnn(GaussianConfig(n_hidden=6))
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.copy_(torch.tensor([mu, np.log(np.expm1(sigma))]))
    pred = np.random.default_rng(2).normal(mu, sigma, (400, 50))
    entropy = 0.5 * np.log(2 * np.pi * np.e * sigma**2)
    # standard error of the mean NLL is sqrt(0.5 / 20000) ~ 0.005
    assert nll_eval(model, _normalized_windows(pred)) == pytest.approx(entropy, abs=0.02)
