import math

import numpy as np
import pytest
import torch
from scipy import stats

from c2far.binning import leaf_index, paths_to_leaf
from c2far.distribution import log_prob, sample_in_leaf
from c2far.exceptions import ConfigurationError, InputError
from c2far.model import (
    PARAMETER_BUDGET,
    C2farConfig,
    C2farRnn,
    GaussianConfig,
    GaussianRnn,
    assemble_level_input,
    build_model,
    count_parameters,
    per_step_macs,
)
from c2far.nn import count_trainable


def tiny(levels=(3, 4), h=5, dtype=torch.float64, seed=0):
    torch.manual_seed(seed)
    model = C2farRnn(C2farConfig(levels, -0.1, 1.1, n_hidden=h, lstm_dropout=0.0))
    return model.to(dtype).eval()


def series_batch(batch, length, seed=0):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(-0.05, 1.05, (batch, length))
    cov = rng.uniform(0, 1, (batch, length, 2))
    return vals, cov


@pytest.mark.parametrize(
    "config",
    [
        C2farConfig((40,), n_hidden=64),
        C2farConfig((12, 35), n_hidden=100),
        C2farConfig((8, 8, 8), n_hidden=17),
        GaussianConfig(n_hidden=64),
        GaussianConfig(n_hidden=288, covariate_dim=5),
    ],
)
def test_parameter_count_formula(config):
    model = build_model("gaussian" if isinstance(config, GaussianConfig) else "c2far", config)
    assert count_trainable(model) == count_parameters(config)


def test_parameter_count_by_hand():
    # levels (2,), H=1, C=0: input width 2 + 0 + 0 + 1 = 3
    cfg = C2farConfig((2,), n_hidden=1, covariate_dim=0)
    lstm = 4 * (1 * 3 + 1 + 1) + 4 * (1 + 1 + 1)
    head = 1 * 2 + 2
    pareto = (1 + 1) + (2 + 2)
    assert count_parameters(cfg) == lstm + head + pareto


def test_budget_constant():
    assert PARAMETER_BUDGET == 1_000_000


def test_config_validation():
    with pytest.raises(ConfigurationError):
        C2farConfig((20, 20), extent_lo=0.0).spec
    with pytest.raises(ConfigurationError):
        C2farConfig((20,), n_hidden=0)
    with pytest.raises(ConfigurationError):
        build_model("ets", GaussianConfig())


def test_input_width():
    assert C2farConfig((12, 35), covariate_dim=2).input_dim == 12 + 35 + 12 + 2 + 1
    assert C2farConfig((8, 8, 8), covariate_dim=2).input_dim == 24 + 16 + 3


def test_assemble_level_input_matches_batched_features():
    model = tiny((3, 4, 2))
    prev = torch.tensor([[2, 1, 0]])
    cur = torch.tensor([[1, 3, 1]])
    cov = torch.tensor([[0.25, 0.5]], dtype=torch.float64)
    prev_v = torch.tensor([0.7], dtype=torch.float64)
    batched = model._level_inputs(prev, cur, cov, prev_v)
    for level in (1, 2, 3):
        ref = assemble_level_input((3, 4, 2), level, (2, 1, 0), (1, 3, 1)[: level - 1], [0.25, 0.5], 0.7)
        assert np.array_equal(batched[level - 1][0].numpy(), ref)
    ref = assemble_level_input((3, 4, 2), 2, (2, 1, 0), (1,), [0.25, 0.5], 0.7)
    # prev one-hots, then the level-1 index, zero padding for level 2, covariates, value
    expected = np.concatenate([[0, 0, 1], [0, 1, 0, 0], [1, 0], [0, 1, 0], [0, 0, 0, 0], [0.25, 0.5], [0.7]])
    assert np.array_equal(ref, expected)
    with pytest.raises(InputError):
        assemble_level_input((3, 4), 3, (0, 0), (0, 0), [0, 0], 0.0)


@pytest.mark.parametrize("target", [0.431, 1.37, -0.26, 0.0, 1.1])
def test_teacher_forced_nll_matches_distribution_log_prob(target):
    """Two routes to the same number: the batched training loss and the generic chain rule."""
    model = tiny((3, 4))
    vals, cov = series_batch(1, 9)
    vals[0, -1] = target
    with torch.no_grad():
        nll = model.point_nll(model.prepare(vals, cov), 8)[0, 0].item()
    provider, tails = model.next_step_conditionals(vals[0, :-1], cov[0])
    assert -nll == pytest.approx(log_prob(model.spec, provider, tails, target), rel=1e-10, abs=1e-10)


def test_nll_terms_shapes_and_sum():
    model = tiny((3, 4))
    vals, cov = series_batch(4, 12)
    info = model.prepare(vals, cov)
    with torch.no_grad():
        terms = model.nll_terms(info, 9)
        total = model.point_nll(info, 9)
    assert set(terms) == {"level_1", "level_2", "leaf"}
    assert all(t.shape == (4, 3) for t in terms.values())
    assert torch.allclose(total, sum(terms.values()))


def test_sample_step_is_inverse_cdf_of_conditionals():
    model = tiny((3, 4))
    vals, cov = series_batch(1, 9)
    provider, (a_hi, a_lo) = model.next_step_conditionals(vals[0, :-1], cov[0])
    rows = 400
    states, path, value = model.encode(np.repeat(vals[:, :-1], rows, 0), np.repeat(cov[:, :-1], rows, 0))
    noise = np.random.default_rng(2).random((rows, 3))
    cov_t = torch.as_tensor(np.repeat(cov[:, -1], rows, 0))
    with torch.no_grad():
        paths, values, _ = model.sample_step(states, path, value, cov_t, noise)
    for r in range(rows):
        p1 = provider(())
        z1 = int(np.searchsorted(np.cumsum(p1), noise[r, 0] * np.cumsum(p1)[-1], side="right"))
        p2 = provider((z1,))
        z2 = int(np.searchsorted(np.cumsum(p2), noise[r, 1] * np.cumsum(p2)[-1], side="right"))
        assert tuple(paths[r].tolist()) == (z1, z2)
        leaf = int(paths_to_leaf(model.spec, [z1, z2]))
        if leaf == 0 or leaf == model.spec.n_intervals - 1:
            want = sample_in_leaf(model.spec, [leaf], [noise[r, 2]], a_hi, a_lo)[0]
            assert values[r] == pytest.approx(want, rel=1e-9)
        assert leaf_index(model.spec, values[r]) == leaf


def test_sample_paths_deterministic_and_batch_invariant():
    model = tiny((3, 4), dtype=torch.float32)
    vals, cov = series_batch(3, 14)
    noise = np.random.default_rng(0).random((3, 5, 4, 3))
    a = model.sample_paths(vals[:, :10], cov, noise)
    b = model.sample_paths(vals[:, :10], cov, noise)
    assert np.array_equal(a, b)
    single = np.concatenate([model.sample_paths(vals[k : k + 1, :10], cov[k : k + 1], noise[k : k + 1]) for k in range(3)])
    assert np.allclose(a, single, rtol=1e-5, atol=1e-6)
    assert a.shape == (3, 5, 4) and np.all(np.isfinite(a))


def test_gaussian_nll_matches_scipy():
    torch.manual_seed(0)
    model = GaussianRnn(GaussianConfig(n_hidden=6)).double().eval()
    vals, cov = series_batch(2, 10)
    info = model.prepare(vals, cov)
    with torch.no_grad():
        nll = model.point_nll(info, 7)
        out, _ = model.lstm(model._inputs(info[0].T[:-1], info[1].transpose(0, 1)[1:]))
        mean, std = model.params_of(out[-3:])
    want = -stats.norm.logpdf(vals[:, -3:], mean.T.numpy(), std.T.numpy())
    assert np.allclose(nll.numpy(), want, rtol=1e-10)


def test_gaussian_sampling_uses_inverse_normal():
    torch.manual_seed(0)
    model = GaussianRnn(GaussianConfig(n_hidden=4)).double().eval()
    vals, cov = series_batch(1, 6)
    noise = np.full((1, 1, 1, 1), 0.5)
    state, value = model.encode(vals[:, :5], cov[:, :5])
    with torch.no_grad():
        out, _ = model.lstm(model._inputs(value, torch.as_tensor(cov[:, 5])).unsqueeze(0), state)
        mean, _ = model.params_of(out[0])
    assert model.sample_paths(vals[:, :5], cov, noise)[0, 0, 0] == pytest.approx(mean.item(), rel=1e-12)


def test_macs_flat_versus_hierarchical():
    k, h = 8, 32
    for b in (1, 2, 3):
        flat = per_step_macs(C2farConfig((k**b,), n_hidden=h))["output_projection"]
        deep = per_step_macs(C2farConfig((k,) * b, n_hidden=h))["output_projection"]
        assert flat == h * k**b
        assert deep == h * b * k


def test_extreme_tail_draws_stay_finite():
    model = tiny((3, 4))
    with torch.no_grad():
        model.pareto[2].bias.fill_(-40.0)  # softplus -> alpha ~ 4e-18
    vals, cov = series_batch(1, 8)
    noise = np.full((1, 2, 3, 3), 0.999999)
    out = model.sample_paths(vals[:, :5], cov, noise)
    assert np.all(np.isfinite(out))
    assert math.isfinite(float(np.quantile(out, 0.5)))
