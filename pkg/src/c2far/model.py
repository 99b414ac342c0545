"""Recurrent forecasters: the coarse-to-fine binned model and a Gaussian baseline.

Both models read normalized values.  At step ``t`` the coarse-to-fine model
runs one 2-layer LSTM per level; the level-``i`` input is

    [1-hot(z^1_{t-1}) .. 1-hot(z^B_{t-1})]      all previous-step indices
    [1-hot(z^1_t) .. 1-hot(z^{i-1}_t), 0 ...]   current coarser indices, zero-padded
    [x_t]                                       covariates
    [z_{t-1}]                                   previous normalized value

so every level shares one input width but has its own weights.  A small
feed-forward head on the deepest level's hidden state emits the two Pareto
tail shapes.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import ndtri
from torch import nn

from .binning import BinningSpec, build_spec, discretize_array, leaf_index, paths_to_leaf
from .distribution import sample_in_leaf
from .exceptions import ConfigurationError, InputError
from .nn import LstmStack, linear_param_count, lstm_stack_param_count

PARAMETER_BUDGET = 1_000_000


@dataclass
class C2farConfig:
    levels: tuple[int, ...]
    extent_lo: float = -0.01
    extent_hi: float = 1.01
    n_hidden: int = 64
    lstm_dropout: float = 1e-3
    covariate_dim: int = 2

    def __post_init__(self):
        self.levels = tuple(int(k) for k in self.levels)
        if self.n_hidden < 1:
            raise ConfigurationError("n_hidden must be positive")
        if not 0.0 <= self.lstm_dropout < 1.0:
            raise ConfigurationError("lstm_dropout must be in [0, 1)")

    @property
    def spec(self) -> BinningSpec:
        return build_spec(self.levels, self.extent_lo, self.extent_hi)

    @property
    def input_dim(self) -> int:
        return sum(self.levels) + sum(self.levels[:-1]) + self.covariate_dim + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        return d


@dataclass
class GaussianConfig:
    n_hidden: int = 64
    lstm_dropout: float = 1e-3
    covariate_dim: int = 2

    @property
    def input_dim(self) -> int:
        return self.covariate_dim + 1

    def to_dict(self) -> dict:
        return asdict(self)


def count_parameters(config) -> int:
    """Exact trainable-parameter count for a model configuration."""
    h = config.n_hidden
    if isinstance(config, GaussianConfig):
        return lstm_stack_param_count(config.input_dim, h) + linear_param_count(h, 2)
    per_level = sum(lstm_stack_param_count(config.input_dim, h) + linear_param_count(h, k) for k in config.levels)
    pareto = linear_param_count(h, h) + linear_param_count(h, 2)
    return per_level + pareto


def per_step_macs(config: C2farConfig) -> dict[str, int]:
    """Multiply-accumulate counts for one forecast step, split by component."""
    h = config.n_hidden
    b = len(config.levels)
    lstm = b * (4 * h * (config.input_dim + h) + 4 * h * (2 * h))
    return {"lstm": lstm, "output_projection": h * sum(config.levels), "pareto_head": h * h + 2 * h}


def assemble_level_input(
    levels, level: int, prev_path, coarser, covariates, prev_value: float
) -> np.ndarray:
    """Feature vector for the level-``level`` (1-based) LSTM at one timestep."""
    levels = tuple(levels)
    b = len(levels)
    if not 1 <= level <= b:
        raise InputError(f"level {level} outside 1..{b}")
    if len(prev_path) != b or len(coarser) != level - 1:
        raise InputError("prev_path needs B indices and coarser needs level-1 indices")
    parts = []
    for k, z in zip(levels, prev_path):
        parts.append(_one_hot(k, z))
    for j in range(b - 1):
        parts.append(_one_hot(levels[j], coarser[j]) if j < level - 1 else np.zeros(levels[j]))
    parts.append(np.asarray(covariates, dtype=np.float64).reshape(-1))
    parts.append(np.array([prev_value], dtype=np.float64))
    return np.concatenate(parts)


def _one_hot(k: int, z: int) -> np.ndarray:
    if not 0 <= z < k:
        raise InputError(f"index {z} out of range for {k} bins")
    v = np.zeros(k)
    v[z] = 1.0
    return v


@dataclass
class TargetInfo:
    """Per-point quantities for the within-leaf term, precomputed in float64."""

    paths: torch.Tensor  # (batch, L, B) long
    values: torch.Tensor  # (batch, L) float
    covariates: torch.Tensor  # (batch, L, C)
    log_width: torch.Tensor  # (batch, L) log of finite-leaf width, 0 on extreme leaves
    top: torch.Tensor  # (batch, L) bool
    bot: torch.Tensor
    log_y: torch.Tensor  # log of the shifted tail coordinate (0 off-tail)


class C2farRnn(nn.Module):
    kind = "c2far"

    def __init__(self, config: C2farConfig):
        super().__init__()
        self.config = config
        self.spec = config.spec
        h = config.n_hidden
        self.lstms = nn.ModuleList(
            [LstmStack(config.input_dim, h, config.lstm_dropout) for _ in config.levels]
        )
        self.heads = nn.ModuleList([nn.Linear(h, k) for k in config.levels])
        self.pareto = nn.Sequential(nn.Linear(h, h), nn.Tanh(), nn.Linear(h, 2))
        self.log_s_hi = math.log(self.spec.extent_hi)
        self.log_s_lo = math.log(-self.spec.extent_lo)

    @property
    def n_levels(self) -> int:
        return len(self.config.levels)

    @property
    def n_noise(self) -> int:
        return self.n_levels + 1

    @property
    def dtype(self):
        return self.heads[0].weight.dtype

    # -- inputs ---------------------------------------------------------------

    def prepare(self, values: np.ndarray, covariates: np.ndarray) -> TargetInfo:
        """Discretize normalized ``values`` (batch, L) and precompute likelihood terms."""
        values = np.asarray(values, dtype=np.float64)
        spec = self.spec
        leaves = leaf_index(spec, values)
        edges = spec.leaf_edges
        n = spec.n_intervals
        top = leaves == n - 1
        bot = leaves == 0
        finite = ~(top | bot)
        log_width = np.zeros_like(values)
        log_width[finite] = np.log(edges[leaves[finite] + 1] - edges[leaves[finite]])
        log_y = np.zeros_like(values)
        log_y[top] = np.log(values[top] - edges[n - 1] + spec.extent_hi)
        log_y[bot] = np.log(edges[1] - values[bot] - spec.extent_lo)
        dt = self.dtype
        return TargetInfo(
            paths=torch.from_numpy(discretize_array(spec, values)),
            values=torch.as_tensor(values, dtype=dt),
            covariates=torch.as_tensor(np.asarray(covariates), dtype=dt),
            log_width=torch.as_tensor(log_width, dtype=dt),
            top=torch.from_numpy(top),
            bot=torch.from_numpy(bot),
            log_y=torch.as_tensor(log_y, dtype=dt),
        )

    def _level_inputs(self, prev_paths, cur_paths, covariates, prev_values) -> list[torch.Tensor]:
        """Level inputs for aligned (..., B) index tensors; returns one tensor per level."""
        levels = self.config.levels
        dt = self.dtype
        prev = [F.one_hot(prev_paths[..., j], k).to(dt) for j, k in enumerate(levels)]
        cur = [F.one_hot(cur_paths[..., j], levels[j]).to(dt) for j in range(len(levels) - 1)]
        tail = [covariates.to(dt), prev_values.to(dt).unsqueeze(-1)]
        out = []
        for i in range(len(levels)):
            coarse = [cur[j] if j < i else torch.zeros_like(cur[j]) for j in range(len(levels) - 1)]
            out.append(torch.cat(prev + coarse + tail, dim=-1))
        return out

    def alphas(self, hidden: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Pareto shapes (alpha_hi, alpha_lo) from the deepest level's hidden state."""
        a = F.softplus(self.pareto(hidden))
        return a[..., 0], a[..., 1]

    # -- teacher-forced likelihood ---------------------------------------------

    def nll_terms(self, info: TargetInfo, n_cond: int) -> dict[str, torch.Tensor]:
        """Per-point NLL components over the prediction range, each (batch, N)."""
        paths = info.paths.transpose(0, 1)  # (L, batch, B)
        vals = info.values.transpose(0, 1)
        cov = info.covariates.transpose(0, 1)
        inputs = self._level_inputs(paths[:-1], paths[1:], cov[1:], vals[:-1])
        n_pred = paths.shape[0] - n_cond
        terms = {}
        hidden = None
        for i, (lstm, head) in enumerate(zip(self.lstms, self.heads)):
            out, _ = lstm(inputs[i])
            out = out[-n_pred:]
            logits = head(out)
            target = paths[-n_pred:, :, i]
            logp = F.log_softmax(logits, dim=-1).gather(-1, target.unsqueeze(-1)).squeeze(-1)
            terms[f"level_{i + 1}"] = -logp.transpose(0, 1)
            hidden = out
        a_hi, a_lo = self.alphas(hidden)
        a_hi, a_lo = a_hi.transpose(0, 1), a_lo.transpose(0, 1)
        top, bot = info.top[:, -n_pred:], info.bot[:, -n_pred:]
        log_y = info.log_y[:, -n_pred:]
        tail_hi = -(torch.log(a_hi) + a_hi * self.log_s_hi - (a_hi + 1) * log_y)
        tail_lo = -(torch.log(a_lo) + a_lo * self.log_s_lo - (a_lo + 1) * log_y)
        leaf = info.log_width[:, -n_pred:]
        leaf = torch.where(top, tail_hi, torch.where(bot, tail_lo, leaf))
        terms["leaf"] = leaf
        return terms

    def point_nll(self, info: TargetInfo, n_cond: int) -> torch.Tensor:
        return sum(self.nll_terms(info, n_cond).values())

    def forward_train(self, info: TargetInfo, n_cond: int) -> torch.Tensor:
        return self.point_nll(info, n_cond).mean()

    # -- sampling ---------------------------------------------------------------

    def encode(self, values: np.ndarray, covariates: np.ndarray):
        """Run the conditioning range; returns (states, last_path, last_value)."""
        info = self.prepare(values, covariates)
        paths = info.paths.transpose(0, 1)
        vals = info.values.transpose(0, 1)
        cov = info.covariates.transpose(0, 1)
        states = []
        if paths.shape[0] > 1:
            inputs = self._level_inputs(paths[:-1], paths[1:], cov[1:], vals[:-1])
            for i, lstm in enumerate(self.lstms):
                _, st = lstm(inputs[i])
                states.append(st)
        else:
            states = [lstm.zero_state(paths.shape[1]) for lstm in self.lstms]
        return states, paths[-1], vals[-1]

    def _step_level(self, i, states, prev_path, cur_path, cov_t, prev_value):
        x = self._level_inputs(prev_path, cur_path, cov_t, prev_value)[i].unsqueeze(0)
        out, st = self.lstms[i](x, states[i])
        return out[0], st

    def sample_step(self, states, prev_path, prev_value, cov_t, noise: np.ndarray):
        """Sample one timestep for a batch from ``noise`` (batch, B+1) uniforms.

        Returns (paths (batch, B) long, values (batch,) float64, new states).
        """
        batch = prev_path.shape[0]
        cur = torch.zeros((batch, self.n_levels), dtype=torch.long)
        new_states = list(states)
        hidden = None
        for i in range(self.n_levels):
            hidden, new_states[i] = self._step_level(i, states, prev_path, cur, cov_t, prev_value)
            probs = torch.softmax(self.heads[i](hidden).double(), dim=-1)
            cum = probs.cumsum(-1)
            u = torch.as_tensor(noise[:, i], dtype=torch.float64).unsqueeze(-1) * cum[:, -1:]
            idx = torch.searchsorted(cum, u, right=True).squeeze(-1)
            cur[:, i] = idx.clamp_max(self.config.levels[i] - 1)
        a_hi, a_lo = self.alphas(hidden)
        leaves = paths_to_leaf(self.spec, cur.numpy())
        values = sample_in_leaf(
            self.spec, leaves, noise[:, -1], a_hi.detach().double().numpy(), a_lo.detach().double().numpy()
        )
        return cur, values, new_states

    def forward_sample(self, states, prev_path, prev_value, cov_t, rng: np.random.Generator):
        noise = rng.random((prev_path.shape[0], self.n_noise))
        return self.sample_step(states, prev_path, prev_value, cov_t, noise)

    @torch.no_grad()
    def sample_paths(self, cond_values: np.ndarray, covariates: np.ndarray, noise: np.ndarray) -> np.ndarray:
        """Rollouts in the normalized domain.

        ``cond_values`` (W, T); ``covariates`` (W, T+N, C); ``noise`` (W, R, N, B+1).
        Returns samples (W, R, N).
        """
        w, r, n, _ = noise.shape
        t = cond_values.shape[1]
        states, path, value = self.encode(cond_values, covariates[:, :t])
        states = [(h.repeat_interleave(r, dim=1), c.repeat_interleave(r, dim=1)) for h, c in states]
        path = path.repeat_interleave(r, dim=0)
        value = value.repeat_interleave(r, dim=0)
        cov = torch.as_tensor(covariates[:, t:], dtype=self.dtype).repeat_interleave(r, dim=0)
        flat_noise = noise.reshape(w * r, n, -1)
        out = np.empty((w * r, n))
        for k in range(n):
            path, vals, states = self.sample_step(states, path, value, cov[:, k], flat_noise[:, k])
            out[:, k] = vals
            value = _feedback(vals, self.dtype)
        return out.reshape(w, r, n)

    @torch.no_grad()
    def next_step_conditionals(self, cond_values: np.ndarray, covariates: np.ndarray):
        """Conditionals provider and tails for the step after a single conditioning range.

        ``cond_values`` (T,), ``covariates`` (T+1, C).
        """
        t = len(cond_values)
        states, path, value = self.encode(cond_values[None, :], covariates[None, :t])
        cov_t = torch.as_tensor(covariates[None, t], dtype=self.dtype)

        @torch.no_grad()
        def provider(prefix):
            cur = torch.zeros((1, self.n_levels), dtype=torch.long)
            cur[0, : len(prefix)] = torch.as_tensor(prefix, dtype=torch.long)
            hidden, _ = self._step_level(len(prefix), states, path, cur, cov_t, value)
            return torch.softmax(self.heads[len(prefix)](hidden).double(), -1)[0].numpy()

        # tail shapes come from the deepest level, whose input depends on the coarse prefix;
        # plots use the prefix of the all-max path for the top tail and all-zero for the bottom
        top = tuple(k - 1 for k in self.config.levels[:-1])
        bot = tuple(0 for _ in self.config.levels[:-1])
        a_hi = self._tail_at(states, path, value, cov_t, top)[0]
        a_lo = self._tail_at(states, path, value, cov_t, bot)[1]
        return provider, (a_hi, a_lo)

    def _tail_at(self, states, path, value, cov_t, prefix):
        cur = torch.zeros((1, self.n_levels), dtype=torch.long)
        cur[0, : len(prefix)] = torch.as_tensor(prefix, dtype=torch.long)
        hidden, _ = self._step_level(self.n_levels - 1, states, path, cur, cov_t, value)
        a_hi, a_lo = self.alphas(hidden)
        return float(a_hi[0]), float(a_lo[0])


FEEDBACK_CLIP = 1e6


def _feedback(values: np.ndarray, dtype) -> torch.Tensor:
    # a heavy Pareto draw can be astronomically large; keep the fed-back input finite
    return torch.as_tensor(np.clip(values, -FEEDBACK_CLIP, FEEDBACK_CLIP), dtype=dtype)


class GaussianRnn(nn.Module):
    """DeepAR-style LSTM with a Gaussian output (mean, softplus std)."""

    kind = "gaussian"
    n_noise = 1

    def __init__(self, config: GaussianConfig):
        super().__init__()
        self.config = config
        self.lstm = LstmStack(config.input_dim, config.n_hidden, config.lstm_dropout)
        self.head = nn.Linear(config.n_hidden, 2)

    @property
    def dtype(self):
        return self.head.weight.dtype

    def params_of(self, hidden: torch.Tensor):
        out = self.head(hidden)
        return out[..., 0], F.softplus(out[..., 1]).clamp_min(1e-6)

    def prepare(self, values: np.ndarray, covariates: np.ndarray):
        dt = self.dtype
        return torch.as_tensor(np.asarray(values), dtype=dt), torch.as_tensor(np.asarray(covariates), dtype=dt)

    def _inputs(self, prev_values, covariates):
        return torch.cat([covariates, prev_values.unsqueeze(-1)], dim=-1)

    def point_nll(self, info, n_cond: int) -> torch.Tensor:
        vals, cov = info
        vals, cov = vals.transpose(0, 1), cov.transpose(0, 1)
        out, _ = self.lstm(self._inputs(vals[:-1], cov[1:]))
        n_pred = vals.shape[0] - n_cond
        mean, std = self.params_of(out[-n_pred:])
        z = vals[-n_pred:]
        nll = 0.5 * math.log(2 * math.pi) + torch.log(std) + 0.5 * ((z - mean) / std) ** 2
        return nll.transpose(0, 1)

    def forward_train(self, info, n_cond: int) -> torch.Tensor:
        return self.point_nll(info, n_cond).mean()

    def encode(self, values: np.ndarray, covariates: np.ndarray):
        vals, cov = self.prepare(values, covariates)
        vals, cov = vals.transpose(0, 1), cov.transpose(0, 1)
        if vals.shape[0] > 1:
            _, state = self.lstm(self._inputs(vals[:-1], cov[1:]))
        else:
            state = self.lstm.zero_state(vals.shape[1])
        return state, vals[-1]

    def sample_step(self, state, prev_value, cov_t, noise: np.ndarray):
        out, state = self.lstm(self._inputs(prev_value, cov_t).unsqueeze(0), state)
        mean, std = self.params_of(out[0])
        z = mean.detach().double().numpy() + std.detach().double().numpy() * ndtri(np.clip(noise[:, 0], 1e-300, 1 - 1e-16))
        return z, state

    def forward_sample(self, state, prev_value, cov_t, rng: np.random.Generator):
        return self.sample_step(state, prev_value, cov_t, rng.random((prev_value.shape[0], 1)))

    @torch.no_grad()
    def sample_paths(self, cond_values: np.ndarray, covariates: np.ndarray, noise: np.ndarray) -> np.ndarray:
        w, r, n, _ = noise.shape
        t = cond_values.shape[1]
        state, value = self.encode(cond_values, covariates[:, :t])
        state = tuple(s.repeat_interleave(r, dim=1) for s in state)
        value = value.repeat_interleave(r, dim=0)
        cov = torch.as_tensor(covariates[:, t:], dtype=self.dtype).repeat_interleave(r, dim=0)
        flat_noise = noise.reshape(w * r, n, -1)
        out = np.empty((w * r, n))
        for k in range(n):
            vals, state = self.sample_step(state, value, cov[:, k], flat_noise[:, k])
            out[:, k] = vals
            value = _feedback(vals, self.dtype)
        return out.reshape(w, r, n)


def build_model(kind: str, config) -> nn.Module:
    if kind == "gaussian":
        return GaussianRnn(config)
    if kind == "c2far":
        return C2farRnn(config)
    raise ConfigurationError(f"unknown model kind {kind!r}")


def config_from_dict(kind: str, d: dict):
    if kind == "gaussian":
        return GaussianConfig(**d)
    return C2farConfig(**d)
