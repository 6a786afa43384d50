"""Gaze policy: where to look next, given the encoder state.

A small cross-attention head reads the N state vectors through K+1 learned
queries and emits a K-component isotropic Gaussian mixture over the next gaze
center. The K component queries produce sigmoid-squashed means in the unit
square; the extra query produces the categorical logits that pick the
component. The standard deviation is a fixed hyperparameter, not learned.
Sampling is stochastic during training; inference takes the most probable
component's mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Attention, LayerNorm, Linear, Mlp, Module
from .tensor import DiffTensor

__all__ = [
    "PolicyConfig",
    "Action",
    "MixturePolicyParams",
    "GazePolicy",
    "sample_component",
    "sample_action",
    "deterministic_action",
    "log_prob_single",
]


@dataclass
class PolicyConfig:
    components: int = 4
    sigma: float = 0.1
    heads: int = 2

    def __post_init__(self):
        if self.components < 1:
            raise ValueError("mixture needs >= 1 component")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass(frozen=True)
class Action:
    """A gaze center, clamped to the unit square."""

    x: float
    y: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(min(1.0, max(0.0, self.x))))
        object.__setattr__(self, "y", float(min(1.0, max(0.0, self.y))))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class MixturePolicyParams:
    """One state's mixture (numpy view, for sampling and inference)."""

    means: np.ndarray   # (K, 2), already squashed into [0,1]^2
    logits: np.ndarray  # (K,)
    sigma: float

    def weights(self) -> np.ndarray:
        z = self.logits - self.logits.max()
        e = np.exp(z)
        return e / e.sum()


class PolicyOutput:
    """Batched differentiable mixture parameters."""

    def __init__(self, means: DiffTensor, logits: DiffTensor, sigma: float):
        self.means = means    # (B, K, 2)
        self.logits = logits  # (B, K)
        self.sigma = sigma

    def __getitem__(self, b: int) -> MixturePolicyParams:
        return MixturePolicyParams(
            means=np.asarray(self.means.data[b], dtype=np.float64),
            logits=np.asarray(self.logits.data[b], dtype=np.float64),
            sigma=self.sigma,
        )

    def log_prob(self, actions: np.ndarray) -> DiffTensor:
        """log p(a | mixture) per batch row, differentiable w.r.t. the policy.

        Uses the unclamped density: log sum_c w_c N(a; mean_c, sigma^2 I),
        evaluated with log-sum-exp.
        """
        sigma = self.sigma
        acts = DiffTensor(np.asarray(actions, dtype=self.means.dtype).reshape(-1, 1, 2))
        diff = acts - self.means                       # (B, K, 2)
        sq = (diff * diff).sum(axis=-1)                # (B, K)
        log_norm = -math.log(2.0 * math.pi * sigma * sigma)
        log_gauss = sq * (-1.0 / (2.0 * sigma * sigma)) + log_norm
        log_w = T.log_softmax(self.logits, axis=-1)
        return T.logsumexp(log_w + log_gauss, axis=-1)


class GazePolicy(Module):
    def __init__(self, config: PolicyConfig, dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.config = config
        k = config.components
        self.queries = T.randn(rng, (k + 1, dim), std=0.02, requires_grad=True,
                               dtype=dtype)
        self.attn = Attention(rng, dim, config.heads, dtype=dtype)
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(rng, dim, 2 * dim, dim, dtype=dtype)
        self.mean_head = Linear(rng, dim, 2, dtype=dtype)
        self.logit_head = Linear(rng, dim, k, dtype=dtype)

    def __call__(self, state_values: DiffTensor | np.ndarray) -> PolicyOutput:
        """(B, N, D) state -> mixture parameters for each batch row."""
        if isinstance(state_values, np.ndarray):
            state_values = DiffTensor(state_values.astype(self.queries.dtype))
        k = self.config.components
        x = self.queries + self.attn(self.queries, state_values)  # (B, K+1, D)
        x = self.ln1(x)
        x = self.ln2(x + self.mlp(x))
        means = self.mean_head(x[:, :k, :]).sigmoid()   # (B, K, 2)
        logits = self.logit_head(x[:, k, :])            # (B, K)
        return PolicyOutput(means, logits, self.config.sigma)

    def forward_single(self, state_values: np.ndarray) -> MixturePolicyParams:
        """Convenience wrapper for one (N, D) state."""
        with T.no_grad():
            return self(state_values[None])[0]


# -- action selection -----------------------------------------------------------


def sample_component(params: MixturePolicyParams, rng: np.random.Generator) -> int:
    w = params.weights()
    return int(rng.choice(len(w), p=w))


def sample_action(params: MixturePolicyParams, rng: np.random.Generator) -> Action:
    c = sample_component(params, rng)
    noise = rng.standard_normal(2) * params.sigma
    xy = params.means[c] + noise
    return Action(x=xy[0], y=xy[1])


def deterministic_action(params: MixturePolicyParams) -> Action:
    """Mean of the most probable component (ties: lowest index)."""
    c = int(np.argmax(params.logits))
    return Action(x=params.means[c, 0], y=params.means[c, 1])


def log_prob_single(params: MixturePolicyParams, action: Action | np.ndarray) -> float:
    """Non-graph mixture log-density of one action (unclamped density)."""
    a = action.as_array() if isinstance(action, Action) else np.asarray(action)
    sigma = params.sigma
    diff = a[None, :] - params.means
    sq = (diff * diff).sum(axis=-1)
    log_gauss = -sq / (2.0 * sigma * sigma) - math.log(2.0 * math.pi * sigma * sigma)
    logw = params.logits - params.logits.max()
    logw = logw - math.log(np.exp(logw).sum())
    joint = logw + log_gauss
    m = joint.max()
    return float(m + math.log(np.exp(joint - m).sum()))
