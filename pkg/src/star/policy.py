"""Gaussian selection policies: sampling, log-densities, reward, REINFORCE.

Each policy head maps its input to a scalar mean through a linear layer and
tanh, then samples from N(mean, variance). The sampled value is clamped to
[-1, 1] before use, but the log-density is always evaluated at the pre-clamp
sample so the score-function estimator stays unbiased for the underlying
Gaussian.

Gradient sign convention: REINFORCE contributions are accumulated as the
gradient of a surrogate *loss* (the negated reward-weighted log-density), so
one plain gradient-descent step ascends expected reward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import ParamGroup, linear_backward, linear_forward


@dataclass
class GaussianPolicyHead:
    """Linear map to a scalar tanh mean plus a fixed variance."""

    params: ParamGroup            # weight (1, in_width)
    variance: float

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError(f"policy variance must be >= 0, got {self.variance}")

    def mean(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(linear_forward(self.params, x)[..., 0])


@dataclass(frozen=True)
class SampledAction:
    value: float        # clamped to [-1, 1]; what the model acts on
    mean: float
    sample: float       # raw Gaussian draw, pre-clamp
    log_density: float  # gaussian_log_pdf(sample, mean, variance)


def gaussian_log_pdf(x: float, mean: float, variance: float) -> float:
    if variance <= 0:
        raise ValueError(f"gaussian_log_pdf: variance must be > 0, got {variance}")
    return -0.5 * math.log(2.0 * math.pi * variance) - (x - mean) ** 2 / (2.0 * variance)


def sample_action(head: GaussianPolicyHead, x: np.ndarray, rng: np.random.Generator) -> SampledAction:
    """Draw one action. With variance 0 (test mode) the mean is returned exactly."""
    mean = float(head.mean(np.asarray(x, dtype=np.float64)))
    if head.variance == 0.0:
        return SampledAction(value=mean, mean=mean, sample=mean, log_density=0.0)
    sample = mean + math.sqrt(head.variance) * float(rng.standard_normal())
    return SampledAction(
        value=min(max(sample, -1.0), 1.0),
        mean=mean,
        sample=sample,
        log_density=gaussian_log_pdf(sample, mean, head.variance),
    )


def sample_actions_batch(head: GaussianPolicyHead, xs: np.ndarray, rngs):
    """Per-episode draws for a batch of head inputs; one RNG stream per row.

    Returns (values, means, samples) float arrays of shape (n,).
    """
    means = head.mean(xs)
    if head.variance == 0.0:
        return means.copy(), means, means.copy()
    sd = math.sqrt(head.variance)
    noise = np.array([float(r.standard_normal()) for r in rngs])
    samples = means + sd * noise
    return np.clip(samples, -1.0, 1.0), means, samples


def terminal_reward(prediction: int, label: int) -> int:
    """Delayed binary reward: 1 iff the episode's final prediction is correct."""
    return 1 if prediction == label else 0


def accumulate_reinforce(head: GaussianPolicyHead, inputs: np.ndarray,
                         samples: np.ndarray, means: np.ndarray, coeffs: np.ndarray):
    """Add -coeff * d log N(sample | mean, var) / d theta into the head grads.

    `inputs` are treated as constants (the estimator does not reach back
    through the recurrent core). `coeffs` carries (reward - baseline) already
    scaled by 1/M and any reinforce weight.
    """
    if head.variance == 0.0:
        return
    d_mean = -np.asarray(coeffs) * (samples - means) / head.variance
    d_z = d_mean * (1.0 - means * means)          # through tanh
    linear_backward(head.params, np.atleast_2d(inputs), np.atleast_2d(d_z).reshape(-1, 1))


def reinforce_contribution(traj, reward: int, baseline: float, loc_heads, time_head,
                           mc_copies: int = 1, weight: float = 1.0):
    """Accumulate one trajectory's policy-gradient term into the head grads.

    Sums (reward - baseline) * grad log-density over all sampled actions of
    all steps, scaled by weight / mc_copies, with the surrogate-loss sign so
    a descent step ascends expected reward.
    """
    if getattr(traj, "reward", None) is None or not traj.steps:
        raise RuntimeError("reinforce_contribution: trajectory is incomplete (no terminal reward)")
    for step in traj.steps:
        if step.loc_head_inputs is None:
            raise RuntimeError("reinforce_contribution: trajectory was recorded without head inputs")
    coeff = weight * (reward - baseline) / mc_copies
    if coeff == 0.0:
        return
    for step in traj.steps:
        for i, action in enumerate(step.loc_actions):
            accumulate_reinforce(
                loc_heads[i], step.loc_head_inputs[i],
                np.array([action.sample]), np.array([action.mean]), np.array([coeff]))
        if step.time_action is not None and time_head is not None:
            accumulate_reinforce(
                time_head, step.time_head_input,
                np.array([step.time_action.sample]), np.array([step.time_action.mean]),
                np.array([coeff]))


class RewardBaseline:
    """Exponential moving average of the mean episode reward."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.value = 0.0

    def update(self, mean_reward: float) -> float:
        self.value = self.momentum * self.value + (1.0 - self.momentum) * mean_reward
        return self.value
