"""Online Bayesian estimation of driver parameters with a particle filter,
plus control-conditioned predicted-belief propagation over the planning
horizon.

Weights live in probability space on the dataclasses; every update runs in
log domain with max-subtraction so long products of transition densities do
not underflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import (
    PARAM_DIM,
    DynamicsConfig,
    EgoControl,
    JointState,
    NoiseModel,
    batch_deterministic_step,
)

# Below this best-particle log-density every direct-domain likelihood is a
# hard float zero; the update freezes and flags instead of dividing by zero.
_LOG_TINY = math.log(2.2250738585072014e-308)


@dataclass
class ParticleSet:
    """Weighted joint parameter particles; shape (n_p, n_v, PARAM_DIM)."""

    particles: np.ndarray
    weights: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.particles.ndim != 3 or self.particles.shape[-1] != PARAM_DIM:
            raise ValueError("particles must have shape (n_p, n_v, PARAM_DIM)")
        if self.weights.shape != (self.particles.shape[0],):
            raise ValueError("weights must have one entry per particle")
        if np.any(self.weights < 0) or abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValueError("weights must be a probability vector")

    @property
    def n_p(self) -> int:
        return self.particles.shape[0]

    def mean_params(self) -> np.ndarray:
        """Belief-mean parameter vector, shape (n_v, PARAM_DIM)."""
        return np.tensordot(self.weights, self.particles, axes=1)


@dataclass
class PredictedBelief:
    """Downsampled particles with horizon-indexed predicted weights.

    ``weights_by_step[0]`` is the uniform step-t vector; each propagation
    appends one more step.
    """

    particles: np.ndarray
    weights_by_step: list[np.ndarray] = field(default_factory=list)
    degenerate: bool = False

    @property
    def n_hat(self) -> int:
        return self.particles.shape[0]

    @property
    def current_weights(self) -> np.ndarray:
        return self.weights_by_step[-1]


@dataclass
class PriorComponent:
    """One mixture component: independent uniform ranges per parameter."""

    weight: float
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        self.low = np.asarray(self.low, dtype=float)
        self.high = np.asarray(self.high, dtype=float)
        if self.low.shape != (PARAM_DIM,) or self.high.shape != (PARAM_DIM,):
            raise ValueError("component ranges must have PARAM_DIM entries")
        if np.any(self.high < self.low):
            raise ValueError("component range high < low")


@dataclass
class ParameterPrior:
    """Independent per-vehicle mixture prior over driver parameters.

    The default is a two-component friendly/aggressive mixture; the physical
    car-following ranges are identical across components so only the yield
    gain separates the behaviors.
    """

    n_v: int
    components: list[PriorComponent]

    def __post_init__(self):
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-9:
            raise ValueError("component weights must sum to 1")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """(n, n_v, PARAM_DIM) i.i.d. draws."""
        probs = np.array([c.weight for c in self.components])
        lows = np.stack([c.low for c in self.components])
        highs = np.stack([c.high for c in self.components])
        comp = rng.choice(len(self.components), size=(n, self.n_v), p=probs)
        u = rng.uniform(0.0, 1.0, size=(n, self.n_v, PARAM_DIM))
        return lows[comp] + u * (highs[comp] - lows[comp])

    def mean(self) -> np.ndarray:
        """Analytic marginal mean, shape (PARAM_DIM,). Identical per vehicle."""
        return sum(c.weight * 0.5 * (c.low + c.high) for c in self.components)

    def variance(self) -> np.ndarray:
        """Analytic marginal variance per parameter."""
        m = self.mean()
        second = sum(
            c.weight * ((c.high - c.low) ** 2 / 12.0 + (0.5 * (c.low + c.high)) ** 2)
            for c in self.components
        )
        return second - m**2


def default_prior(n_v: int, friendly_prob: float = 0.5) -> ParameterPrior:
    """Friendly/aggressive mixture at small-vehicle scale (chosen, not from paper).

    Physical car-following ranges match the trial randomization envelope so
    the filter's job is dominated by the behavioral unknown, the yield gain.
    """
    phys_low = [1.0, 0.15, 0.18, 1.15, 1.15]
    phys_high = [1.40, 0.55, 0.28, 1.25, 1.25]
    aggressive = PriorComponent(1.0 - friendly_prob, phys_low + [0.0], phys_high + [0.10])
    friendly = PriorComponent(friendly_prob, phys_low + [0.70], phys_high + [1.0])
    return ParameterPrior(n_v=n_v, components=[aggressive, friendly])


def init_particles(prior: ParameterPrior, n_p: int, rng: np.random.Generator) -> ParticleSet:
    """Draw n_p particles from the prior with uniform weights."""
    if n_p < 1:
        raise ValueError("n_p must be >= 1")
    return ParticleSet(prior.sample(rng, n_p), np.full(n_p, 1.0 / n_p))


def posterior_weights(weights: np.ndarray, log_liks: np.ndarray) -> tuple[np.ndarray, bool]:
    """Bayes update of a weight vector given per-particle log-likelihoods.

    Returns (new_weights, degenerate).  When every direct-domain likelihood
    is numerically zero the previous weights are returned unchanged with the
    degenerate flag set.
    """
    log_liks = np.asarray(log_liks, dtype=float)
    top = float(np.max(log_liks))
    if not np.isfinite(top) or top < _LOG_TINY:
        return weights.copy(), True
    with np.errstate(divide="ignore"):
        logw = np.log(weights) + log_liks - top
    w = np.exp(logw)
    total = w.sum()
    if total <= 0.0 or not np.isfinite(total):
        return weights.copy(), True
    return w / total, False


def _batch_loglik(target_vec: np.ndarray, current_mats: np.ndarray,
                  u: np.ndarray, thetas: np.ndarray, dt: float,
                  noise: NoiseModel, cfg: DynamicsConfig) -> np.ndarray:
    """Full transition log-density of ``target_vec`` under each particle."""
    dets = batch_deterministic_step(current_mats, u, thetas, dt, cfg)
    residuals = target_vec - dets.reshape(dets.shape[0], -1)
    return np.asarray(noise.logpdf(residuals))


def update_weights(ps: ParticleSet, observed_next: JointState, current: JointState,
                   u: EgoControl, dt: float, noise: NoiseModel,
                   cfg: DynamicsConfig | None = None) -> ParticleSet:
    """Condition the belief on one observed transition."""
    if cfg is None:
        cfg = DynamicsConfig()
    log_liks = _batch_loglik(
        observed_next.as_vector(),
        np.broadcast_to(current.as_matrix(), (ps.n_p,) + current.as_matrix().shape),
        u.as_array(), ps.particles, dt, noise, cfg,
    )
    w, degenerate = posterior_weights(ps.weights, log_liks)
    return ParticleSet(ps.particles, w, degenerate=degenerate)


def resample_predicted(ps: ParticleSet, n_hat: int, rng: np.random.Generator) -> PredictedBelief:
    """Downsample the belief for horizon rollouts; step-t weights uniform."""
    if n_hat < 1:
        raise ValueError("n_hat must be >= 1")
    idx = rng.choice(ps.n_p, size=n_hat, replace=True, p=ps.weights)
    return PredictedBelief(
        particles=ps.particles[idx].copy(),
        weights_by_step=[np.full(n_hat, 1.0 / n_hat)],
    )


def propagate_predicted_weights(pb: PredictedBelief, expected_next: JointState,
                                current, planned_u: EgoControl, step_index: int,
                                dt: float, noise: NoiseModel,
                                cfg: DynamicsConfig | None = None) -> PredictedBelief:
    """Append the step-(k+1) predicted weights.

    ``expected_next`` is the particle-averaged one-step prediction computed
    by the caller; ``current`` is either one shared JointState or an
    (n_hat, n_veh, 4) array of per-particle rollout states.  Each particle's
    likelihood is the transition density of ``expected_next`` from its own
    state under its own parameters.
    """
    if cfg is None:
        cfg = DynamicsConfig()
    if step_index != len(pb.weights_by_step) - 1:
        raise ValueError("propagation must extend the last recorded step")
    if isinstance(current, JointState):
        mats = np.broadcast_to(current.as_matrix(), (pb.n_hat,) + current.as_matrix().shape)
    else:
        mats = np.asarray(current, dtype=float)
        if mats.shape[0] != pb.n_hat:
            raise ValueError("per-particle states must match n_hat")
    log_liks = _batch_loglik(expected_next.as_vector(), mats, planned_u.as_array(),
                             pb.particles, dt, noise, cfg)
    w, degenerate = posterior_weights(pb.current_weights, log_liks)
    return PredictedBelief(
        particles=pb.particles,
        weights_by_step=pb.weights_by_step + [w],
        degenerate=pb.degenerate or degenerate,
    )


def belief_entropy(weights) -> float:
    """Shannon entropy in nats with 0 log 0 := 0."""
    w = np.asarray(weights, dtype=float)
    nz = w[w > 0.0]
    return float(-np.sum(nz * np.log(nz)))


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return 1.0 / float(np.sum(w * w))


def systematic_resample(ps: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    """Optional rejuvenation hook; not used by default."""
    positions = (rng.uniform() + np.arange(ps.n_p)) / ps.n_p
    idx = np.searchsorted(np.cumsum(ps.weights), positions)
    return ParticleSet(ps.particles[idx].copy(), np.full(ps.n_p, 1.0 / ps.n_p))


def friendly_probability(particles: np.ndarray, weights: np.ndarray,
                         vehicle_index: int, threshold: float = 0.5) -> float:
    """Posterior probability that a vehicle's yield gain exceeds ``threshold``."""
    gains = particles[:, vehicle_index - 1, 5]
    return float(np.sum(weights[gains > threshold]))
