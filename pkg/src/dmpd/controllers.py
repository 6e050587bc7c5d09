"""Dual stochastic optimal control: belief-weighted rollout costs, the
optimal sampling density, and the DMPD / DMPPI / EMPPI / CE planners.

The rollout engine is batched over (candidate sequence x particle); one set
of noise draws per (particle, step) is shared by every candidate within a
planning cycle (common random numbers), so cost comparisons see identical
disturbances.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .belief import (
    ParticleSet,
    PredictedBelief,
    belief_entropy,
    resample_predicted,
)
from .diffusion import (
    ModeSet,
    annealed_schedule,
    compute_moments,
    mppi_schedule,
    mpd_solve,
)
from .dynamics import EgoControl, JointState, batch_deterministic_step
from .scenario import (
    ScenarioConfig,
    batch_ego_quadratic,
    batch_penalty,
    batch_terminal_quadratic,
)

_LOG_TINY = math.log(2.2250738585072014e-308)


@dataclass
class RolloutBatch:
    """Per-particle trajectories, per-step predicted weights, scalar cost."""

    states: np.ndarray
    weights_by_step: np.ndarray
    cost: float
    degenerate: bool = False


def optimal_density(cost_value, lam: float, baseline: float = 0.0):
    """Unnormalized optimal density exp(-(J - baseline)/lambda).

    The baseline (per-cycle minimum sampled cost in the planners) cancels in
    every normalized weight, so it only guards against underflow.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return np.exp(-(np.asarray(cost_value, dtype=float) - baseline) / lam)


def _propagate_batch_weights(w: np.ndarray, quad: np.ndarray,
                             logpdf_const: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized Bayes update of (C, P) weights given residual quadforms."""
    loglik = -0.5 * quad
    top = loglik.max(axis=1, keepdims=True)
    degen = ~np.isfinite(top[:, 0]) | (top[:, 0] + logpdf_const < _LOG_TINY)
    with np.errstate(divide="ignore"):
        nw = np.exp(np.log(w) + loglik - np.where(np.isfinite(top), top, 0.0))
    total = nw.sum(axis=1, keepdims=True)
    degen |= ~np.isfinite(total[:, 0]) | (total[:, 0] <= 0.0)
    out = np.where(degen[:, None], w, nw / np.where(total > 0, total, 1.0))
    return out, degen


def rollout_costs_batch(U: np.ndarray, x0_mat: np.ndarray, particles: np.ndarray,
                        draws: np.ndarray | None, scen: ScenarioConfig,
                        propagate: bool = True, return_full: bool = False,
                        noise=None, filter_noise=None):
    """SAA objective for a batch of control sequences.

    ``U``: (C, N, 2) raw ego controls; ``particles``: (P, n_v, 6);
    ``draws``: (P, N, n_veh, 4) shared state noise or None for noiseless
    rollouts.  Stage costs at step k are weighted by the step-k predicted
    weights; with ``propagate`` off the weights stay frozen uniform.
    Returns costs (C,) or (costs, weight trajectories (C, N+1, P),
    states (C, P, N+1, n_veh, 4), degenerate mask) when ``return_full``.
    """
    U = np.asarray(U, dtype=float)
    C, N = U.shape[0], U.shape[1]
    P = particles.shape[0]
    n_veh = x0_mat.shape[0]
    if noise is None:
        noise = scen.noise_model()
    if filter_noise is None:
        filter_noise = scen.filter_noise_model()
    logpdf_const = -0.5 * (filter_noise.dim * math.log(2 * math.pi) + filter_noise._log_det)

    q_diag, r_diag, goal = scen.cost.q_diag(), scen.cost.r_diag(), scen.cost.goal()
    states = np.broadcast_to(x0_mat, (C, P, n_veh, 4)).copy()
    w = np.full((C, P), 1.0 / P)
    cost = np.zeros(C)
    degenerate = np.zeros(C, dtype=bool)
    if return_full:
        wtraj = np.empty((C, N + 1, P))
        straj = np.empty((C, P, N + 1, n_veh, 4))
        straj[:, :, 0] = states

    thetas = particles[None]
    for k in range(N):
        u_k = U[:, None, k, :]
        stage = batch_ego_quadratic(states[:, :, 0, :], u_k, scen.cost,
                                    q=q_diag, r=r_diag, goal=goal) \
            + batch_penalty(states, scen, scen.plan_margin_x, scen.plan_margin_y)
        if return_full:
            wtraj[:, k] = w
        cost += np.sum(w * stage, axis=1)

        dets = batch_deterministic_step(states, u_k, thetas, scen.dt, scen.dynamics)
        if propagate:
            xbar = dets.mean(axis=1)
            quad = filter_noise.quadform((xbar[:, None] - dets).reshape(C, P, -1))
            w, degen = _propagate_batch_weights(w, quad, logpdf_const)
            degenerate |= degen
        if draws is not None:
            states = dets + draws[None, :, k]
            states[..., 0] = np.maximum(states[..., 0], 0.0)
        else:
            states = dets
        if return_full:
            straj[:, :, k + 1] = states

    cost += np.sum(w * (batch_terminal_quadratic(states[:, :, 0, :], scen.cost)
                        + batch_penalty(states, scen, scen.plan_margin_x, scen.plan_margin_y)), axis=1)
    if return_full:
        wtraj[:, N] = w
        return cost, wtraj, straj, degenerate
    return cost


def rollout_cost(x0: JointState, u_seq: np.ndarray, pb: PredictedBelief,
                 cost_cfg, scen: ScenarioConfig, rng: np.random.Generator | None = None,
                 draws: np.ndarray | None = None,
                 propagate: bool = True) -> tuple[float, RolloutBatch]:
    """Belief-weighted horizon cost of one control sequence.

    ``u_seq`` is (N, 2) or flat (2N,).  ``cost_cfg`` overrides scen.cost when
    given.  Noise draws come from ``draws`` or are sampled from ``rng``
    (None for a noiseless rollout).
    """
    U = np.asarray(u_seq, dtype=float).reshape(1, -1, 2)
    N = U.shape[1]
    n_veh = x0.n_v + 1
    if cost_cfg is not None and cost_cfg is not scen.cost:
        scen = _with_cost(scen, cost_cfg)
    if draws is None and rng is not None:
        draws = scen.noise_model().sample(rng, (pb.n_hat, N)).reshape(pb.n_hat, N, n_veh, 4)
    costs, wtraj, straj, degen = rollout_costs_batch(
        U, x0.as_matrix(), pb.particles, draws, scen,
        propagate=propagate, return_full=True)
    batch = RolloutBatch(states=straj[0], weights_by_step=wtraj[0],
                         cost=float(costs[0]), degenerate=bool(degen[0]))
    return float(costs[0]), batch


def _with_cost(scen: ScenarioConfig, cost_cfg) -> ScenarioConfig:
    out = copy.copy(scen)
    out.cost = cost_cfg
    return out


def shift_modes(modes: ModeSet) -> ModeSet:
    """Receding-horizon time shift: drop the first step, repeat the last."""
    seqs = modes.sequences.reshape(modes.n_m, -1, 2)
    shifted = np.concatenate([seqs[:, 1:], seqs[:, -1:]], axis=1)
    return ModeSet(shifted.reshape(modes.n_m, -1))


def _make_density_fn(x0_mat, particles, draws, scen, propagate, noise, filter_noise):
    lam = scen.cost.lam

    def density(U_flat):
        U = np.asarray(U_flat, dtype=float).reshape(len(U_flat), -1, 2)
        costs = rollout_costs_batch(U, x0_mat, particles, draws, scen,
                                    propagate=propagate, noise=noise,
                                    filter_noise=filter_noise)
        return optimal_density(costs, lam, baseline=float(costs.min())), costs

    return density


def _plan_common(x_t: JointState, particles: np.ndarray, modes: ModeSet,
                 scen: ScenarioConfig, sched, moments, rng: np.random.Generator,
                 propagate: bool, pb: PredictedBelief | None):
    """Shared planning cycle: density from rollouts, solve, select, diagnose."""
    cfg = scen.solver
    r_draws, r_solver = rng.spawn(2)
    n_veh = x_t.n_v + 1
    noise = scen.noise_model()
    filter_noise = scen.filter_noise_model()
    draws = noise.sample(
        r_draws, (particles.shape[0], cfg.horizon)).reshape(
        particles.shape[0], cfg.horizon, n_veh, 4)
    x0_mat = x_t.as_matrix()

    density = _make_density_fn(x0_mat, particles, draws, scen, propagate, noise,
                               filter_noise)
    shifted = shift_modes(modes)
    refined = mpd_solve(shifted, density, sched, moments, cfg.n_samples,
                        r_solver, mode=cfg.denoise_mode)
    # Keep the carried modes inside the actuation box: outside it the
    # clamped dynamics make the density flat and the iterates would drift.
    seqs = refined.sequences.reshape(refined.n_m, -1, 2)
    np.clip(seqs[:, :, 0], scen.dynamics.accel_min, scen.dynamics.accel_max, out=seqs[:, :, 0])
    np.clip(seqs[:, :, 1], scen.dynamics.steer_min, scen.dynamics.steer_max, out=seqs[:, :, 1])
    best = refined.best_index()
    best_seq = refined.sequences[best]

    sel_cost, sel_wtraj, _, sel_degen = rollout_costs_batch(
        best_seq.reshape(1, -1, 2), x0_mat, particles, draws, scen,
        propagate=propagate, return_full=True, noise=noise,
        filter_noise=filter_noise)
    entropy_traj = [belief_entropy(wk) for wk in sel_wtraj[0]]

    diagnostics = {
        "mode_costs": refined.costs,
        "selected_mode": best,
        "selected_cost": float(sel_cost[0]),
        "mode_flags": refined.flags,
        "density_mass": refined.diagnostics["density_mass"],
        "pred_weight_entropy": entropy_traj,
        "pred_weights_final": sel_wtraj[0][-1],
        "weight_degenerate": bool(sel_degen[0]),
        "all_modes_failed": bool(np.all(~np.isfinite(refined.costs))),
    }
    u0 = EgoControl(float(best_seq[0]), float(best_seq[1]))
    return u0, refined, diagnostics


def dmpd_step(x_t: JointState, belief: ParticleSet, modes: ModeSet,
              scen: ScenarioConfig, rng: np.random.Generator
              ) -> tuple[EgoControl, ModeSet, dict]:
    """One dual model predictive diffusion cycle.

    Downsamples the belief, builds the optimal density from predicted-weight
    rollouts, refines the multimodal dynamic prior, and applies the first
    control of the minimum-cost mode.  The returned ModeSet seeds the next
    cycle's prior.
    """
    cfg = scen.solver
    r_resample, r_plan = rng.spawn(2)
    pb = resample_predicted(belief, cfg.n_hat, r_resample)
    sched = annealed_schedule(cfg.n_diffusion, cfg.horizon,
                              (cfg.sigma_accel, cfg.sigma_steer), cfg.anneal)
    return _plan_common(x_t, pb.particles, modes, scen, sched,
                        compute_moments(sched), r_plan, True, pb)


def dmppi_step(x_t: JointState, belief: ParticleSet, prev: np.ndarray,
               scen: ScenarioConfig, rng: np.random.Generator
               ) -> tuple[EgoControl, np.ndarray, dict]:
    """Dual MPPI: the single-mode, single-step reduction of dmpd_step."""
    cfg = scen.solver
    r_resample, r_plan = rng.spawn(2)
    pb = resample_predicted(belief, cfg.n_hat, r_resample)
    sched = mppi_schedule(cfg.horizon, (cfg.sigma_accel, cfg.sigma_steer))
    u0, refined, diag = _plan_common(
        x_t, pb.particles, ModeSet(np.asarray(prev, dtype=float)[None]),
        scen, sched, compute_moments(sched), r_plan, True, pb)
    return u0, refined.sequences[0], diag


def emppi_step(x_t: JointState, belief: ParticleSet, prev: np.ndarray,
               scen: ScenarioConfig, rng: np.random.Generator,
               mode: str = "stochastic") -> tuple[EgoControl, np.ndarray, dict]:
    """Ensemble MPPI (frozen belief) or certainty-equivalent MPPI.

    Stochastic mode rolls the downsampled particle set with uniform frozen
    weights; CE mode rolls the single belief-mean parameter vector.
    """
    cfg = scen.solver
    r_resample, r_plan = rng.spawn(2)
    if mode == "stochastic":
        pb = resample_predicted(belief, cfg.n_hat, r_resample)
        particles = pb.particles
    elif mode == "certainty_equivalent":
        particles = belief.mean_params()[None]
    else:
        raise ValueError(f"unknown emppi mode: {mode!r}")
    sched = mppi_schedule(cfg.horizon, (cfg.sigma_accel, cfg.sigma_steer))
    u0, refined, diag = _plan_common(
        x_t, particles, ModeSet(np.asarray(prev, dtype=float)[None]),
        scen, sched, compute_moments(sched), r_plan, False, None)
    return u0, refined.sequences[0], diag


# ---------------------------------------------------------------------------
# Stateful planners for closed-loop simulation.

class BasePlanner:
    name = "base"

    def __init__(self, scen: ScenarioConfig):
        self.scen = scen
        self.dim = scen.solver.horizon * 2

    def plan(self, x_t: JointState, belief: ParticleSet,
             rng: np.random.Generator) -> tuple[EgoControl, dict]:
        raise NotImplementedError


class DmpdPlanner(BasePlanner):
    name = "dmpd"

    def __init__(self, scen: ScenarioConfig):
        super().__init__(scen)
        self.modes = ModeSet(np.zeros((scen.solver.n_modes, self.dim)))

    def plan(self, x_t, belief, rng):
        u0, self.modes, diag = dmpd_step(x_t, belief, self.modes, self.scen, rng)
        return u0, diag


class DmppiPlanner(BasePlanner):
    name = "dmppi"

    def __init__(self, scen: ScenarioConfig):
        super().__init__(scen)
        self.prev = np.zeros(self.dim)

    def plan(self, x_t, belief, rng):
        u0, self.prev, diag = dmppi_step(x_t, belief, self.prev, self.scen, rng)
        return u0, diag


class EmppiPlanner(BasePlanner):
    name = "emppi"

    def __init__(self, scen: ScenarioConfig, mode: str = "stochastic"):
        super().__init__(scen)
        self.mode = mode
        self.prev = np.zeros(self.dim)

    def plan(self, x_t, belief, rng):
        u0, self.prev, diag = emppi_step(x_t, belief, self.prev, self.scen, rng,
                                         mode=self.mode)
        return u0, diag


def make_planner(name: str, scen: ScenarioConfig) -> BasePlanner:
    if name == "dmpd":
        return DmpdPlanner(scen)
    if name == "dmppi":
        return DmppiPlanner(scen)
    if name == "emppi":
        return EmppiPlanner(scen, mode="stochastic")
    if name == "ce":
        planner = EmppiPlanner(scen, mode="certainty_equivalent")
        planner.name = "ce"
        return planner
    raise ValueError(f"unknown controller: {name!r}")
