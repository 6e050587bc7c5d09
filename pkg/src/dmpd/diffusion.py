"""Receding-horizon model-based diffusion optimizer.

Kernel convention
-----------------
The forward corruption chain over flattened control sequences is

    u^{L} = m_L * u^{L-1} + b_L * z,   L = 1..n_d,  z ~ N(0, I),

where ``m_L`` is the *total* per-step drift multiplier (a DDPM-style
contraction uses m_L = sqrt(1 - beta_L)) and ``b_L`` is the diagonal of the
per-step noise matrix.  Schedules are configured by the multiplier directly;
writing the drift as I + A with A = (m - 1) I recovers the additive form, and
the reverse maps below use (I - A) = (2 - m) I.

A sample at level L is marginally N(drift(L) * u^0, cov(L)) with

    drift(L) = prod_{i<=L} m_i,          drift(0) = 1,
    cov(L)   = m_L^2 cov(L-1) + b_L^2,   cov(0)   = 0,

which is what ``ScheduleMoments`` stores, indexed by level.

All matrices are diagonal, so every operation is elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class DiffusionSchedule:
    """Per-step drift multipliers (n_d,) and noise diagonals (n_d, dim)."""

    multipliers: np.ndarray
    noise_scales: np.ndarray

    def __post_init__(self):
        self.multipliers = np.atleast_1d(np.asarray(self.multipliers, dtype=float))
        self.noise_scales = np.asarray(self.noise_scales, dtype=float)
        if self.noise_scales.ndim == 1:
            self.noise_scales = self.noise_scales[:, None]
        if self.noise_scales.shape[0] != self.multipliers.shape[0]:
            raise ValueError("need one noise row per diffusion step")
        if np.any(self.multipliers == 0.0):
            raise ValueError("drift multipliers must be invertible (nonzero)")
        if np.any(self.noise_scales <= 0.0):
            raise ValueError("noise scales must be positive")

    @property
    def n_d(self) -> int:
        return self.multipliers.shape[0]

    @property
    def dim(self) -> int:
        return self.noise_scales.shape[1]


@dataclass
class ScheduleMoments:
    """Accumulated drift (n_d+1,) and diagonal covariance (n_d+1, dim) by level."""

    drift: np.ndarray
    cov: np.ndarray

    def drift_at(self, tau: int) -> float:
        return float(self.drift[tau])

    def cov_at(self, tau: int) -> np.ndarray:
        return self.cov[tau]

    @property
    def n_d(self) -> int:
        return self.drift.shape[0] - 1


@dataclass
class ModeSet:
    """The multimodal dynamic prior: one control sequence per mode."""

    sequences: np.ndarray
    costs: np.ndarray | None = None
    flags: np.ndarray | None = None
    diagnostics: dict | None = None

    def __post_init__(self):
        self.sequences = np.atleast_2d(np.asarray(self.sequences, dtype=float))

    @property
    def n_m(self) -> int:
        return self.sequences.shape[0]

    def best_index(self) -> int:
        """Minimum sample-average cost; ties broken by lowest mode index."""
        if self.costs is None:
            return 0
        return int(np.argmin(self.costs))


def make_schedule(n_d: int, horizon: int, channel_scales,
                  beta_start: float = 0.1, beta_end: float = 0.4) -> DiffusionSchedule:
    """Truncated DDPM-style schedule: m = sqrt(1-beta), b = sqrt(beta)*sigma_u.

    ``channel_scales`` holds one noise scale per control channel; rows tile it
    across the horizon.  Values are solver tuning knobs (chosen, not from
    paper).
    """
    betas = np.linspace(beta_start, beta_end, n_d)
    sigma_u = np.tile(np.asarray(channel_scales, dtype=float), horizon)
    return DiffusionSchedule(
        multipliers=np.sqrt(1.0 - betas),
        noise_scales=np.sqrt(betas)[:, None] * sigma_u[None, :],
    )


def annealed_schedule(n_d: int, horizon: int, channel_scales,
                      anneal: float = 0.5, normalize: bool = True) -> DiffusionSchedule:
    """Identity-drift schedule with noise shrinking toward the final step.

    With the full-strength reverse map each denoise step is a
    density-weighted mean around the current iterate, so the chain behaves
    as an annealed path-integral optimizer; step 1 uses the smallest noise.
    ``normalize`` rescales the ladder so the accumulated corruption equals
    the channel scales regardless of n_d, keeping the exploration envelope
    comparable across step counts (and leaving n_d = 1 unchanged).
    """
    if not 0.0 < anneal <= 1.0:
        raise ValueError("anneal must be in (0, 1]")
    sigma_u = np.tile(np.asarray(channel_scales, dtype=float), horizon)
    ladder = anneal ** np.arange(n_d - 1, -1, -1.0)
    if normalize:
        ladder = ladder / np.sqrt(np.sum(ladder**2))
    return DiffusionSchedule(
        multipliers=np.ones(n_d),
        noise_scales=ladder[:, None] * sigma_u[None, :],
    )


def mppi_schedule(horizon: int, channel_scales) -> DiffusionSchedule:
    """The single-step reduction kernel: unit drift, noise = channel scales."""
    return annealed_schedule(1, horizon, channel_scales)


def compute_moments(sched: DiffusionSchedule) -> ScheduleMoments:
    """Exact accumulated drift and covariance of the forward chain."""
    n_d, dim = sched.n_d, sched.dim
    drift = np.empty(n_d + 1)
    cov = np.empty((n_d + 1, dim))
    drift[0] = 1.0
    cov[0] = 0.0
    for L in range(1, n_d + 1):
        m = sched.multipliers[L - 1]
        drift[L] = drift[L - 1] * m
        cov[L] = m * m * cov[L - 1] + sched.noise_scales[L - 1] ** 2
    return ScheduleMoments(drift=drift, cov=cov)


def forward_corrupt(mode: np.ndarray, moments: ScheduleMoments, tau: int,
                    rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Sample the level-``tau`` corruption of ``mode`` in one shot.

    Uses the accumulated moments rather than stepping the chain; with
    ``n`` set, returns (n, dim) i.i.d. draws.
    """
    if not 1 <= tau <= moments.n_d:
        raise ValueError("tau must be in 1..n_d")
    mean = moments.drift_at(tau) * np.asarray(mode, dtype=float)
    std = np.sqrt(moments.cov_at(tau))
    shape = mean.shape if n is None else (n,) + mean.shape
    return mean + std * rng.standard_normal(shape)


def sample_dynamic_prior(modes: ModeSet, moments: ScheduleMoments,
                         rng: np.random.Generator) -> ModeSet:
    """Corrupt each (time-shifted) mode to diffusion level n_d."""
    out = np.stack([
        forward_corrupt(modes.sequences[j], moments, moments.n_d, rng)
        for j in range(modes.n_m)
    ])
    return ModeSet(sequences=out)


def importance_samples(u_tau: np.ndarray, moments: ScheduleMoments, tau: int,
                       n_s: int, rng: np.random.Generator) -> np.ndarray:
    """Draw level-0 proposals for the score estimate at level ``tau``.

    The proposal is Gaussian in u^0 with mean drift^{-1} u_tau and covariance
    drift^{-1} cov drift^{-T} (the reparameterized exponent's covariance).
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    a = moments.drift_at(tau)
    mean = np.asarray(u_tau, dtype=float) / a
    std = np.sqrt(moments.cov_at(tau)) / abs(a)
    return mean + std * rng.standard_normal((n_s,) + mean.shape)


def estimate_score(u_tau: np.ndarray, samples: np.ndarray, densities: np.ndarray,
                   moments: ScheduleMoments, tau: int) -> tuple[np.ndarray, bool]:
    """Importance-sampled score of the corrupted optimal density at level tau.

    Returns (score, degenerate); an all-zero density batch yields a zero
    score so denoising degenerates to pure contraction.
    """
    u_tau = np.asarray(u_tau, dtype=float)
    densities = np.asarray(densities, dtype=float)
    total = densities.sum()
    if not np.isfinite(total) or total <= 0.0:
        return np.zeros_like(u_tau), True
    w = densities / total
    mean0 = w @ np.asarray(samples, dtype=float)
    return (moments.drift_at(tau) * mean0 - u_tau) / moments.cov_at(tau), False


def denoise_step(u_tau: np.ndarray, score: np.ndarray, sched: DiffusionSchedule,
                 tau: int, rng: np.random.Generator, mode: str = "ode") -> np.ndarray:
    """One reverse step from level ``tau`` to ``tau - 1``.

    ODE: (I - A) u + 1/2 B B^T score.  SDE: (I - A) u + B B^T score + B z,
    with the final step (tau = 1) left noiseless so the target is not
    smeared; that convention also makes the single-step reduction exactly
    the path-integral weighted average.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    m = sched.multipliers[tau - 1]
    b = sched.noise_scales[tau - 1]
    contracted = (2.0 - m) * np.asarray(u_tau, dtype=float)
    if mode == "ode":
        return contracted + 0.5 * b * b * score
    if mode == "sde":
        out = contracted + b * b * score
        if tau > 1:
            out = out + b * rng.standard_normal(out.shape)
        return out
    if mode == "greedy":
        # Full-strength pull with no noise injection: iterated annealed
        # path-integral refinement.  Exploration comes from the importance
        # proposals alone, so the incumbent is never re-randomized; used by
        # the control planners.
        return contracted + b * b * score
    raise ValueError(f"unknown denoise mode: {mode!r}")


def _eval_density(density_fn, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize the density callback to (densities, costs)."""
    out = density_fn(batch)
    if isinstance(out, tuple):
        dens, costs = out
    else:
        dens = np.asarray(out, dtype=float)
        with np.errstate(divide="ignore"):
            costs = -np.log(np.maximum(dens, 1e-300))
    return np.asarray(dens, dtype=float), np.asarray(costs, dtype=float)


def mpd_solve(modes: ModeSet, density_fn, sched: DiffusionSchedule,
              moments: ScheduleMoments, n_s: int, rng: np.random.Generator,
              mode: str = "ode", prior_samples: np.ndarray | None = None) -> ModeSet:
    """Refine every mode by truncated forward corruption and denoising.

    ``density_fn`` maps an (n, dim) batch to unnormalized optimal densities,
    optionally with their costs as a second array.  Modes are independent;
    each consumes its own child rng stream, so results do not depend on
    evaluation order.  ``prior_samples`` bypasses the dynamic-prior draw with
    given level-n_d sequences.

    A mode whose density evaluation raises keeps its prior-mean sequence and
    is flagged; an all-zero density batch flags the mode but denoising
    continues as pure contraction.
    """
    n_m = modes.n_m
    streams = rng.spawn(n_m)
    current = np.empty_like(modes.sequences)
    costs = np.full(n_m, np.inf)
    flags = np.zeros(n_m, dtype=bool)
    mass = np.zeros(n_m)
    alive = np.ones(n_m, dtype=bool)

    for j in range(n_m):
        if prior_samples is not None:
            current[j] = np.asarray(prior_samples[j], dtype=float)
        else:
            current[j] = forward_corrupt(modes.sequences[j], moments, sched.n_d, streams[j])

    for tau in range(sched.n_d, 0, -1):
        live = np.flatnonzero(alive)
        if live.size == 0:
            break
        samples = [importance_samples(current[j], moments, tau, n_s, streams[j])
                   for j in live]
        # One joint density call for all live modes; the evaluations are
        # independent and pure, so this only changes batching, not results.
        # A raising density_fn falls back to per-mode calls to isolate the
        # failing mode.
        try:
            dens_all, costs_all = _eval_density(density_fn, np.concatenate(samples))
            per_mode = [(dens_all[i * n_s:(i + 1) * n_s], costs_all[i * n_s:(i + 1) * n_s])
                        for i in range(live.size)]
        except Exception:
            per_mode = []
            for i, j in enumerate(live):
                try:
                    per_mode.append(_eval_density(density_fn, samples[i]))
                except Exception:
                    per_mode.append(None)
        for i, j in enumerate(live):
            if per_mode[i] is None:
                alive[j] = False
                current[j] = modes.sequences[j]
                costs[j] = np.inf
                flags[j] = True
                mass[j] = 0.0
                continue
            dens, batch_costs = per_mode[i]
            score, degen = estimate_score(current[j], samples[i], dens, moments, tau)
            flags[j] |= degen
            current[j] = denoise_step(current[j], score, sched, tau, streams[j], mode=mode)
            if not np.all(np.isfinite(current[j])):
                raise FloatingPointError("denoising produced non-finite controls")
            costs[j] = float(np.mean(batch_costs))
            mass[j] = float(dens.sum()) / n_s

    # Selection costs: each refined mode evaluated at its own endpoint (the
    # sequence that would actually be applied), under the same density.
    live = np.flatnonzero(alive)
    if live.size:
        try:
            _, end_costs = _eval_density(density_fn, current[live])
            costs[live] = end_costs
        except Exception:
            pass  # keep batch-average costs when the endpoint eval fails

    return ModeSet(sequences=current, costs=costs, flags=flags,
                   diagnostics={"density_mass": mass})


def mppi_update(prev: np.ndarray, density_fn, cov: np.ndarray, n_s: int,
                rng: np.random.Generator,
                samples: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
    """Single-step path-integral update: density-weighted mean of Gaussian draws.

    ``cov`` is the diagonal of the sampling covariance.  Returns
    (sequence, degenerate); all-zero densities return ``prev`` flagged.
    """
    prev = np.asarray(prev, dtype=float)
    if samples is None:
        samples = prev + np.sqrt(np.asarray(cov, dtype=float)) * \
            rng.standard_normal((n_s,) + prev.shape)
    dens, _ = _eval_density(density_fn, samples)
    total = dens.sum()
    if not np.isfinite(total) or total <= 0.0:
        return prev.copy(), True
    return (dens / total) @ samples, False


def seq_to_matrix(seq: np.ndarray, n_u: int = 2) -> np.ndarray:
    """(N*n_u,) flattened sequence -> (N, n_u) per-step controls."""
    return np.asarray(seq, dtype=float).reshape(-1, n_u)


def matrix_to_seq(mat: np.ndarray) -> np.ndarray:
    return np.asarray(mat, dtype=float).reshape(-1)
