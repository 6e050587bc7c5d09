"""Highway-merge environment: lane geometry, indicator-penalty costs,
merge-completion logic, and scenario configuration.

All geometry is at small-vehicle (tenth-scale) dimensions matching the
default dynamics config; every constant here is configuration, chosen, not
from paper, unless noted.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .belief import ParameterPrior, default_prior
from .dynamics import (
    DriverParams,
    DynamicsConfig,
    EgoControl,
    JointState,
    NoiseModel,
    VehicleGeometry,
    VehicleState,
)


@dataclass
class CostConfig:
    """Quadratic tracking weights, control effort, indicator penalty, temperature.

    The goal state is [v_goal, 0, 0, 0] over the ego's (v, psi, x, y); the
    stage X weight is normally zero (progress is not tracked, lateral
    position is).
    """

    q_v: float = 2.5
    q_psi: float = 1.0
    q_x: float = 0.0
    q_y: float = 2.0
    qf_v: float = 1.0
    qf_psi: float = 0.3
    qf_x: float = 0.0
    qf_y: float = 6.0
    r_accel: float = 0.10
    r_steer: float = 1.0
    q_pen: float = 250.0
    v_goal: float = 1.7
    lam: float = 4.0

    def __post_init__(self):
        if min(self.q_v, self.q_psi, self.q_x, self.q_y,
               self.qf_v, self.qf_psi, self.qf_x, self.qf_y) < 0:
            raise ValueError("state weights must be nonnegative")
        if self.r_accel <= 0 or self.r_steer <= 0:
            raise ValueError("control weights must be positive")
        if self.q_pen <= 0:
            raise ValueError("q_pen must be positive")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")

    def q_diag(self) -> np.ndarray:
        return np.array([self.q_v, self.q_psi, self.q_x, self.q_y])

    def qf_diag(self) -> np.ndarray:
        return np.array([self.qf_v, self.qf_psi, self.qf_x, self.qf_y])

    def r_diag(self) -> np.ndarray:
        return np.array([self.r_accel, self.r_steer])

    def goal(self) -> np.ndarray:
        return np.array([self.v_goal, 0.0, 0.0, 0.0])


@dataclass
class LaneConfig:
    main_y: float = 0.0
    merge_y: float = -0.6
    width: float = 0.6
    road_y_min: float = -1.05
    road_y_max: float = 0.3


@dataclass
class SolverConfig:
    """Planner hyperparameters (chosen, not from paper)."""

    horizon: int = 30
    n_modes: int = 3
    n_diffusion: int = 2
    n_samples: int = 96
    n_hat: int = 5
    n_particles: int = 400
    sigma_accel: float = 0.3
    sigma_steer: float = 0.05
    anneal: float = 0.5
    denoise_mode: str = "greedy"


@dataclass
class ScenarioConfig:
    n_v: int = 2
    dt: float = 0.1
    lanes: LaneConfig = field(default_factory=LaneConfig)
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    merge_window: float = 15.0
    trial_time_cap: float = 60.0
    # Anisotropic planning inflation of collision boxes: generous along the
    # lane, slim across it so the probing corridor beside traffic stays open.
    plan_margin_x: float = 0.10
    plan_margin_y: float = 0.05
    merge_y_tol: float = 0.10
    merge_psi_tol: float = 0.25
    ahead_of_lead_is_proper: bool = True
    ego_start: VehicleState = field(default_factory=lambda: VehicleState(1.2, 0.0, 0.0, -0.6))
    traffic_start: list[VehicleState] = field(default_factory=lambda: [
        VehicleState(1.0, 0.0, 0.6, 0.0),
        VehicleState(1.0, 0.0, 1.95, 0.0),
    ])
    ground_truth: list[DriverParams] = field(default_factory=lambda: [
        DriverParams(1.1, 0.6, 0.3, 1.2, 1.4, 0.05),
        DriverParams(1.1, 0.6, 0.3, 1.2, 1.4, 0.90),
    ])
    friendly_index: int | str = 2
    noise_variances: list[float] = field(
        default_factory=lambda: [4e-4, 4e-5, 4e-5, 4e-5])
    # Likelihood tempering: the filter evaluates transition densities under
    # an inflated covariance (std x this factor) so parameter mismatch does
    # not cause winner-take-all weight collapse onto single particles.
    filter_noise_scale: float = 3.0
    prior_friendly_prob: float = 0.5
    resample_ess_fraction: float = 0.0

    def __post_init__(self):
        if self.merge_window <= 0:
            raise ValueError("merge window must be positive")
        if len(self.traffic_start) != self.n_v or len(self.ground_truth) != self.n_v:
            raise ValueError("traffic_start/ground_truth must have n_v entries")
        gains = [p.yield_gain for p in self.ground_truth]
        if self.friendly_index != "human" and sum(g > 0.5 for g in gains) != 1:
            raise ValueError("exactly one friendly vehicle per trial")

    def noise_model(self) -> NoiseModel:
        return NoiseModel.diagonal(np.tile(self.noise_variances, self.n_v + 1))

    def filter_noise_model(self) -> NoiseModel:
        scale = self.filter_noise_scale ** 2
        return NoiseModel.diagonal(scale * np.tile(self.noise_variances, self.n_v + 1))

    def prior(self) -> ParameterPrior:
        return default_prior(self.n_v, self.prior_friendly_prob)

    def initial_state(self) -> JointState:
        return JointState(
            ego=VehicleState(**asdict(self.ego_start)),
            traffic=[VehicleState(**asdict(s)) for s in self.traffic_start],
        )


# ---------------------------------------------------------------------------
# Cost terms.  Batch variants take states (..., n_veh, 4) / controls (..., 2)
# and return (...,); the scalar spec operations wrap them.

def batch_ego_quadratic(ego: np.ndarray, u: np.ndarray, cfg: CostConfig,
                        q=None, r=None, goal=None) -> np.ndarray:
    dx = ego - (cfg.goal() if goal is None else goal)
    state_term = np.sum(dx * dx * (cfg.q_diag() if q is None else q), axis=-1)
    return state_term + np.sum(u * u * (cfg.r_diag() if r is None else r), axis=-1)


def batch_terminal_quadratic(ego: np.ndarray, cfg: CostConfig) -> np.ndarray:
    dx = ego - cfg.goal()
    return np.sum(dx * dx * cfg.qf_diag(), axis=-1)


def batch_indicators(states: np.ndarray, scen: ScenarioConfig,
                     margin_x: float = 0.0, margin_y: float = 0.0
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(collision, off_road, invalid_merge) boolean arrays of batch shape.

    The margins inflate the footprints; planners use them to keep clearance
    while the simulator's hard check runs at the true extents.
    """
    g = scen.dynamics.geometry
    lanes = scen.lanes
    ego = states[..., 0, :]
    traffic = states[..., 1:, :]

    dx = np.abs(ego[..., None, 2] - traffic[..., 2])
    dy = np.abs(ego[..., None, 3] - traffic[..., 3])
    collision = np.any((dx < 2 * (g.half_length + margin_x))
                       & (dy < 2 * (g.half_width + margin_y)), axis=-1)

    off_road = ((ego[..., 3] + g.half_width > lanes.road_y_max)
                | (ego[..., 3] - g.half_width < lanes.road_y_min))

    in_main = np.abs(ego[..., 3] - lanes.main_y) < lanes.width / 2 + margin_y
    x_e = ego[..., 2]
    xs = traffic[..., 2]
    between = np.any((xs[..., :-1] < x_e[..., None]) & (x_e[..., None] < xs[..., 1:]), axis=-1)
    ahead = x_e > xs[..., -1]
    proper = between | (ahead if scen.ahead_of_lead_is_proper else np.zeros_like(ahead))
    invalid = in_main & ~proper

    return collision, off_road, invalid


def batch_penalty(states: np.ndarray, scen: ScenarioConfig,
                  margin_x: float = 0.0, margin_y: float = 0.0) -> np.ndarray:
    coll, road, inval = batch_indicators(states, scen, margin_x, margin_y)
    return (coll.astype(float) + road.astype(float) + inval.astype(float)) * scen.cost.q_pen


def penalty(x: JointState, scen: ScenarioConfig) -> float:
    """Q_pen times the count of fired indicators (collision, road, improper merge)."""
    return float(batch_penalty(x.as_matrix(), scen))


def stage_cost(x: JointState, u: EgoControl, cfg: CostConfig, scen: ScenarioConfig) -> float:
    """Quadratic ego tracking + control effort + indicator penalties."""
    return float(batch_ego_quadratic(x.ego.as_array(), u.as_array(), cfg)
                 + batch_penalty(x.as_matrix(), scen))


def terminal_cost(x: JointState, cfg: CostConfig, scen: ScenarioConfig) -> float:
    return float(batch_terminal_quadratic(x.ego.as_array(), cfg)
                 + batch_penalty(x.as_matrix(), scen))


def clearance_to_traffic(x: JointState, geom: VehicleGeometry) -> float:
    """Smallest rectangle-boundary separation between ego and any traffic vehicle."""
    ego = x.ego
    best = np.inf
    for t in x.traffic:
        dx = max(abs(ego.x - t.x) - 2 * geom.half_length, 0.0)
        dy = max(abs(ego.y - t.y) - 2 * geom.half_width, 0.0)
        best = min(best, float(np.hypot(dx, dy)))
    return best


def detect_merge_complete(x: JointState, scen: ScenarioConfig, already: bool = False) -> bool:
    """Ego settled in the main lane inside a proper gap; sticky once true."""
    if already:
        return True
    lanes, g = scen.lanes, scen.dynamics.geometry
    ego = x.ego
    if abs(ego.y - lanes.main_y) > scen.merge_y_tol:
        return False
    if abs(ego.psi) > scen.merge_psi_tol:
        return False
    xs = [t.x for t in x.traffic]
    ego_front, ego_rear = ego.x + g.half_length, ego.x - g.half_length
    for i in range(len(xs) - 1):
        if xs[i] + g.half_length < ego_rear and ego_front < xs[i + 1] - g.half_length:
            return True
    if scen.ahead_of_lead_is_proper and ego_rear > xs[-1] + g.half_length:
        return True
    return False
