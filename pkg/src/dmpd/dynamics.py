"""Multi-vehicle dynamics: kinematic bicycle ego, reactive traffic drivers,
clamped stochastic transitions, and the transition log-density.

Scalar operations work on the dataclasses below; the ``batch_*`` functions
are the vectorized kernels the planners use (states stacked as arrays with
shape ``(..., n_veh, 4)``).  Scalar ops delegate to the batch kernels so the
two paths cannot drift apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Per-vehicle state layout: [v, psi, x, y].
STATE_DIM = 4
# Driver parameter layout: [v_desired, time_headway, min_gap, accel_max,
# decel_comfort, yield_gain].
PARAM_DIM = 6


@dataclass
class VehicleState:
    """Kinematic state of one vehicle: speed, heading, planar position."""

    v: float
    psi: float
    x: float
    y: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.psi, self.x, self.y], dtype=float)

    @classmethod
    def from_array(cls, a) -> "VehicleState":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass
class JointState:
    """Ego plus traffic vehicles; traffic index 0 is rear-most, -1 is lead."""

    ego: VehicleState
    traffic: list[VehicleState]

    @property
    def n_v(self) -> int:
        return len(self.traffic)

    def as_vector(self) -> np.ndarray:
        """Stacked [ego, traffic_1, ..., traffic_nv] state vector."""
        return self.as_matrix().reshape(-1)

    def as_matrix(self) -> np.ndarray:
        """(n_veh, 4) array, ego in row 0."""
        rows = [self.ego.as_array()] + [s.as_array() for s in self.traffic]
        return np.stack(rows)

    @classmethod
    def from_vector(cls, vec, n_v: int) -> "JointState":
        return cls.from_matrix(np.asarray(vec, dtype=float).reshape(n_v + 1, STATE_DIM))

    @classmethod
    def from_matrix(cls, m) -> "JointState":
        return cls(
            ego=VehicleState.from_array(m[0]),
            traffic=[VehicleState.from_array(row) for row in m[1:]],
        )


@dataclass
class EgoControl:
    """Planned longitudinal acceleration and steering angle.

    Raw planned values may exceed the actuation bounds; clamping happens
    inside the transition, not here.
    """

    accel: float
    steer: float

    def as_array(self) -> np.ndarray:
        return np.array([self.accel, self.steer], dtype=float)


@dataclass
class DriverParams:
    """Behavior vector of one traffic vehicle.

    ``yield_gain`` in [0, 1] scales how strongly the driver treats a
    merge-signaling ego as a virtual leader; 0 never yields.
    """

    v_desired: float
    time_headway: float
    min_gap: float
    accel_max: float
    decel_comfort: float
    yield_gain: float

    def __post_init__(self):
        for name in ("v_desired", "time_headway", "min_gap", "accel_max", "decel_comfort"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"DriverParams.{name} must be > 0")
        if self.yield_gain < 0.0:
            raise ValueError("DriverParams.yield_gain must be >= 0")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.v_desired, self.time_headway, self.min_gap,
             self.accel_max, self.decel_comfort, self.yield_gain],
            dtype=float,
        )

    @classmethod
    def from_array(cls, a) -> "DriverParams":
        return cls(*(float(x) for x in a))


@dataclass
class VehicleGeometry:
    """Axle offsets from the center of mass and collision half-extents."""

    l_f: float
    l_r: float
    half_length: float
    half_width: float

    def __post_init__(self):
        if min(self.l_f, self.l_r, self.half_length, self.half_width) <= 0.0:
            raise ValueError("VehicleGeometry fields must be > 0")


class NoiseModel:
    """Additive Gaussian state noise N(0, sigma_w) over the stacked state.

    Non-positive-definite covariance is rejected here, at construction,
    so the transition density never fails at call time.
    """

    def __init__(self, sigma_w):
        sigma_w = np.asarray(sigma_w, dtype=float)
        if sigma_w.ndim != 2 or sigma_w.shape[0] != sigma_w.shape[1]:
            raise ValueError("sigma_w must be a square matrix")
        if not np.allclose(sigma_w, sigma_w.T, atol=1e-12):
            raise ValueError("sigma_w must be symmetric")
        try:
            chol = np.linalg.cholesky(sigma_w)
        except np.linalg.LinAlgError as e:
            raise ValueError("sigma_w must be positive definite") from e
        self.sigma_w = sigma_w
        self._chol = chol
        self._log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
        off_diag = sigma_w - np.diag(np.diag(sigma_w))
        self._diag = np.diag(sigma_w).copy() if not np.any(off_diag) else None

    @property
    def dim(self) -> int:
        return self.sigma_w.shape[0]

    @classmethod
    def diagonal(cls, variances) -> "NoiseModel":
        return cls(np.diag(np.asarray(variances, dtype=float)))

    def sample(self, rng: np.random.Generator, shape=()) -> np.ndarray:
        """Draw noise of shape ``shape + (dim,)``."""
        z = rng.standard_normal(tuple(shape) + (self.dim,))
        if self._diag is not None:
            return z * np.sqrt(self._diag)
        return z @ self._chol.T

    def quadform(self, residual) -> np.ndarray:
        """r^T sigma_w^{-1} r over the last axis of ``residual``."""
        r = np.asarray(residual, dtype=float)
        if self._diag is not None:
            return np.sum(r * r / self._diag, axis=-1)
        flat = r.reshape(-1, self.dim)
        y = np.linalg.solve(self._chol, flat.T).T
        return np.sum(y * y, axis=-1).reshape(r.shape[:-1])

    def logpdf(self, residual) -> float | np.ndarray:
        """Gaussian log-density of a residual under N(0, sigma_w)."""
        q = self.quadform(residual)
        return -0.5 * (self.dim * math.log(2.0 * math.pi) + self._log_det + q)


@dataclass
class DynamicsConfig:
    """Physical constants shared by every transition evaluation.

    Actuation bounds and the yield-gate geometry are config with
    F1-Tenth-plausible defaults (chosen, not from paper).
    """

    geometry: VehicleGeometry = field(
        default_factory=lambda: VehicleGeometry(l_f=0.17, l_r=0.16, half_length=0.28, half_width=0.15)
    )
    accel_min: float = -3.0
    accel_max: float = 3.0
    steer_min: float = -0.35
    steer_max: float = 0.35
    main_lane_y: float = 0.0
    # Yield gate: ego counts as signaling a merge in front of a vehicle when
    # laterally within yield_lat_gate of the main-lane center and its rear
    # bumper is ahead of that vehicle's front bumper minus yield_rear_margin.
    yield_lat_gate: float = 0.44
    yield_rear_margin: float = 0.80
    idm_exponent: float = 4.0
    idm_range: float = 8.0
    gap_floor: float = 0.05


def slip_angle(steer: float, geom: VehicleGeometry) -> float:
    """Kinematic slip angle; steer is expected within (-pi/2, pi/2)."""
    return math.atan(geom.l_r / (geom.l_f + geom.l_r) * math.tan(steer))


def bicycle_derivative(state: VehicleState, accel: float, steer: float,
                       geom: VehicleGeometry) -> VehicleState:
    """Time-derivative (v_dot, psi_dot, x_dot, y_dot) of the kinematic bicycle."""
    beta = slip_angle(steer, geom)
    return VehicleState(
        v=accel,
        psi=math.sin(beta) * state.v / geom.l_r,
        x=state.v * math.cos(state.psi + beta),
        y=state.v * math.sin(state.psi + beta),
    )


def batch_traffic_accel(states: np.ndarray, thetas: np.ndarray,
                        cfg: DynamicsConfig) -> np.ndarray:
    """Reactive accelerations for all traffic vehicles, vectorized.

    ``states``: (..., n_veh, 4) with ego in row 0, rear-to-lead order after.
    ``thetas``: (..., n_v, 6) broadcastable against ``states``.

    The driver model is IDM car-following toward the in-lane leader plus one
    merge-reactive term: a laterally-close, alongside-or-ahead ego is treated
    as a virtual leader whose interaction is scaled by yield_gain.  Output is
    clamped to [-decel_comfort, accel_max] per vehicle.
    """
    hl = cfg.geometry.half_length
    v = states[..., 1:, 0]
    x = states[..., 1:, 2]
    ego_v = states[..., 0:1, 0]
    ego_x = states[..., 0:1, 2]
    ego_y = states[..., 0:1, 3]

    v0 = thetas[..., 0]
    headway = thetas[..., 1]
    s0 = thetas[..., 2]
    a_max = thetas[..., 3]
    b = thetas[..., 4]
    yg = thetas[..., 5]
    brake_scale = 2.0 * np.sqrt(a_max * b)

    accel = a_max * (1.0 - (v / v0) ** cfg.idm_exponent)

    # Car-following toward the next vehicle up the lane (lead has no leader).
    gap = (x[..., 1:] - hl) - (x[..., :-1] + hl)
    in_range = gap <= cfg.idm_range
    gap_safe = np.maximum(gap, cfg.gap_floor)
    dv = v[..., :-1] - v[..., 1:]
    s_star = s0[..., :-1] + np.maximum(
        0.0, v[..., :-1] * headway[..., :-1] + v[..., :-1] * dv / brake_scale[..., :-1]
    )
    accel[..., :-1] -= np.where(
        in_range, a_max[..., :-1] * (s_star / gap_safe) ** 2, 0.0
    )

    # Merge-reactive yield term: ego as virtual leader, scaled by yield_gain.
    # The term is capped at yield_gain * decel_comfort so willingness to
    # yield, not raw proximity, separates friendly from aggressive drivers.
    ego_rear = ego_x - hl
    lat_ok = np.abs(ego_y - cfg.main_lane_y) < cfg.yield_lat_gate
    lon_ok = ego_rear > (x + hl) - cfg.yield_rear_margin
    not_passed = np.ones_like(lon_ok, dtype=bool)
    not_passed[..., :-1] = ego_x < x[..., 1:]
    gate = lat_ok & lon_ok & not_passed

    gap_e = np.maximum(ego_rear - (x + hl), cfg.gap_floor)
    dv_e = v - ego_v
    s_star_e = s0 + np.maximum(0.0, v * headway + v * dv_e / brake_scale)
    yield_term = np.minimum(yg * a_max * (s_star_e / gap_e) ** 2, yg * b)
    accel -= np.where(gate, yield_term, 0.0)

    return np.clip(accel, -b, a_max)


def traffic_accel(joint: JointState, params: DriverParams, vehicle_index: int,
                  cfg: DynamicsConfig | None = None) -> float:
    """Acceleration of traffic vehicle ``vehicle_index`` (1-based, 1 = rear-most)."""
    if cfg is None:
        cfg = DynamicsConfig()
    if not 1 <= vehicle_index <= joint.n_v:
        raise IndexError(f"vehicle_index {vehicle_index} out of range 1..{joint.n_v}")
    thetas = np.zeros((joint.n_v, PARAM_DIM))
    thetas[:] = params.as_array()  # only row vehicle_index-1 is read back
    out = batch_traffic_accel(joint.as_matrix(), thetas, cfg)
    return float(out[vehicle_index - 1])


def batch_deterministic_step(states: np.ndarray, ego_u: np.ndarray,
                             thetas: np.ndarray, dt: float,
                             cfg: DynamicsConfig) -> np.ndarray:
    """One clamped Euler step without noise, vectorized.

    ``ego_u``: (..., 2) raw (accel, steer); clamped here.  Traffic vehicles
    keep zero steering but integrate with their true heading.  Speeds are
    floored at zero.
    """
    geom = cfg.geometry
    batch = np.broadcast_shapes(states.shape[:-2], ego_u.shape[:-1], thetas.shape[:-2])
    states = np.broadcast_to(states, batch + states.shape[-2:])
    ego_u = np.broadcast_to(ego_u, batch + (2,))
    thetas = np.broadcast_to(thetas, batch + thetas.shape[-2:])

    a_e = np.clip(ego_u[..., 0], cfg.accel_min, cfg.accel_max)
    d_e = np.clip(ego_u[..., 1], cfg.steer_min, cfg.steer_max)
    beta = np.arctan(geom.l_r / (geom.l_f + geom.l_r) * np.tan(d_e))

    a_traffic = batch_traffic_accel(states, thetas, cfg)

    v = states[..., 0]
    psi = states[..., 1]
    accel = np.concatenate([a_e[..., None], a_traffic], axis=-1)
    heading = psi.copy()
    heading[..., 0] += beta

    nxt = np.empty(states.shape, dtype=float)
    nxt[..., 0] = np.maximum(v + accel * dt, 0.0)
    nxt[..., 1] = psi
    nxt[..., 0, 1] = psi[..., 0] + np.sin(beta) * v[..., 0] / geom.l_r * dt
    nxt[..., 2] = states[..., 2] + v * np.cos(heading) * dt
    nxt[..., 3] = states[..., 3] + v * np.sin(heading) * dt
    return nxt


def deterministic_step(joint: JointState, u: EgoControl, theta: list[DriverParams],
                       dt: float, cfg: DynamicsConfig | None = None) -> JointState:
    """Noise-free clamped Euler step of the full scene."""
    if cfg is None:
        cfg = DynamicsConfig()
    if len(theta) != joint.n_v:
        raise ValueError("theta must have one entry per traffic vehicle")
    thetas = np.stack([p.as_array() for p in theta])
    nxt = batch_deterministic_step(joint.as_matrix(), u.as_array(), thetas, dt, cfg)
    return JointState.from_matrix(nxt)


def step(joint: JointState, u: EgoControl, theta: list[DriverParams], dt: float,
         noise: NoiseModel, rng: np.random.Generator,
         cfg: DynamicsConfig | None = None) -> JointState:
    """Stochastic transition: deterministic step plus Gaussian state noise.

    Speeds are floored at zero after the noise is added; traffic does not
    reverse.
    """
    det = deterministic_step(joint, u, theta, dt, cfg)
    vec = det.as_vector() + noise.sample(rng)
    vec = vec.reshape(joint.n_v + 1, STATE_DIM)
    vec[:, 0] = np.maximum(vec[:, 0], 0.0)
    return JointState.from_matrix(vec)


def transition_logpdf(next_state: JointState, current: JointState, u: EgoControl,
                      theta: list[DriverParams], dt: float, noise: NoiseModel,
                      cfg: DynamicsConfig | None = None) -> float:
    """Log-density of ``next_state`` under the one-step transition model."""
    det = deterministic_step(current, u, theta, dt, cfg)
    residual = next_state.as_vector() - det.as_vector()
    return float(noise.logpdf(residual))
