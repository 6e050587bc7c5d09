"""Closed-loop trial execution, trace recording, and batch metrics."""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .belief import ParticleSet, belief_entropy, friendly_probability, init_particles, update_weights
from .controllers import BasePlanner, make_planner
from .dynamics import DriverParams, EgoControl, JointState, VehicleState, step
from .scenario import (
    ScenarioConfig,
    batch_indicators,
    clearance_to_traffic,
    detect_merge_complete,
)

TRACE_SCHEMA_VERSION = 1

# Table-1-style metric column names used in the exported CSV.
METRIC_COLUMNS = [
    "Merge Success Rate",
    "Ave. Merge Dist. (m)",
    "Ave. Min. Distance (m)",
    "Ave. Acceleration (m/s^2)",
]


@dataclass
class TrialResult:
    """Per-trial metrics; failed merges carry the window length as distance."""

    merge_success: bool
    merge_distance: float
    min_distance: float
    avg_abs_accel: float
    wall_time_per_cycle: float
    steps: int
    end_reason: str

    def metrics_row(self) -> dict:
        return {
            "Merge Success Rate": 1.0 if self.merge_success else 0.0,
            "Ave. Merge Dist. (m)": self.merge_distance,
            "Ave. Min. Distance (m)": self.min_distance,
            "Ave. Acceleration (m/s^2)": self.avg_abs_accel,
        }


@dataclass
class TraceRecord:
    """One schema-versioned simulation record (wall-clock free, reproducible)."""

    t: float
    state: dict
    control: dict | None
    belief: dict
    diagnostics: dict
    events: dict

    def to_json(self) -> str:
        payload = {
            "schema_version": TRACE_SCHEMA_VERSION,
            "t": round(self.t, 9),
            "state": self.state,
            "control": self.control,
            "belief": self.belief,
            "diagnostics": self.diagnostics,
            "events": self.events,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def state_payload(x: JointState) -> dict:
    return {
        "ego": list(x.ego.as_array()),
        "traffic": [list(t.as_array()) for t in x.traffic],
    }


def belief_payload(belief: ParticleSet, n_v: int) -> dict:
    return {
        "friendly_prob": [friendly_probability(belief.particles, belief.weights, i)
                          for i in range(1, n_v + 1)],
        "entropy": belief_entropy(belief.weights),
        "degenerate": belief.degenerate,
    }


def _diag_payload(diag: dict) -> dict:
    return {
        "mode_costs": [float(c) for c in np.atleast_1d(diag["mode_costs"])],
        "selected_mode": int(diag["selected_mode"]),
        "selected_cost": float(diag["selected_cost"]),
        "density_mass": [float(m) for m in np.atleast_1d(diag["density_mass"])],
        "pred_weight_entropy": [float(h) for h in diag["pred_weight_entropy"]],
        "weight_degenerate": bool(diag["weight_degenerate"]),
    }


@dataclass
class HookContext:
    """Mutable view given to the per-step hook in interactive mode."""

    step_index: int
    sim_time: float
    state: JointState
    theta: list
    scen: ScenarioConfig


def run_trial(scen: ScenarioConfig, controller: str | BasePlanner, seed: int,
              trace_path: str | Path | None = None,
              step_hook=None) -> tuple[TrialResult, list[TraceRecord]]:
    """Closed-loop simulation: observe, update belief, plan, act, step world.

    Terminates on merge completion, window end, collision, or the time cap.
    ``step_hook(ctx)`` runs before each planning cycle and may mutate the
    ground-truth parameters (the interactive friendly-vehicle channel).
    Identical seeds produce byte-identical traces.
    """
    root = np.random.default_rng(seed)
    r_belief, r_world, r_plan_master = root.spawn(3)

    planner = make_planner(controller, scen) if isinstance(controller, str) else controller
    noise = scen.noise_model()
    filter_noise = scen.filter_noise_model()
    belief = init_particles(scen.prior(), scen.solver.n_particles, r_belief)
    x = scen.initial_state()
    theta = list(scen.ground_truth)
    start_x = x.ego.x

    merged = False
    min_dist = clearance_to_traffic(x, scen.dynamics.geometry)
    merge_distance = scen.merge_window
    abs_accels: list[float] = []
    wall_times: list[float] = []
    records: list[TraceRecord] = []
    end_reason = "time_cap"
    max_steps = int(round(scen.trial_time_cap / scen.dt))

    k = 0
    for k in range(max_steps):
        t = k * scen.dt
        if step_hook is not None:
            step_hook(HookContext(k, t, x, theta, scen))

        t0 = time.perf_counter()
        u, diag = planner.plan(x, belief, r_plan_master.spawn(1)[0])
        wall_times.append(time.perf_counter() - t0)

        applied = EgoControl(
            accel=float(np.clip(u.accel, scen.dynamics.accel_min, scen.dynamics.accel_max)),
            steer=float(np.clip(u.steer, scen.dynamics.steer_min, scen.dynamics.steer_max)),
        )
        abs_accels.append(abs(applied.accel))

        records.append(TraceRecord(
            t=t,
            state=state_payload(x),
            control={"accel": applied.accel, "steer": applied.steer},
            belief=belief_payload(belief, scen.n_v),
            diagnostics=_diag_payload(diag),
            events={},
        ))

        x_next = step(x, u, theta, scen.dt, noise, r_world, scen.dynamics)
        belief = update_weights(belief, x_next, x, u, scen.dt, filter_noise, scen.dynamics)
        x = x_next
        min_dist = min(min_dist, clearance_to_traffic(x, scen.dynamics.geometry))

        collision, _, _ = batch_indicators(x.as_matrix(), scen)
        if bool(collision):
            end_reason = "collision"
            break
        travelled = x.ego.x - start_x
        was_merged = merged
        merged = detect_merge_complete(x, scen, already=merged) and travelled <= scen.merge_window
        if merged and not was_merged:
            merge_distance = travelled
            end_reason = "merged"
            break
        if travelled > scen.merge_window:
            end_reason = "window_end"
            break

    final_events = {
        "merged": merged,
        "collision": end_reason == "collision",
        "window_end": end_reason == "window_end",
        "time_cap": end_reason == "time_cap",
        "end_reason": end_reason,
    }
    records.append(TraceRecord(
        t=(k + 1) * scen.dt,
        state=state_payload(x),
        control=None,
        belief=belief_payload(belief, scen.n_v),
        diagnostics={},
        events=final_events,
    ))

    result = TrialResult(
        merge_success=merged,
        merge_distance=merge_distance if merged else scen.merge_window,
        min_distance=min_dist,
        avg_abs_accel=float(np.mean(abs_accels)) if abs_accels else 0.0,
        wall_time_per_cycle=float(np.median(wall_times)) if wall_times else 0.0,
        steps=len(abs_accels),
        end_reason=end_reason,
    )
    if trace_path is not None:
        write_trace(records, trace_path)
    return result, records


def write_trace(records: list[TraceRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def randomize_scenario(template: ScenarioConfig, rng: np.random.Generator) -> ScenarioConfig:
    """Trial variation: friendly assignment, driver-parameter jitter, ego start.

    The randomized design stands in for the hardware campaign's unreported
    per-trial start locations and parameter variations.
    """
    scen = copy.deepcopy(template)
    friendly = int(rng.integers(1, scen.n_v + 1))
    scen.friendly_index = friendly
    lead_speed = float(rng.uniform(0.95, 1.1))
    # Followers desire more speed than the lead allows, so the platoon stays
    # congested unless someone yields.  Headways are derived from a drawn
    # target equilibrium gap, guaranteeing a non-mergeable initial platoon.
    params = []
    gaps = []
    for i in range(1, scen.n_v + 1):
        v_des = lead_speed if i == scen.n_v else lead_speed + float(rng.uniform(0.15, 0.30))
        min_gap = float(rng.uniform(0.18, 0.28))
        if i < scen.n_v:
            target_gap = float(rng.uniform(0.72, 0.92))
            s_star = target_gap * float(np.sqrt(1.0 - (lead_speed / v_des) ** 4))
            headway = max((s_star - min_gap) / lead_speed, 0.15)
            gaps.append(target_gap)
        else:
            headway = float(rng.uniform(0.25, 0.40))
        params.append(DriverParams(
            v_desired=v_des,
            time_headway=headway,
            min_gap=min_gap,
            accel_max=1.2,
            decel_comfort=1.2,
            yield_gain=float(rng.uniform(0.75, 1.0)) if i == friendly
            else float(rng.uniform(0.0, 0.08)),
        ))
    scen.ground_truth = params
    positions = [scen.traffic_start[0].x]
    for gap in gaps:
        positions.append(positions[-1] + 2 * scen.dynamics.geometry.half_length + gap)
    scen.traffic_start = [VehicleState(lead_speed, 0.0, p, scen.lanes.main_y)
                          for p in positions]
    span = positions[-1] - positions[0]
    scen.ego_start = VehicleState(
        v=lead_speed,
        psi=0.0,
        x=positions[0] + float(rng.uniform(-0.8, span + 0.4)),
        y=scen.lanes.merge_y,
    )
    return scen


def run_batch(template: ScenarioConfig, controller: str, n_trials: int,
              base_seed: int = 0, out_dir: str | Path | None = None,
              randomize: bool = True) -> dict:
    """Seeded batch of trials with Table-1-style aggregate metrics."""
    results = []
    for i in range(n_trials):
        trial_seed = base_seed + i
        scen = randomize_scenario(template, np.random.default_rng(trial_seed)) \
            if randomize else template
        trace_path = None
        if out_dir is not None:
            trace_path = Path(out_dir) / f"{controller}_trial{i:03d}_seed{trial_seed}.jsonl"
        result, _ = run_trial(scen, controller, trial_seed, trace_path=trace_path)
        results.append(result)

    aggregates = {
        "controller": controller,
        "n_trials": n_trials,
        "Merge Success Rate": float(np.mean([r.merge_success for r in results])),
        "Ave. Merge Dist. (m)": float(np.mean([r.merge_distance for r in results])),
        "Ave. Min. Distance (m)": float(np.mean([r.min_distance for r in results])),
        "Ave. Acceleration (m/s^2)": float(np.mean([r.avg_abs_accel for r in results])),
        "results": results,
    }
    return aggregates


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
    """Delimiter-separated metrics table with Table-1 row names as headers."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["method"] + METRIC_COLUMNS
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            cells = [str(row["controller"])] + [repr(float(row[c])) for c in METRIC_COLUMNS]
            f.write(",".join(cells) + "\n")
