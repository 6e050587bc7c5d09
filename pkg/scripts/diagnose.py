#!/usr/bin/env python3
"""Step-by-step console view of one trial for tuning."""

import argparse

import numpy as np

from dmpd.belief import friendly_probability, init_particles, update_weights
from dmpd.controllers import make_planner
from dmpd.dynamics import EgoControl, step
from dmpd.scenario import ScenarioConfig, batch_indicators, detect_merge_complete
from dmpd.trial import randomize_scenario


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--controller", default="dmpd")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--every", type=int, default=5)
    ap.add_argument("--vgoal", type=float, default=None)
    args = ap.parse_args()

    scen = randomize_scenario(ScenarioConfig(), np.random.default_rng(args.seed))
    if args.vgoal is not None:
        scen.cost.v_goal = args.vgoal
    gains = [round(p.yield_gain, 2) for p in scen.ground_truth]
    print(f"friendly={scen.friendly_index} gains={gains} "
          f"traffic_x={[round(s.x,2) for s in scen.traffic_start]} "
          f"traffic_v={round(scen.traffic_start[0].v,2)} ego_x={scen.ego_start.x:.2f}")

    root = np.random.default_rng(args.seed)
    r_belief, r_world, r_plan = root.spawn(3)
    planner = make_planner(args.controller, scen)
    noise = scen.noise_model()
    fnoise = scen.filter_noise_model()
    belief = init_particles(scen.prior(), scen.solver.n_particles, r_belief)
    x = scen.initial_state()
    theta = list(scen.ground_truth)
    start_x = x.ego.x
    g = scen.dynamics.geometry
    merged = False

    for k in range(int(scen.trial_time_cap / scen.dt)):
        u, diag = planner.plan(x, belief, r_plan.spawn(1)[0])
        if k % args.every == 0:
            gaps = [round((x.traffic[i + 1].x - g.half_length) - (x.traffic[i].x + g.half_length), 2)
                    for i in range(scen.n_v - 1)]
            probs = [round(friendly_probability(belief.particles, belief.weights, i), 2)
                     for i in range(1, scen.n_v + 1)]
            print(f"t={k*scen.dt:5.1f} ego=({x.ego.x-start_x:5.2f},{x.ego.y:5.2f},v={x.ego.v:4.2f}) "
                  f"u=({u.accel:5.2f},{u.steer:5.2f}) gaps={gaps} "
                  f"tv={[round(t.v,2) for t in x.traffic]} pF={probs} "
                  f"mcost={np.round(diag['mode_costs'],1)} sel={diag['selected_mode']}")
        x_next = step(x, u, theta, scen.dt, noise, r_world, scen.dynamics)
        belief = update_weights(belief, x_next, x, u, scen.dt, fnoise, scen.dynamics)
        x = x_next
        coll, _, _ = batch_indicators(x.as_matrix(), scen)
        if bool(coll):
            print(f"t={k*scen.dt:.1f} COLLISION"); break
        merged = detect_merge_complete(x, scen, already=merged)
        if merged:
            print(f"t={k*scen.dt:.1f} MERGED at dist {x.ego.x-start_x:.2f}"); break
        if x.ego.x - start_x > scen.merge_window:
            print(f"t={k*scen.dt:.1f} WINDOW END y={x.ego.y:.2f}"); break


if __name__ == "__main__":
    main()
