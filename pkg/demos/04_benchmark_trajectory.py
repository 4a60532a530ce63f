"""
A one-minute benchmark camera path
==================================

Waypoints are splined, reparameterized to constant speed, smoothed, and
checked against the scene's point cloud. The path is then scored against a
perturbed estimate after Sim(3) alignment.
"""

import numpy as np
from scipy.spatial.transform import Rotation

from worldscan import trajbench

template = trajbench.load_template("loop_backtrack")
print(f"{len(template)} waypoints; bundled templates: {trajbench.bundled_templates()}")

###############################################################################
# Generate against a scene with a pillar of points near the route.

clean, _ = trajbench.generate_trajectory(template, trajbench.Scene(median_depth=25.0))
pillar = clean.positions[300] + np.array([0.25, 0.0, 0.0]) + np.outer(np.linspace(-1, 1, 21), [0, 1, 0])
traj, status = trajbench.generate_trajectory(template, trajbench.Scene(25.0, pillar))
print("frames:", len(traj))
print("retries:", status.retries, "collision:", status.collision)
print("speeds tried:", [round(a["speed"], 4) for a in status.attempts])
print("smoothness:", trajbench.smoothness_stats(traj))

###############################################################################
# Revisit pairs: frames that come back to nearly the same viewpoint.

for p in trajbench.detect_revisits(traj, top_k=5):
    print(f"  frames {p.i:4d} and {p.j:4d}: {p.distance:.3f} m, {p.angle:.2f} deg")

###############################################################################
# Evaluate an estimate that differs by a similarity transform and some noise.

rng = np.random.default_rng(0)
sim = trajbench.Sim3(0.5, Rotation.from_euler("y", 30, degrees=True).as_matrix(), np.array([1.0, 0.0, 2.0]))
est = sim.apply_trajectory(traj)
est = trajbench.Trajectory(est.quaternions, est.positions + 0.005 * rng.standard_normal(est.positions.shape), 16.0)
metrics, fitted = trajbench.evaluate_camera(traj, est)
print("metrics:", metrics.to_dict(), "recovered scale:", round(1 / fitted.scale, 4))
