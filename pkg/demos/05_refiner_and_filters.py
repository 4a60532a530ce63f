"""
Refiner schedule and data filters
=================================

The refiner starts from a partly noised degraded latent and integrates a
constant-velocity path back to the clean one. Training clips are screened
with camera gates and per-dataset metric ranges.
"""

import numpy as np

from worldscan import camgeo, datafilter, refinersched

rng = np.random.default_rng(0)
x_h = rng.standard_normal((4, 8, 8))
x_l = x_h + 0.3 * rng.standard_normal(x_h.shape)
x_1 = refinersched.make_source(x_l, refinersched.SIGMA_START, rng.standard_normal(x_h.shape))

###############################################################################
# Three Euler steps over the distilled schedule land exactly on the target
# when the velocity is the true one.

trace = refinersched.RefineTrace()
out = refinersched.euler_refine(x_1, refinersched.SigmaSchedule(),
                                refinersched.oracle_velocity(x_1, x_h, refinersched.SIGMA_START), trace)
for step in trace.steps:
    print(f"sigma {step['sigma']:.6f}  mean|x| {step['mean_abs']:.4f}")
print("residual:", np.abs(out - x_h).max())

sig = refinersched.sample_sigmas(refinersched.LogitNormalParams(), refinersched.SIGMA_START, rng, 10_000)
print(f"training sigmas in [{sig.min():.4f}, {sig.max():.4f}]")

###############################################################################
# Camera gates: field of view, focal mismatch, and metric-scale stability.

for fx, fy in [(640, 640), (2745, 2745), (3700, 3700), (640, 800)]:
    intr = camgeo.Intrinsics(fx, fy, 640, 360, 1280, 720)
    print(fx, fy, [round(a, 2) for a in datafilter.fov(intr)], datafilter.camera_gate(intr, np.ones(20)).reasons)

###############################################################################
# Per-dataset ranges are inclusive at both ends.

prof = datafilter.load_profiles()["DL3DV-GS"]
for vmaf in (5.9, 6.0, 50.0, 50.1):
    stats = datafilter.ClipStats(vmaf_motion=vmaf, unimatch_flow=10, dover=0.5, color_sat=90, scene_cuts=0)
    print("vmaf", vmaf, datafilter.apply_profile(stats, prof))
