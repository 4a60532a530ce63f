"""
Ray-local camera encodings
==========================

Every latent token gets the ray through its pixel. A homogeneous transform
into that ray's local frame, applied to some attention channels, makes the
attention logits depend only on relative camera geometry.
"""

import numpy as np
from scipy.spatial.transform import Rotation

from worldscan import camgeo

rng = np.random.default_rng(0)
intr = camgeo.Intrinsics(fx=300.0, fy=300.0, cx=160.0, cy=120.0, w=320, h=240)
poses = [camgeo.CameraPose(Rotation.random(random_state=rng).as_matrix(), rng.standard_normal(3)) for _ in range(2)]

###############################################################################
# Build per-token transforms on a 4x3 latent grid for two frames.

transforms, positions = [], []
for t, pose in enumerate(poses):
    transforms += camgeo.latent_ray_transforms(intr, pose, (4, 3))
    positions += [(t, y, x) for y in range(3) for x in range(4)]
positions = np.array(positions, dtype=float)
split = camgeo.ChannelSplit(geo_channels=16, rope_channels=8)
q, k, v = (rng.standard_normal((len(transforms), 24)) for _ in range(3))
qt, kt, _ = camgeo.ucpe_apply(q, k, v, transforms, split, positions)
logits = qt[:, :16] @ kt[:, :16].T

###############################################################################
# Move the whole rig rigidly. The geometric logits do not change.

g = Rotation.from_euler("xyz", [20, -40, 75], degrees=True).as_matrix()
moved = []
for pose in poses:
    moved += camgeo.latent_ray_transforms(intr, pose.transformed(g, np.array([5.0, -2.0, 1.0])), (4, 3))
qm, km, _ = camgeo.ucpe_apply(q, k, v, moved, split, positions)
print("relative logit change:", np.abs(qm[:, :16] @ km[:, :16].T - logits).max() / np.abs(logits).max())

###############################################################################
# Plücker raymaps for conditioning: 6 channels per pixel, 8 frames packed to 48.

maps = [camgeo.plucker_raymap(intr, poses[i % 2], (40, 30)) for i in range(8)]
packed = camgeo.pack_raymaps(maps)
print("packed raymap shape:", packed.shape)
print("max |d . m|:", np.abs(np.einsum("hwc,hwc->hw", maps[0][..., :3], maps[0][..., 3:])).max())
