"""
Why keys are scaled by 1/sqrt(D*S)
==================================

A frame-wise delta-rule step folds all S tokens of a frame into one DxD
state update. Its transition is gamma * (I - K diag(beta) K^T), which stays
non-expansive only while the key energy tr(K diag(beta) K^T) is at most 1.
"""

import numpy as np

from worldscan import seqmodel

rng = np.random.default_rng(0)
d, s, t_len = 16, 256, 300

###############################################################################
# Draw one frame three ways and look at the largest transition eigenvalue.

k_raw = rng.standard_normal((d, s))
beta = rng.uniform(0, 1, s)
for scaling in ("frame", "l2", "none"):
    k = seqmodel.stabilize_keys(k_raw, scaling=scaling)
    f = seqmodel.FrameBatch(np.zeros((d, s)), k, np.zeros((d, s)), beta, 0.99)
    lam = np.abs(np.linalg.eigvalsh(seqmodel.transition_matrix(f))).max()
    energy = np.trace((k * beta) @ k.T)
    print(f"{scaling:>5}: key energy {energy:10.3f}   |lambda|max {lam:10.3f}")

###############################################################################
# Now run the recurrence. Only the frame-scaled keys keep the state bounded.

for scaling in ("frame", "l2", "none"):
    frames = seqmodel.random_frames(np.random.default_rng(1), t_len, d, s, scaling=scaling, gamma=0.99)
    with np.errstate(all="ignore"):
        norms = np.array(seqmodel.gdn_forward_scan(frames).state_norms)
    bad = np.flatnonzero(~np.isfinite(norms) | (norms > 1e6))
    where = f"unstable from step {bad[0]}" if bad.size else f"max norm {norms.max():.3f}"
    print(f"{scaling:>5}: {where}")

###############################################################################
# With S = 1 the frame step is the ordinary token-level gated delta rule,
# bit for bit.

f = seqmodel.random_frames(rng, 1, d, 1)[0]
state = rng.standard_normal((d, d))
a, _ = seqmodel.gdn_frame_step(state, f)
b, _ = seqmodel.gdn_token_step(state, f.q[:, 0], f.k[:, 0], f.v[:, 0], float(f.beta[0]), f.gamma)
print("S=1 frame step equals token step:", np.array_equal(a, b))
