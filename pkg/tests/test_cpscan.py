import numpy as np
import pytest

from worldscan.cpscan import (
    ShardPlan, compose, cp_scan, halo_pad, identity_summary, prefix_compose,
    shard_summary, sharded_conv, temporal_conv,
)
from worldscan.errors import InvalidInputError
from worldscan.seqmodel import gdn_forward_scan, input_update, random_frames, transition_matrix


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def max_dev(a, b):
    return max(float(np.max(np.abs(x - y))) for x, y in zip(a, b))


def test_plan_ranges():
    assert [list(r) for r in ShardPlan(8, 4).ranges] == [[0, 1], [2, 3], [4, 5], [6, 7]]
    assert [len(r) for r in ShardPlan(10, 3).ranges] == [3, 3, 4]
    for bad in [(4, 0), (2, 3), (0, 1)]:
        with pytest.raises(InvalidInputError):
            ShardPlan(*bad)


def test_single_frame_summary(rng):
    (f,) = random_frames(rng, 1, 4, 3)
    sm = shard_summary([f])
    np.testing.assert_allclose(sm.c, transition_matrix(f), atol=1e-15)
    np.testing.assert_allclose(sm.h, input_update(f), atol=1e-15)


def test_empty_summary():
    sm = shard_summary([], d=3)
    np.testing.assert_array_equal(sm.c, np.eye(3))
    np.testing.assert_array_equal(sm.h, np.zeros((3, 3)))
    with pytest.raises(InvalidInputError):
        shard_summary([])


def test_summary_affine_identity(rng):
    frames = random_frames(rng, 4, 5, 3)
    sm = shard_summary(frames)
    for start in (np.zeros((5, 5)), rng.standard_normal((5, 5))):
        end = gdn_forward_scan(frames, start).final_state
        np.testing.assert_allclose(sm.apply(start), end, atol=1e-12)


def test_composite_associativity(rng):
    frames = random_frames(rng, 7, 4, 3)
    whole = shard_summary(frames)
    parts = compose(shard_summary(frames[:3]), shard_summary(frames[3:]))
    np.testing.assert_allclose(parts.c, whole.c, atol=1e-13)
    np.testing.assert_allclose(parts.h, whole.h, atol=1e-13)
    left_id = compose(identity_summary(4), whole)
    np.testing.assert_array_equal(left_id.c, whole.c)


def test_prefix_small_cases(rng):
    frames = random_frames(rng, 4, 3, 2)
    s0 = shard_summary(frames[:2])
    (only,) = prefix_compose([s0])
    np.testing.assert_array_equal(only, np.zeros((3, 3)))
    first, second = prefix_compose([s0, shard_summary(frames[2:])])
    np.testing.assert_array_equal(second, s0.h)


def test_prefix_seeds_exact_global_scan(rng):
    frames = random_frames(rng, 16, 4, 3)
    plan = ShardPlan(16, 4)
    shards = plan.split(frames)
    starts = prefix_compose([shard_summary(s) for s in shards])
    seq = gdn_forward_scan(frames)
    outs = []
    for s, st in zip(shards, starts):
        outs.extend(gdn_forward_scan(s, st).outputs)
    assert max_dev(outs, seq.outputs) <= 1e-12


def test_cp_scan_one_shard_identical(rng):
    frames = random_frames(rng, 9, 4, 3)
    res = cp_scan(frames, ShardPlan(9, 1))
    seq = gdn_forward_scan(frames)
    assert all(np.array_equal(a, b) for a, b in zip(res.outputs, seq.outputs))
    assert np.array_equal(res.final_state, seq.final_state)


@pytest.mark.parametrize("p", [2, 4, 8])
def test_cp_scan_matches_sequential(rng, p):
    frames = random_frames(rng, 32, 6, 5)
    res = cp_scan(frames, ShardPlan(32, p), workers=2)
    seq = gdn_forward_scan(frames)
    assert max_dev(res.outputs, seq.outputs) <= 1e-12
    np.testing.assert_allclose(res.final_state, seq.final_state, atol=1e-12)


def test_cp_scan_shard_count_invariance(rng):
    t = 48
    frames = random_frames(rng, t, 4, 3)
    seq = gdn_forward_scan(frames).outputs
    for p in [d for d in range(1, t + 1) if t % d == 0]:
        assert max_dev(cp_scan(frames, ShardPlan(t, p)).outputs, seq) <= 1e-12


def test_cp_scan_remainder_shard(rng):
    frames = random_frames(rng, 11, 4, 3)
    assert max_dev(cp_scan(frames, ShardPlan(11, 3)).outputs, gdn_forward_scan(frames).outputs) <= 1e-12


def test_zero_beta_zero_starts(rng):
    frames = random_frames(rng, 8, 4, 3, beta_range=(0.0, 0.0))
    shards = ShardPlan(8, 4).split(frames)
    for st in prefix_compose([shard_summary(s) for s in shards]):
        np.testing.assert_array_equal(st, 0)


def test_plan_length_mismatch(rng):
    with pytest.raises(InvalidInputError):
        cp_scan(random_frames(rng, 5, 2, 2), ShardPlan(6, 2))


# -- halo ------------------------------------------------------------------

def test_halo_k1_unchanged(rng):
    shards = [rng.standard_normal((4, 2)), rng.standard_normal((3, 2))]
    for a, b in zip(halo_pad(shards, 1), shards):
        np.testing.assert_array_equal(a, b)


def test_halo_exchange_two_shards(rng):
    x = rng.standard_normal((16, 3))
    shards = [x[:8], x[8:]]
    aug = halo_pad(shards, 3)
    np.testing.assert_array_equal(aug[0][:2], 0)
    np.testing.assert_array_equal(aug[0][-2:], x[8:10])
    np.testing.assert_array_equal(aug[1][:2], x[6:8])
    np.testing.assert_array_equal(aug[1][-2:], 0)
    causal = halo_pad(shards, 3, causal=True)
    assert causal[1].shape[0] == 10
    np.testing.assert_array_equal(causal[1][:2], x[6:8])


def direct_conv(x, w, causal):
    """Loop oracle: explicit index arithmetic with out-of-range frames treated as zero."""
    k = len(w)
    right = 0 if causal else k - 1 - (k - 1) // 2
    y = np.zeros_like(x)
    for t in range(len(x)):
        for j in range(k):
            i = t + right - j
            if 0 <= i < len(x):
                y[t] += w[j] * x[i]
    return y


@pytest.mark.parametrize("kernel", [1, 2, 3, 5])
@pytest.mark.parametrize("causal", [False, True])
@pytest.mark.parametrize("sizes", [(8, 8), (5, 5, 6), (1, 2, 1, 4)])
def test_halo_conv_matches_unsharded(rng, kernel, causal, sizes):
    x = rng.standard_normal((sum(sizes), 3))
    w = rng.standard_normal(kernel)
    full = temporal_conv(x, w, causal)
    np.testing.assert_allclose(full, direct_conv(x, w, causal), atol=1e-12)
    bounds = np.cumsum((0,) + sizes)
    shards = [x[a:b] for a, b in zip(bounds, bounds[1:])]
    np.testing.assert_array_equal(np.concatenate(sharded_conv(shards, w, causal)), full)


def test_halo_kernel_validation():
    with pytest.raises(InvalidInputError):
        halo_pad([np.zeros((2, 1))], 0)
