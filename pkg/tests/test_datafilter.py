import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from worldscan.camgeo import Intrinsics
from worldscan.datafilter import (
    METRICS, ClipStats, FilterProfile, apply_profile, audit, camera_gate, focal_divergence,
    fov, fov_from, fuse_depth_scale, load_profiles, read_clip_stats, scale_cv, write_audit_csv,
)
from worldscan.errors import InvalidInputError

# Per-dataset thresholds, typed in by hand from the reference table.
TABLE = {
    "OmniWorld": {"vmaf_motion": (0.5, 100), "unimatch_flow": (3, 100), "dover": (0.35, 1.0),
                  "vlm_entity": (0, 10), "vlm_quality": (0.5, 1.5)},
    "Sekai Game": {"vmaf_motion": (0.5, 50), "unimatch_flow": (3, 80), "dover": (0.25, 1.0),
                   "vlm_entity": (0, 10), "vlm_quality": (0.5, 1.5)},
    "Sekai Walking": {"vmaf_motion": (0.5, 50), "unimatch_flow": (3, 50), "dover": (0.35, 1.0),
                      "color_sat": (0, 180), "vlm_entity": (0, 25), "vlm_quality": (0.5, 1.5)},
    "MiraData": {"vmaf_motion": (0.5, 50), "unimatch_flow": (3, 80), "dover": (0.4, 1.0),
                 "color_sat": (0, 180), "scene_cuts": (0, 1)},
    "DL3DV-GS": {"vmaf_motion": (6, 50), "unimatch_flow": (3, 80), "dover": (0.4, 1.0),
                 "color_sat": (0, 180), "scene_cuts": (0, 1)},
    "SpatialVID": {"vmaf_motion": (0.5, 50), "unimatch_flow": (3, 80), "dover": (0.35, 1.0),
                   "color_sat": (0, 180), "vlm_entity": (0, 10), "vlm_quality": (0.5, 1.5)},
}


def intr(fx, fy, w=1280, h=720):
    return Intrinsics(fx, fy, w / 2, h / 2, w, h)


def test_fov_values():
    assert fov_from(1280, 720, 640, 640)[0] == pytest.approx(90.0, abs=1e-12)
    assert fov_from(1280, 720, 1e9, 1e9)[0] < 0.01
    assert fov_from(1280, 720, 2745, 2745)[0] == pytest.approx(26.25, abs=0.01)
    with pytest.raises(InvalidInputError):
        fov_from(1280, 720, 0.0, 1.0)


def test_fov_decreasing_in_focal():
    f = np.linspace(10, 5000, 200)
    tx = [fov_from(1280, 720, v, v)[0] for v in f]
    assert np.all(np.diff(tx) < 0)


def test_focal_divergence():
    assert focal_divergence(3.0, 3.0) == 0.0
    assert focal_divergence(1.2, 1.0) == pytest.approx(0.2 / 1.1, abs=1e-15)
    assert focal_divergence(1.25, 1.0) == pytest.approx(0.25 / 1.125, abs=1e-15)
    assert focal_divergence(1.0, 1.2) == focal_divergence(1.2, 1.0)
    with pytest.raises(InvalidInputError):
        focal_divergence(-1.0, 1.0)


def test_scale_cv_values():
    assert scale_cv([2.0] * 5) == 0.0
    assert scale_cv([1.0, 3.0]) == pytest.approx(0.5, abs=1e-8)
    assert scale_cv([0.1, 10.1]) == pytest.approx(5.0 / 5.1, abs=1e-8)
    # population CV of n values is at most sqrt(n-1), so a rejected series needs n >= 6
    assert scale_cv([0.01, 8.0, 0.01]) < 2.0
    assert scale_cv([0.01] * 9 + [8.0]) > 2.0
    with pytest.raises(InvalidInputError):
        scale_cv([])


def test_camera_gate_cases():
    flat = np.ones(10)
    assert camera_gate(intr(640, 640), flat).passed
    f20 = 640 / math.tan(math.radians(10))  # 20 degree horizontal FOV
    res = camera_gate(intr(f20, f20, h=1280 * 9 // 16), flat)
    assert not res.passed and "fov_x" in res.reasons
    res = camera_gate(intr(640, 800), [0.01] * 9 + [8.0])
    assert res.reasons == ("focal_divergence", "scale_cv")


def test_camera_gate_boundaries():
    # 0.2/1.1 passes, 0.25/1.125 fails
    assert "focal_divergence" not in camera_gate(intr(1.2 * 500, 500), [1.0]).reasons
    assert "focal_divergence" in camera_gate(intr(1.25 * 500, 500), [1.0]).reasons
    # six frames [1]*5 + [b]: CV crosses 2.0 between b = 40 and b = 1000
    assert scale_cv([1.0] * 5 + [40.0]) < 2.0 < scale_cv([1.0] * 5 + [1000.0])
    assert "scale_cv" not in camera_gate(intr(640, 640), [1.0] * 5 + [40.0]).reasons
    assert "scale_cv" in camera_gate(intr(640, 640), [1.0] * 5 + [1000.0]).reasons
    # a vertical FOV just under 25 degrees trips fov_y only
    fy = 360 / math.tan(math.radians(12.4))
    res = camera_gate(Intrinsics(640, fy, 640, 360, 1280, 720), [1.0])
    assert "fov_y" in res.reasons and "fov_x" not in res.reasons


def test_shipped_profiles_match_table():
    profiles = load_profiles()
    assert set(profiles) == set(TABLE)
    for name, rngs in TABLE.items():
        assert profiles[name].ranges == {m: (float(a), float(b)) for m, (a, b) in rngs.items()}


def mid_stats(profile):
    return ClipStats(**{m: (lo + hi) / 2 for m, (lo, hi) in profile.ranges.items()})


@pytest.mark.parametrize("name", sorted(TABLE))
def test_profile_endpoints_inclusive(name):
    prof = load_profiles()[name]
    assert apply_profile(mid_stats(prof), prof).passed
    for metric, (lo, hi) in prof.ranges.items():
        for edge in (lo, hi):
            assert apply_profile(dataclasses.replace(mid_stats(prof), **{metric: edge}), prof).passed
        if not (metric in ("scene_cuts", "vlm_entity") and lo == 0):  # counts cannot go negative
            below = dataclasses.replace(mid_stats(prof), **{metric: lo - 1e-6})
            assert apply_profile(below, prof).reasons == (metric,)
        res = apply_profile(dataclasses.replace(mid_stats(prof), **{metric: hi + 1e-6}), prof)
        assert res.reasons == (metric,)


def test_profile_row_examples():
    profiles = load_profiles()
    mira = profiles["MiraData"]
    assert apply_profile(dataclasses.replace(mid_stats(mira), scene_cuts=2), mira).reasons == ("scene_cuts",)
    dl3dv = profiles["DL3DV-GS"]
    assert apply_profile(dataclasses.replace(mid_stats(dl3dv), vmaf_motion=5), dl3dv).reasons == ("vmaf_motion",)


def test_unapplied_and_missing_metrics():
    mira = load_profiles()["MiraData"]
    stats = dataclasses.replace(mid_stats(mira), vlm_entity=999)
    assert apply_profile(stats, mira).passed  # vlm_entity is not applied for this dataset
    stats = dataclasses.replace(mid_stats(mira), dover=None)
    assert apply_profile(stats, mira).reasons == ("missing:dover",)


def test_profile_validation():
    with pytest.raises(InvalidInputError):
        FilterProfile("x", {"dover": (1.0, 0.0)})
    with pytest.raises(InvalidInputError):
        FilterProfile("x", {"sharpness": (0, 1)})
    with pytest.raises(InvalidInputError):
        ClipStats(scene_cuts=-1)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), widen=st.floats(0.0, 10.0))
def test_gate_monotone_under_relaxation(seed, widen):
    rng = np.random.default_rng(seed)
    base = load_profiles()[sorted(TABLE)[seed % len(TABLE)]]
    stats = ClipStats(**{m: float(rng.uniform(-5, 120)) if m not in ("scene_cuts", "vlm_entity")
                         else int(rng.integers(0, 30)) for m in METRICS})
    relaxed = FilterProfile(base.name, {m: (lo - widen, hi + widen) for m, (lo, hi) in base.ranges.items()})
    if apply_profile(stats, base).passed:
        assert apply_profile(stats, relaxed).passed
    assert set(apply_profile(stats, relaxed).reasons) <= set(apply_profile(stats, base).reasons)


def test_fuse_depth_scale_cases():
    rng = np.random.default_rng(4)
    d = rng.uniform(0.5, 20, 100)
    assert fuse_depth_scale(d, 2 * d)[0] == pytest.approx(2.0, abs=1e-14)
    assert fuse_depth_scale(d, d) == (pytest.approx(1.0), pytest.approx(1.0))
    with pytest.raises(InvalidInputError):
        fuse_depth_scale([], [])
    with pytest.raises(InvalidInputError):
        fuse_depth_scale([1.0, -1.0], [1.0, 1.0])


def test_fuse_matches_brute_force():
    rng = np.random.default_rng(8)
    for _ in range(20):
        dp = rng.uniform(0.2, 30, 64)
        da = dp * rng.uniform(0.5, 3.0) * rng.lognormal(0, 0.2, 64)
        obj = lambda s: np.sum((s * dp - da) ** 2 / dp)
        grid = np.linspace(0.01, 10, 20001)
        coarse = grid[np.argmin([obj(s) for s in grid])]
        fine = minimize_scalar(obj, bounds=(coarse - 1e-3, coarse + 1e-3), method="bounded",
                               options={"xatol": 1e-12}).x
        assert abs(fuse_depth_scale(dp, da)[0] - fine) <= 1e-6


def test_ema_geometric_identity():
    e0, s0 = 3.0, 1.5
    ema = e0
    d = np.array([1.0, 2.0, 4.0])
    for k in range(1, 200):
        _, ema = fuse_depth_scale(d, s0 * d, ema)
        assert abs(ema - (0.99**k * e0 + (1 - 0.99**k) * s0)) <= 1e-12


def test_audit_csv_roundtrip(tmp_path):
    (tmp_path / "s.csv").write_text(
        "clip_id,vmaf_motion,unimatch_flow,dover,color_sat,scene_cuts\n"
        "a,0.5,3,0.4,180,1\n"
        "b,0.4,3,0.4,180,2\n"
        "c,10,20,0.5,,0\n")
    clips = read_clip_stats(tmp_path / "s.csv")
    rows = audit(clips, load_profiles()["MiraData"])
    assert [r["pass"] for r in rows] == [True, False, False]
    assert rows[1]["reasons"] == "vmaf_motion;scene_cuts"
    assert rows[2]["reasons"] == "missing:color_sat"
    write_audit_csv(tmp_path / "a.csv", rows)
    assert (tmp_path / "a.csv").read_text().splitlines() == [
        "clip_id,pass,reasons", "a,true,", "b,false,vmaf_motion;scene_cuts", "c,false,missing:color_sat"]
    (tmp_path / "empty.csv").write_text("")
    assert read_clip_stats(tmp_path / "empty.csv") == []


def test_profile_file_override(tmp_path):
    p = tmp_path / "p.json"
    p.write_text(json.dumps({"profiles": {"Mine": {"dover": [0.1, 0.2]}}}))
    assert load_profiles(p)["Mine"].ranges == {"dover": (0.1, 0.2)}
