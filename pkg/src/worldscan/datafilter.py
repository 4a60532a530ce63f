"""Training-clip filters: camera sanity gates, per-dataset metric ranges, and
metric depth-scale fusion.

The metric scores themselves (VMAF motion, optical flow, DOVER, VLM counts)
come from external tools and arrive as inputs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .camgeo import Intrinsics
from .errors import InvalidInputError

FOV_RANGE = (25.0, 120.0)
MAX_FOCAL_DIVERGENCE = 0.20
MAX_SCALE_CV = 2.0
SCALE_EPS = 1e-8
EMA_MOMENTUM = 0.99
METRICS = ("vmaf_motion", "unimatch_flow", "dover", "color_sat", "scene_cuts", "vlm_entity", "vlm_quality")


@dataclass(frozen=True)
class GateResult:
    passed: bool
    reasons: tuple[str, ...] = ()

    def __bool__(self):
        return self.passed


def _focal(f, name):
    f = float(f)
    if not f > 0 or not math.isfinite(f):
        raise InvalidInputError(f"{name} must be positive and finite, got {f}")
    return f


def fov_from(width: float, height: float, fx: float, fy: float) -> tuple[float, float]:
    fx, fy = _focal(fx, "fx"), _focal(fy, "fy")
    return (math.degrees(2 * math.atan(width / (2 * fx))),
            math.degrees(2 * math.atan(height / (2 * fy))))


def fov(intr: Intrinsics) -> tuple[float, float]:
    """Horizontal and vertical field of view in degrees."""
    return fov_from(intr.w, intr.h, intr.fx, intr.fy)


def focal_divergence(fx: float, fy: float) -> float:
    fx, fy = _focal(fx, "fx"), _focal(fy, "fy")
    return abs(fx - fy) / ((fx + fy) / 2)


def scale_cv(series, epsilon: float = SCALE_EPS) -> float:
    """Population std over ``mean + epsilon`` of per-frame scale factors."""
    s = np.asarray(series, dtype=float).ravel()
    if s.size == 0:
        raise InvalidInputError("scale series is empty")
    if np.any(s <= 0):
        raise InvalidInputError("scale factors must be positive")
    return float(np.std(s) / (np.mean(s) + epsilon))


def camera_gate(intr: Intrinsics, series, fov_range=FOV_RANGE, max_divergence=MAX_FOCAL_DIVERGENCE,
                max_cv=MAX_SCALE_CV) -> GateResult:
    """Every violated criterion is reported, in a fixed order."""
    tx, ty = fov(intr)
    lo, hi = fov_range
    reasons = []
    if not lo <= tx <= hi:
        reasons.append("fov_x")
    if not lo <= ty <= hi:
        reasons.append("fov_y")
    if focal_divergence(intr.fx, intr.fy) > max_divergence:
        reasons.append("focal_divergence")
    if scale_cv(series) > max_cv:
        reasons.append("scale_cv")
    return GateResult(not reasons, tuple(reasons))


@dataclass(frozen=True)
class ClipStats:
    vmaf_motion: float | None = None
    unimatch_flow: float | None = None
    dover: float | None = None
    color_sat: float | None = None
    scene_cuts: int | None = None
    vlm_entity: int | None = None
    vlm_quality: float | None = None

    def __post_init__(self):
        for name in ("scene_cuts", "vlm_entity"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise InvalidInputError(f"{name} is a count and must be >= 0")

    def get(self, metric: str):
        return getattr(self, metric)

    @classmethod
    def from_mapping(cls, row: Mapping[str, object]) -> ClipStats:
        kw = {}
        for f in fields(cls):
            raw = row.get(f.name)
            if raw is None or (isinstance(raw, str) and raw.strip() == ""):
                continue
            try:
                val = float(raw)
            except (TypeError, ValueError) as exc:
                raise InvalidInputError(f"{f.name}: not a number: {raw!r}") from exc
            kw[f.name] = int(val) if f.name in ("scene_cuts", "vlm_entity") and val.is_integer() else val
        return cls(**kw)


@dataclass(frozen=True)
class FilterProfile:
    name: str
    ranges: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for metric, rng in self.ranges.items():
            if metric not in METRICS:
                raise InvalidInputError(f"profile {self.name!r}: unknown metric {metric!r}")
            lo, hi = (float(x) for x in rng)
            if lo > hi:
                raise InvalidInputError(f"profile {self.name!r}: {metric} range [{lo}, {hi}] is inverted")
            clean[metric] = (lo, hi)
        object.__setattr__(self, "ranges", clean)


def apply_profile(stats: ClipStats, profile: FilterProfile) -> GateResult:
    """Inclusive range checks for the metrics the profile applies.

    A metric the profile applies but the clip lacks fails as ``missing:<metric>``.
    """
    reasons = []
    for metric in METRICS:
        if metric not in profile.ranges:
            continue
        lo, hi = profile.ranges[metric]
        v = stats.get(metric)
        if v is None:
            reasons.append(f"missing:{metric}")
        elif not lo <= v <= hi:
            reasons.append(metric)
    return GateResult(not reasons, tuple(reasons))


def load_profiles(path=None) -> dict[str, FilterProfile]:
    """Profiles keyed by dataset name; the bundled table when ``path`` is None."""
    if path is None:
        text = resources.files("worldscan").joinpath("data/filter_profiles.json").read_text()
    else:
        text = Path(path).read_text()
    obj = json.loads(text)
    return {name: FilterProfile(name, {m: tuple(r) for m, r in rngs.items()})
            for name, rngs in obj["profiles"].items()}


def fuse_depth_scale(d_primary, d_anchor, prev_ema: float | None = None,
                     momentum: float = EMA_MOMENTUM) -> tuple[float, float]:
    """Scale ``s`` minimizing ``sum w (s d_p - d_a)^2`` with ``w = 1/d_p``, plus its EMA."""
    dp = np.asarray(d_primary, dtype=float).ravel()
    da = np.asarray(d_anchor, dtype=float).ravel()
    if dp.size == 0 or dp.shape != da.shape:
        raise InvalidInputError("depth arrays must be nonempty and equal length")
    if np.any(dp <= 0) or np.any(da <= 0):
        raise InvalidInputError("depths must be positive")
    w = 1.0 / dp
    s = float(np.sum(w * dp * da) / np.sum(w * dp * dp))
    ema = s if prev_ema is None else momentum * prev_ema + (1.0 - momentum) * s
    return s, float(ema)


def read_clip_stats(path) -> list[tuple[str, ClipStats]]:
    """CSV with a ``clip_id`` column and any subset of the metric columns."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        if "clip_id" not in reader.fieldnames:
            raise InvalidInputError("clip stats CSV needs a clip_id column")
        return [(row["clip_id"], ClipStats.from_mapping(row)) for row in reader]


def audit(clips: Iterable[tuple[str, ClipStats]], profile: FilterProfile) -> list[dict]:
    rows = []
    for clip_id, stats in clips:
        res = apply_profile(stats, profile)
        rows.append({"clip_id": clip_id, "pass": res.passed, "reasons": ";".join(res.reasons)})
    return rows


def write_audit_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["clip_id", "pass", "reasons"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({"clip_id": r["clip_id"], "pass": "true" if r["pass"] else "false", "reasons": r["reasons"]})
