"""Camera-ray geometry for attention conditioning.

Conventions: camera frames are OpenCV style (x right, y down, z forward);
poses are camera-to-world, ``X_world = R X_cam + o``. Pixel ``(u, v)`` has
its centre at ``(i + 0.5, j + 0.5)`` for integer indices ``(i, j)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateBasisError, InvalidInputError

ORTHO_TOL = 1e-9
BASIS_EPS = 1e-6
RAYMAP_CHANNELS = 6
FRAMES_PER_LATENT = 8


@dataclass(frozen=True)
class CameraPose:
    r: np.ndarray
    o: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        o = np.asarray(self.o, dtype=float).reshape(-1)
        if r.shape != (3, 3) or o.shape != (3,):
            raise InvalidInputError("pose needs a 3x3 rotation and a 3-vector centre")
        if not np.allclose(r.T @ r, np.eye(3), atol=ORTHO_TOL) or abs(np.linalg.det(r) - 1) > ORTHO_TOL:
            raise InvalidInputError("pose rotation is not a proper rotation")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "o", o)

    @classmethod
    def identity(cls) -> CameraPose:
        return cls(np.eye(3), np.zeros(3))

    @property
    def up(self) -> np.ndarray:
        """Camera vertical axis in world coordinates (second column of ``R``)."""
        return self.r[:, 1]

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.o
        return m

    def transformed(self, g_rot: np.ndarray, g_trans: np.ndarray) -> CameraPose:
        """Pose after a global rigid motion ``x -> G_rot x + G_trans`` of the world."""
        return CameraPose(g_rot @ self.r, g_rot @ self.o + g_trans)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.w and 0 < self.cy < self.h):
            raise InvalidInputError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, sx: float, sy: float | None = None) -> Intrinsics:
        """Intrinsics of the image resampled by ``sx`` (and ``sy``)."""
        sy = sx if sy is None else sy
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, self.w * sx, self.h * sy)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, d: dict) -> Intrinsics:
        return cls(*(float(d[k]) for k in ("fx", "fy", "cx", "cy", "w", "h")))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(d) - 1) > ORTHO_TOL:
            raise InvalidInputError("ray direction must be a unit vector")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class RayLocalTransform:
    """World-to-ray-local homogeneous transform.

    The rotation block has rows ``(x, y, z)`` of the ray basis and the frame is
    centred at the ray origin.
    """

    d: np.ndarray

    @property
    def rotation(self) -> np.ndarray:
        return self.d[:3, :3]

    def inverse(self) -> np.ndarray:
        inv = np.eye(4)
        inv[:3, :3] = self.rotation.T
        inv[:3, 3] = -self.rotation.T @ self.d[:3, 3]
        return inv


@dataclass(frozen=True)
class ChannelSplit:
    geo_channels: int
    rope_channels: int

    def __post_init__(self):
        if self.geo_channels < 0 or self.rope_channels < 0 or self.geo_channels % 4:
            raise InvalidInputError("geo channels must be a non-negative multiple of 4")

    @property
    def head_dim(self) -> int:
        return self.geo_channels + self.rope_channels

    @classmethod
    def default(cls, head_dim: int) -> ChannelSplit:
        """Half the head for geometry, rounded down to a multiple of 4."""
        geo = (head_dim // 2) // 4 * 4
        return cls(geo, head_dim - geo)


def _normalize(v: np.ndarray, axis=-1) -> np.ndarray:
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def unproject(pixel, intr: Intrinsics, pose: CameraPose) -> Ray:
    u, v = pixel
    cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    return Ray(pose.o.copy(), _normalize(pose.r @ cam))


def pixel_centers(intr: Intrinsics, grid: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Image-space centres of a ``W x H`` grid of cells covering the image.

    With ``grid == (w, h)`` these are the pixel centres; a coarser grid gives
    latent-cell centres.
    """
    gw, gh = grid
    us = (np.arange(gw) + 0.5) * intr.w / gw
    vs = (np.arange(gh) + 0.5) * intr.h / gh
    return np.meshgrid(us, vs)


def ray_directions(intr: Intrinsics, pose: CameraPose, grid: tuple[int, int]) -> np.ndarray:
    """Unit world directions, shape ``(H, W, 3)``."""
    uu, vv = pixel_centers(intr, grid)
    cam = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1)
    return _normalize(cam @ pose.r.T)


def ray_local_basis(ray: Ray, up) -> RayLocalTransform:
    """Ray-local frame: ``z`` along the ray, ``x = norm(up x z)``, ``y = z x x``."""
    up = np.asarray(up, dtype=float)
    if abs(np.linalg.norm(up) - 1) > ORTHO_TOL:
        raise InvalidInputError("up vector must be unit length")
    z = ray.direction
    cross = np.cross(up, z)
    n = np.linalg.norm(cross)
    if n < BASIS_EPS:
        raise DegenerateBasisError("up vector is parallel to the ray")
    x = cross / n
    y = np.cross(z, x)
    rot = np.stack([x, y, z])
    d = np.eye(4)
    d[:3, :3] = rot
    d[:3, 3] = -rot @ ray.origin
    return RayLocalTransform(d)


def camera_ray_transform(ray: Ray, pose: CameraPose) -> RayLocalTransform:
    """Ray-local transform using the camera's vertical axis, or its x axis when degenerate."""
    try:
        return ray_local_basis(ray, pose.up)
    except DegenerateBasisError:
        return ray_local_basis(ray, pose.r[:, 0])


def latent_ray_transforms(intr: Intrinsics, pose: CameraPose, grid: tuple[int, int]) -> list[RayLocalTransform]:
    """One transform per latent cell, row-major over the ``(W, H)`` grid."""
    dirs = ray_directions(intr, pose, grid).reshape(-1, 3)
    return [camera_ray_transform(Ray(pose.o, d), pose) for d in dirs]


# -- rotary embedding -------------------------------------------------------

def _axis_dims(n: int, n_axes: int) -> list[int]:
    pairs = n // 2
    base, extra = divmod(pairs, n_axes)
    return [2 * (base + (1 if a < extra else 0)) for a in range(n_axes)]


def rope_rotate(x, position, base: float = 10000.0, axis_dims: Sequence[int] | None = None) -> np.ndarray:
    """Multi-axis rotary embedding on adjacent channel pairs.

    ``x`` has shape ``(..., n)`` and ``position`` shape ``(..., n_axes)`` (or a
    tuple such as ``(t, y, x)``). Channels are split into one contiguous
    segment per axis; within a segment of ``n_a`` channels pair ``k`` turns by
    ``pos * base**(-2k/n_a)``. Default segments share pairs evenly, leftover
    pairs going to the earlier axes.
    """
    x = np.asarray(x, dtype=float)
    pos = np.asarray(position, dtype=float)
    if pos.ndim == 0:
        pos = pos[None]
    n = x.shape[-1]
    if n % 2:
        raise InvalidInputError(f"rotary channels must come in pairs, got {n}")
    n_axes = pos.shape[-1]
    dims = list(axis_dims) if axis_dims is not None else _axis_dims(n, n_axes)
    if sum(dims) != n or any(d % 2 for d in dims) or len(dims) != n_axes:
        raise InvalidInputError(f"axis dims {dims} do not tile {n} channels in pairs")
    angles = []
    for a, na in enumerate(dims):
        theta = base ** (-2.0 * np.arange(na // 2) / na) if na else np.zeros(0)
        angles.append(pos[..., a:a + 1] * theta)
    ang = np.concatenate(angles, axis=-1)
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, ang.shape[:-1] + (n,)))
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


# -- UCPE -------------------------------------------------------------------

def _stack_transforms(transforms) -> np.ndarray:
    return np.stack([t.d if isinstance(t, RayLocalTransform) else np.asarray(t) for t in transforms])


def _apply_geo(x: np.ndarray, mats: np.ndarray) -> np.ndarray:
    """Apply per-token ``4x4`` matrices to every 4-channel group of ``x``."""
    n, g = x.shape
    groups = x.reshape(n, g // 4, 4)
    return np.einsum("nij,ngj->ngi", mats, groups).reshape(n, g)


def _check_ucpe(arrs, mats, split):
    for a in arrs:
        if a.ndim != 2 or a.shape[1] != split.head_dim:
            raise InvalidInputError(f"expected (N, {split.head_dim}) camera-branch vectors, got {a.shape}")
        if a.shape[0] != mats.shape[0]:
            raise InvalidInputError("need exactly one ray transform per token")


def ucpe_apply(q, k, v, transforms, split: ChannelSplit, rope_positions, base: float = 10000.0):
    """Pose-transform camera-branch queries, keys and values.

    Geometric channels: queries by ``D^T``, keys and values by ``D^{-1}``, one
    4-group at a time. Remaining channels get the rotary embedding. The
    geometric part of ``q_i . k_j`` is ``q^T D_i D_j^{-1} k``, a function of the
    relative ray pose only.
    """
    q, k, v = (np.asarray(a, dtype=float) for a in (q, k, v))
    mats = _stack_transforms(transforms)
    _check_ucpe((q, k, v), mats, split)
    inv = np.linalg.inv(mats)
    g = split.geo_channels
    pos = np.asarray(rope_positions, dtype=float)

    def part(x, geo_mats):
        geo = _apply_geo(x[:, :g], geo_mats)
        rope = rope_rotate(x[:, g:], pos, base) if split.rope_channels else x[:, g:]
        return np.concatenate([geo, rope], axis=1)

    return part(q, np.transpose(mats, (0, 2, 1))), part(k, inv), part(v, inv)


def ucpe_output(o, transforms, split: ChannelSplit, rope_positions, base: float = 10000.0) -> np.ndarray:
    """Map mixer outputs back: ``D`` on geometric groups, inverse rotary elsewhere."""
    o = np.asarray(o, dtype=float)
    mats = _stack_transforms(transforms)
    _check_ucpe((o,), mats, split)
    g = split.geo_channels
    geo = _apply_geo(o[:, :g], mats)
    rope = rope_rotate(o[:, g:], -np.asarray(rope_positions, dtype=float), base) if split.rope_channels else o[:, g:]
    return np.concatenate([geo, rope], axis=1)


# -- Plücker raymaps --------------------------------------------------------

def plucker_raymap(intr: Intrinsics, pose: CameraPose, grid: tuple[int, int] | None = None) -> np.ndarray:
    """Per-cell ``(d, o x d)`` of shape ``(H, W, 6)``; ``grid`` defaults to full resolution."""
    if grid is None:
        grid = (int(intr.w), int(intr.h))
    d = ray_directions(intr, pose, grid)
    m = np.cross(np.broadcast_to(pose.o, d.shape), d)
    return np.concatenate([d, m], axis=-1)


def pack_raymaps(raymaps: Sequence[np.ndarray]) -> np.ndarray:
    """Stack eight ``(H, W, 6)`` raymaps into ``(H, W, 48)``.

    Channel ``6*f + c`` is channel ``c`` (``dx, dy, dz, mx, my, mz``) of raw
    frame ``f``.
    """
    if len(raymaps) != FRAMES_PER_LATENT:
        raise InvalidInputError(f"expected {FRAMES_PER_LATENT} raymaps, got {len(raymaps)}")
    shape = np.shape(raymaps[0])
    if len(shape) != 3 or shape[2] != RAYMAP_CHANNELS or any(np.shape(r) != shape for r in raymaps):
        raise InvalidInputError("raymaps must all be (H, W, 6) with equal size")
    return np.concatenate([np.asarray(r) for r in raymaps], axis=-1)


def unpack_raymaps(packed: np.ndarray) -> list[np.ndarray]:
    packed = np.asarray(packed)
    if packed.ndim != 3 or packed.shape[2] != FRAMES_PER_LATENT * RAYMAP_CHANNELS:
        raise InvalidInputError(f"expected (H, W, 48), got {packed.shape}")
    return [packed[..., 6 * f:6 * f + 6] for f in range(FRAMES_PER_LATENT)]


# -- serialization ----------------------------------------------------------
# Binary layout: three little-endian uint32 (W, H, C), then H*W*C little-endian
# float32 values in row-major (H, W, C) order.

_HEADER = struct.Struct("<3I")


def raymap_to_bytes(grid: np.ndarray) -> bytes:
    h, w, c = grid.shape
    return _HEADER.pack(w, h, c) + np.ascontiguousarray(grid, dtype="<f4").tobytes()


def raymap_from_bytes(buf: bytes) -> np.ndarray:
    w, h, c = _HEADER.unpack_from(buf)
    data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size)
    if data.size != w * h * c:
        raise InvalidInputError(f"payload holds {data.size} floats, header says {w * h * c}")
    return data.reshape(h, w, c).astype(np.float32)


def save_raymap(path, grid: np.ndarray) -> None:
    path = Path(path)
    if path.suffix == ".json":
        h, w, c = grid.shape
        path.write_text(json.dumps({"W": w, "H": h, "C": c, "data": np.asarray(grid).tolist()}))
    else:
        path.write_bytes(raymap_to_bytes(grid))


def load_raymap(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".json":
        obj = json.loads(path.read_text())
        arr = np.asarray(obj["data"], dtype=float)
        if arr.shape != (obj["H"], obj["W"], obj["C"]):
            raise InvalidInputError("raymap JSON header does not match its data")
        return arr
    return raymap_from_bytes(path.read_bytes())
