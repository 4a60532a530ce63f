"""Context-parallel GDN scan, simulated in-process.

The frame update ``S_t = S_{t-1} M_t + U_t`` is affine in the state, so a
contiguous shard of frames collapses to a pair ``(C, H)`` with
``S_end = S_start C + H``. The state is always the left operand; ``C`` is the
time-ordered product ``M_first @ ... @ M_last``.

"All-gather" here is a list; the math is what is being reproduced, not the
transport.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .seqmodel import FrameBatch, ScanOutput, gdn_forward_scan, input_update, transition_matrix


@dataclass(frozen=True)
class ShardSummary:
    c: np.ndarray
    h: np.ndarray

    def apply(self, start: np.ndarray) -> np.ndarray:
        return start @ self.c + self.h


@dataclass(frozen=True)
class ShardPlan:
    """Contiguous frame ranges, one per rank.

    Each rank gets ``T // P`` frames and the last rank also takes the
    remainder when ``P`` does not divide ``T``.
    """

    t: int
    p: int

    def __post_init__(self):
        if self.p < 1 or self.t < 1:
            raise InvalidInputError(f"need T >= 1 and P >= 1, got T={self.t}, P={self.p}")
        if self.p > self.t:
            raise InvalidInputError(f"more shards ({self.p}) than frames ({self.t})")

    @property
    def ranges(self) -> list[range]:
        size = self.t // self.p
        bounds = [i * size for i in range(self.p)] + [self.t]
        return [range(a, b) for a, b in zip(bounds, bounds[1:])]

    def split(self, items: Sequence) -> list[list]:
        if len(items) != self.t:
            raise InvalidInputError(f"plan covers {self.t} frames, got {len(items)}")
        return [list(items[r.start:r.stop]) for r in self.ranges]


def identity_summary(d: int, dtype=float) -> ShardSummary:
    return ShardSummary(np.eye(d, dtype=dtype), np.zeros((d, d), dtype=dtype))


def shard_summary(frames: Sequence[FrameBatch], d: int | None = None) -> ShardSummary:
    """Transition and input composites of a shard.

    ``H`` is the end state of the shard scanned from the zero state, built up
    with the same affine recursion as ``C``. An empty shard is ``(I, 0)``;
    pass ``d`` in that case.
    """
    if len(frames) == 0:
        if d is None:
            raise InvalidInputError("empty shard needs an explicit head dimension")
        return identity_summary(d)
    dim = frames[0].q.shape[0]
    c = np.eye(dim, dtype=frames[0].q.dtype)
    h = np.zeros((dim, dim), dtype=frames[0].q.dtype)
    for f in frames:
        m = transition_matrix(f)
        c = c @ m
        h = h @ m + input_update(f)
    return ShardSummary(c, h)


def compose(a: ShardSummary, b: ShardSummary) -> ShardSummary:
    """Summary of shard ``a`` followed by shard ``b``."""
    return ShardSummary(a.c @ b.c, a.h @ b.c + b.h)


def prefix_compose(summaries: Sequence[ShardSummary], init: np.ndarray | None = None) -> list[np.ndarray]:
    """Exclusive prefix of start states, ``S_0 = init`` (zero by default)."""
    if len(summaries) == 0:
        return []
    d = summaries[0].c.shape[0]
    state = np.zeros((d, d), dtype=summaries[0].c.dtype) if init is None else np.asarray(init)
    starts = []
    for sm in summaries:
        if sm.c.shape != (d, d) or sm.h.shape != (d, d):
            raise InvalidInputError("summary shapes disagree")
        starts.append(state)
        state = sm.apply(state)
    return starts


def scan_from_starts(shards: Sequence[Sequence[FrameBatch]], starts: Sequence[np.ndarray]) -> ScanOutput:
    outputs, norms = [], []
    final = None
    for frames, start in zip(shards, starts):
        res = gdn_forward_scan(frames, start)
        outputs.extend(res.outputs)
        norms.extend(res.state_norms)
        final = res.final_state
    return ScanOutput(outputs, final, norms)


def cp_scan(frames: Sequence[FrameBatch], plan: ShardPlan, init: np.ndarray | None = None,
            workers: int | None = None) -> ScanOutput:
    """Sharded forward scan; matches :func:`gdn_forward_scan` to rounding.

    The first shard repeats the sequential operation order exactly. Later
    shards start from the composed prefix, whose matrix products sum in a
    different order than the step-by-step recursion, so agreement there is to
    about ``1e-12`` in double precision rather than bitwise.
    """
    shards = plan.split(list(frames))
    d = frames[0].q.shape[0]
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(lambda fs: shard_summary(fs, d), shards))
    else:
        summaries = [shard_summary(fs, d) for fs in shards]
    return scan_from_starts(shards, prefix_compose(summaries, init))


# -- halo exchange for temporal convolution --------------------------------

def _pads(kernel: int, causal: bool) -> tuple[int, int]:
    if causal:
        return kernel - 1, 0
    left = (kernel - 1) // 2
    return left, kernel - 1 - left


def temporal_conv(x: np.ndarray, w: np.ndarray, causal: bool = False) -> np.ndarray:
    """Zero-padded "same" convolution along axis 0.

    ``y[t] = sum_j w[j] x[t + right - j]`` where ``right = 0`` when causal
    and ``K - 1 - (K-1)//2`` otherwise (centred, past-heavy for even ``K``).
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    kernel = w.shape[0]
    left, right = _pads(kernel, causal)
    padded = np.concatenate([np.zeros((left,) + x.shape[1:]), x, np.zeros((right,) + x.shape[1:])])
    return _valid_conv(padded, w)


def _valid_conv(padded: np.ndarray, w: np.ndarray) -> np.ndarray:
    kernel = w.shape[0]
    n = padded.shape[0] - kernel + 1
    wt = w.reshape(w.shape + (1,) * (padded.ndim - w.ndim)) if w.ndim == 1 else w
    y = np.zeros((n,) + padded.shape[1:])
    for j in range(kernel):
        # tap j reads padded[t + K-1 - j]
        y = y + wt[j] * padded[kernel - 1 - j:kernel - 1 - j + n]
    return y


def halo_pad(shards: Sequence[np.ndarray], kernel: int, causal: bool = False) -> list[np.ndarray]:
    """Give every shard ``K-1`` frames of neighbour context on each needed side.

    Left context always; right context only when not causal. Context is
    pulled from as many neighbouring shards as needed when a neighbour is
    shorter than ``K-1``, and zero-filled beyond the global sequence ends.
    """
    if kernel < 1:
        raise InvalidInputError(f"kernel must be >= 1, got {kernel}")
    halo = kernel - 1
    shards = [np.asarray(s, dtype=float) for s in shards]
    if halo == 0:
        return [s.copy() for s in shards]
    feat = shards[0].shape[1:]
    out = []
    for p, body in enumerate(shards):
        before = np.concatenate([np.zeros((halo,) + feat)] + list(shards[:p]))[-halo:]
        parts = [before, body]
        if not causal:
            after = np.concatenate(list(shards[p + 1:]) + [np.zeros((halo,) + feat)])[:halo]
            parts.append(after)
        out.append(np.concatenate(parts))
    return out


def sharded_conv(shards: Sequence[np.ndarray], w: np.ndarray, causal: bool = False) -> list[np.ndarray]:
    """Convolve each halo-augmented shard and crop back to the shard's frames."""
    w = np.asarray(w, dtype=float)
    kernel = w.shape[0]
    halo = kernel - 1
    left, right = _pads(kernel, causal)
    outs = []
    for body, aug in zip(shards, halo_pad(shards, kernel, causal)):
        n = np.asarray(body).shape[0]
        window = aug[halo - left:halo + n + right]
        outs.append(_valid_conv(window, w))
    return outs
