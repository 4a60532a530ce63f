"""Recurrent attention kernels over latent-frame sequences.

Every per-head quantity for one latent frame is a ``D x S`` matrix: ``D``
channels (rows) by ``S`` spatial tokens (columns). The recurrent state is a
``D x D`` matrix that maps query features to outputs, ``O_t = S_t Q_t``.

The kernels here are reference semantics in plain numpy. Gates (``beta``,
``gamma``) are inputs; nothing is learned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError

RMS_EPS = 1e-6
SCALINGS = ("frame", "l2", "none")


@dataclass(frozen=True)
class HeadShape:
    d: int
    s: int

    def __post_init__(self):
        if self.d < 1 or self.s < 1:
            raise InvalidInputError(f"head shape must be positive, got d={self.d}, s={self.s}")


@dataclass(frozen=True)
class FrameBatch:
    """Query/key/value features of one latent frame plus its gates.

    For the GDN kernels ``q`` and ``k`` are expected to be the processed
    features (see :func:`prepare_frame`); for :func:`linear_attention_scan`
    they are raw and the ReLU feature map is applied inside.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    beta: np.ndarray
    gamma: float = 1.0

    def __post_init__(self):
        q, k, v = (np.asarray(a) for a in (self.q, self.k, self.v))
        if q.ndim != 2 or q.shape != k.shape or q.shape != v.shape:
            raise InvalidInputError(
                f"q, k, v must be equal-shape D x S matrices, got {q.shape}, {k.shape}, {v.shape}"
            )
        beta = np.asarray(self.beta, dtype=q.dtype)
        if beta.ndim == 0:
            beta = np.full(q.shape[1], beta, dtype=q.dtype)
        if beta.shape != (q.shape[1],):
            raise InvalidInputError(f"beta must have length S={q.shape[1]}, got shape {beta.shape}")
        for name, a in (("q", q), ("k", k), ("v", v), ("beta", beta)):
            if not np.all(np.isfinite(a)):
                raise InvalidInputError(f"{name} has non-finite entries")
        if np.any(beta < 0) or np.any(beta > 1):
            raise InvalidInputError("beta entries must lie in [0, 1]")
        gamma = float(self.gamma)
        if not 0.0 < gamma <= 1.0:
            raise InvalidInputError(f"gamma must lie in (0, 1], got {gamma}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma", gamma)

    @property
    def shape(self) -> HeadShape:
        return HeadShape(*self.q.shape)


@dataclass
class ScanOutput:
    outputs: list[np.ndarray]
    final_state: np.ndarray
    state_norms: list[float] = field(default_factory=list)

    def trace(self) -> list[dict]:
        """Per-frame ``{frame_index, state_norm, output_norm}`` records (Frobenius norms)."""
        records = []
        for i, o in enumerate(self.outputs):
            records.append({
                "frame_index": i,
                "state_norm": float(self.state_norms[i]) if self.state_norms else None,
                "output_norm": float(np.linalg.norm(o)),
            })
        return records


# -- feature maps -----------------------------------------------------------

def rms_norm(x: np.ndarray, eps: float = RMS_EPS) -> np.ndarray:
    """RMS-normalize each column (token) over its ``D`` channels."""
    x = np.asarray(x)
    ms = np.mean(x * x, axis=0, keepdims=True)
    return x / np.sqrt(ms + eps)


def query_features(q_raw: np.ndarray) -> np.ndarray:
    return np.maximum(rms_norm(q_raw), 0.0)


def stabilize_keys(k_raw: np.ndarray, shape: HeadShape | None = None, scaling: str = "frame") -> np.ndarray:
    """ReLU(RMSNorm(K)) followed by a key scale.

    ``scaling="frame"`` divides by ``sqrt(D*S)``, which bounds the key energy
    ``tr(K beta K^T)`` by 1 for any ``beta`` in ``[0, 1]^S``. ``"l2"`` divides
    by ``sqrt(D)`` only and ``"none"`` leaves the normalized keys unscaled;
    both are kept to reproduce the unstable baselines.
    """
    k_raw = np.asarray(k_raw)
    if k_raw.ndim != 2:
        raise InvalidInputError(f"keys must be a D x S matrix, got shape {k_raw.shape}")
    if not np.all(np.isfinite(k_raw)):
        raise InvalidInputError("keys have non-finite entries")
    if shape is not None and (shape.d, shape.s) != k_raw.shape:
        raise InvalidInputError(f"keys shape {k_raw.shape} does not match {shape}")
    d, s = k_raw.shape
    k_bar = np.maximum(rms_norm(k_raw), 0.0)
    if scaling == "frame":
        return k_bar / np.sqrt(d * s)
    if scaling == "l2":
        return k_bar / np.sqrt(d)
    if scaling == "none":
        return k_bar
    raise InvalidInputError(f"unknown key scaling {scaling!r}; expected one of {SCALINGS}")


def prepare_frame(q_raw, k_raw, v, beta=1.0, gamma=1.0, scaling: str = "frame") -> FrameBatch:
    """Build a GDN-ready frame: queries get RMSNorm+ReLU, keys are also scaled."""
    return FrameBatch(
        q=query_features(np.asarray(q_raw)),
        k=stabilize_keys(k_raw, scaling=scaling),
        v=np.asarray(v),
        beta=beta,
        gamma=gamma,
    )


# -- cumulative linear attention -------------------------------------------

def linear_attention_scan(frames: Sequence[FrameBatch], normalize: bool = False, eps: float = 1e-6) -> ScanOutput:
    """Running sum of ``V phi(K)^T`` applied to ``phi(Q)`` with ``phi = ReLU``.

    With ``normalize`` each output token is divided by ``z_t . phi(q) + eps``
    where ``z_t`` accumulates the key columns.
    """
    if len(frames) == 0:
        raise InvalidInputError("linear attention needs at least one frame")
    d, s = frames[0].q.shape
    dtype = frames[0].q.dtype
    a = np.zeros((d, d), dtype=dtype)
    z = np.zeros(d, dtype=dtype)
    outputs, norms = [], []
    for f in frames:
        if f.q.shape != (d, s):
            raise InvalidInputError("all frames must share one head shape")
        phi_k = np.maximum(f.k, 0.0)
        phi_q = np.maximum(f.q, 0.0)
        a = a + f.v @ phi_k.T
        o = a @ phi_q
        if normalize:
            z = z + phi_k.sum(axis=1)
            o = o / (z @ phi_q + eps)[None, :]
        outputs.append(o)
        norms.append(float(np.linalg.norm(a)))
    return ScanOutput(outputs, a, norms)


# -- gated delta rule -------------------------------------------------------

def _check_gates(beta, gamma):
    if not 0.0 <= beta <= 1.0:
        raise InvalidInputError(f"beta must lie in [0, 1], got {beta}")
    if not 0.0 < gamma <= 1.0:
        raise InvalidInputError(f"gamma must lie in (0, 1], got {gamma}")


def gdn_token_step(state, q_hat, k_hat, v, beta: float, gamma: float):
    """One token of the gated delta rule.

    ``S_i = gamma S + (v - gamma S k) beta k^T`` and ``o_i = S_i q``.
    """
    _check_gates(beta, gamma)
    state = np.asarray(state)
    q_hat, k_hat, v = (np.asarray(a).reshape(-1) for a in (q_hat, k_hat, v))
    decayed = gamma * state
    resid = (v - gamma * (state @ k_hat)) * beta
    new = decayed + np.outer(resid, k_hat)
    return new, new @ q_hat


def transition_matrix(frame: FrameBatch) -> np.ndarray:
    """``M_t = gamma (I - K diag(beta) K^T)``; symmetric, so ``S M`` needs no transpose."""
    k = frame.k
    return frame.gamma * (np.eye(k.shape[0], dtype=k.dtype) - (k * frame.beta) @ k.T)


def input_update(frame: FrameBatch) -> np.ndarray:
    """``U_t = V diag(beta) K^T``."""
    return (frame.v * frame.beta) @ frame.k.T


def gdn_frame_step(state, frame: FrameBatch):
    """Consume all ``S`` tokens of one frame in a single recurrent step.

    Computes ``S_t = S_{t-1} M_t + U_t`` in delta form,
    ``gamma S + (V - gamma S K) diag(beta) K^T``, which for ``S = 1`` performs
    the same floating-point operations as :func:`gdn_token_step`.
    """
    state = np.asarray(state)
    d = frame.q.shape[0]
    if state.shape != (d, d):
        raise InvalidInputError(f"state shape {state.shape} does not match head dim {d}")
    g = frame.gamma
    resid = (frame.v - g * (state @ frame.k)) * frame.beta
    new = g * state + resid @ frame.k.T
    return new, new @ frame.q


def _zero_state(frames: Sequence[FrameBatch]) -> np.ndarray:
    d = frames[0].q.shape[0]
    return np.zeros((d, d), dtype=frames[0].q.dtype)


def gdn_forward_scan(frames: Sequence[FrameBatch], init: np.ndarray | None = None) -> ScanOutput:
    if len(frames) == 0:
        raise InvalidInputError("scan needs at least one frame")
    shape = frames[0].q.shape
    state = _zero_state(frames) if init is None else np.asarray(init)
    outputs, norms = [], []
    for f in frames:
        if f.q.shape != shape:
            raise InvalidInputError("all frames must share one head shape")
        state, o = gdn_frame_step(state, f)
        outputs.append(o)
        norms.append(float(np.linalg.norm(state)))
    return ScanOutput(outputs, state, norms)


def gdn_bidirectional_scan(frames: Sequence[FrameBatch]) -> ScanOutput:
    """Forward scan plus a time-reversed scan, aligned per frame before summing.

    ``final_state`` is the forward scan's final state.
    """
    fwd = gdn_forward_scan(frames)
    rev = gdn_forward_scan(list(frames)[::-1])
    outputs = [a + b for a, b in zip(fwd.outputs, rev.outputs[::-1])]
    return ScanOutput(outputs, fwd.final_state, fwd.state_norms)


def gdn_chunk_causal_scan(frames: Sequence[FrameBatch], chunk_len: int) -> ScanOutput:
    """Global forward scan plus a reversed scan restarted at every chunk boundary."""
    if chunk_len < 1:
        raise InvalidInputError(f"chunk_len must be >= 1, got {chunk_len}")
    fwd = gdn_forward_scan(frames)
    frames = list(frames)
    rev_out: list[np.ndarray] = []
    for start in range(0, len(frames), chunk_len):
        chunk = frames[start:start + chunk_len]
        rev_out.extend(gdn_forward_scan(chunk[::-1]).outputs[::-1])
    outputs = [a + b for a, b in zip(fwd.outputs, rev_out)]
    return ScanOutput(outputs, fwd.final_state, fwd.state_norms)


# -- windowed softmax with attention sink ----------------------------------

@dataclass(frozen=True)
class WindowConfig:
    sink_frames: int = 1
    window_frames: int = 3

    def __post_init__(self):
        if self.sink_frames < 0:
            raise InvalidInputError("sink_frames must be >= 0")
        if self.window_frames < 1:
            raise InvalidInputError("window_frames must be >= 1")

    def visible(self, t: int) -> list[int]:
        """Frame indices a query in frame ``t`` may attend to, ascending."""
        sink = range(min(self.sink_frames, t + 1))
        local = range(max(0, t - self.window_frames + 1), t + 1)
        return sorted(set(sink) | set(local))


def _softmax_attend(q, k, v):
    logits = (k.T @ q) / np.sqrt(q.shape[0])  # (keys, queries)
    logits = logits - logits.max(axis=0, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=0, keepdims=True)
    return v @ w


def softmax_attention_windowed(q, k, v, cfg: WindowConfig) -> np.ndarray:
    """Block-causal softmax attention over sink frames plus a trailing window.

    ``q, k, v`` have shape ``(T, D, S)``; all tokens of the visible frames
    (including every token of the query's own frame) are attendable.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise InvalidInputError("q, k, v must be equal-shape (T, D, S) arrays")
    out = np.empty_like(v)
    for t in range(q.shape[0]):
        idx = cfg.visible(t)
        kk = np.concatenate([k[i] for i in idx], axis=1)
        vv = np.concatenate([v[i] for i in idx], axis=1)
        out[t] = _softmax_attend(q[t], kk, vv)
    return out


class SinkWindowCache:
    """Streaming key/value cache holding sink frames plus the most recent window.

    Memory never exceeds ``sink_frames + window_frames`` frames, independent
    of rollout length.
    """

    def __init__(self, cfg: WindowConfig):
        self.cfg = cfg
        self.sink: list[tuple[np.ndarray, np.ndarray]] = []
        self.window: list[tuple[int, np.ndarray, np.ndarray]] = []
        self.frames_seen = 0

    def __len__(self):
        return len(self.sink) + len(self.window)

    def step(self, q, k, v) -> np.ndarray:
        """Append one frame's keys/values and return its attention output."""
        t = self.frames_seen
        if t < self.cfg.sink_frames:
            self.sink.append((k, v))
        else:
            self.window.append((t, k, v))
        lo = max(self.cfg.sink_frames, t - self.cfg.window_frames + 1)
        self.window = [e for e in self.window if e[0] >= lo]
        self.frames_seen += 1
        ks = [e[0] for e in self.sink] + [e[1] for e in self.window]
        vs = [e[1] for e in self.sink] + [e[2] for e in self.window]
        return _softmax_attend(q, np.concatenate(ks, axis=1), np.concatenate(vs, axis=1))


# -- hybrid layer stack -----------------------------------------------------

@dataclass(frozen=True)
class LayerSchedule:
    total_blocks: int
    softmax_positions: tuple[int, ...]

    def __post_init__(self):
        pos = tuple(self.softmax_positions)
        if self.total_blocks < 1:
            raise InvalidInputError("total_blocks must be >= 1")
        if any(p < 0 or p >= self.total_blocks for p in pos):
            raise InvalidInputError(f"softmax positions {pos} out of range [0, {self.total_blocks})")
        if any(b <= a for a, b in zip(pos, pos[1:])):
            raise InvalidInputError("softmax positions must be strictly increasing")
        object.__setattr__(self, "softmax_positions", pos)

    def is_softmax(self, block: int) -> bool:
        return block in self.softmax_positions


def build_layer_schedule(total: int = 20, period: int | None = 4, offset: int | None = None,
                         positions: Sequence[int] | None = None) -> LayerSchedule:
    """Softmax block indices: explicit ``positions``, else every ``period``-th block.

    ``offset`` defaults to ``period - 1``, so ``total=20, period=4`` yields
    ``(3, 7, 11, 15, 19)``.
    """
    if total < 1:
        raise InvalidInputError("total must be >= 1")
    if positions is not None:
        return LayerSchedule(total, tuple(positions))
    if period is None:
        return LayerSchedule(total, ())
    if period < 1:
        raise InvalidInputError("period must be >= 1")
    start = period - 1 if offset is None else offset
    return LayerSchedule(total, tuple(range(start, total, period)))


@dataclass
class BlockParams:
    """Projections and gates for one block of the toy hybrid stack.

    Projections are ``D x D`` (``None`` means identity). ``gamma`` is scalar
    or one value per frame; ``beta`` is scalar or ``(T, S)``.
    """

    wq: np.ndarray | None = None
    wk: np.ndarray | None = None
    wv: np.ndarray | None = None
    wo: np.ndarray | None = None
    gamma: float | np.ndarray = 1.0
    beta: float | np.ndarray = 1.0
    chunk_len: int = 1
    window: WindowConfig = field(default_factory=WindowConfig)


def _project(w, x):
    return x if w is None else np.einsum("ij,tjs->tis", w, x)


def gdn_mixer(x: np.ndarray, p: BlockParams) -> np.ndarray:
    q, k, v = _project(p.wq, x), _project(p.wk, x), _project(p.wv, x)
    t_len = x.shape[0]
    gamma = np.broadcast_to(np.asarray(p.gamma, dtype=float), (t_len,))
    beta = np.broadcast_to(np.asarray(p.beta, dtype=float), (t_len, x.shape[2]))
    frames = [prepare_frame(q[t], k[t], v[t], beta[t], gamma[t]) for t in range(t_len)]
    return np.stack(gdn_chunk_causal_scan(frames, p.chunk_len).outputs)


def softmax_mixer(x: np.ndarray, p: BlockParams) -> np.ndarray:
    q, k, v = _project(p.wq, x), _project(p.wk, x), _project(p.wv, x)
    return softmax_attention_windowed(q, k, v, p.window)


def hybrid_stack_apply(x, schedule: LayerSchedule, per_block_params: Sequence[BlockParams]) -> np.ndarray:
    """Apply each block's mixer residually, ``x <- x + W_o mixer(x)``.

    ``x`` holds per-frame features of shape ``(T, D, S)``. Blocks listed in
    the schedule use windowed softmax; the rest use the chunk-causal GDN scan.
    """
    x = np.asarray(x, dtype=float)
    if len(per_block_params) != schedule.total_blocks:
        raise InvalidInputError(
            f"schedule has {schedule.total_blocks} blocks but {len(per_block_params)} parameter sets given"
        )
    for b, p in enumerate(per_block_params):
        mixed = softmax_mixer(x, p) if schedule.is_softmax(b) else gdn_mixer(x, p)
        x = x + _project(p.wo, mixed)
    return x


def random_frames(rng: np.random.Generator, t_len: int, d: int, s: int, scaling: str = "frame",
                  gamma: float | tuple[float, float] = (0.9, 1.0), beta_range=(0.0, 1.0)) -> list[FrameBatch]:
    """Frames with Gaussian q/k, uniform[-1, 1] values and uniform gates."""
    frames = []
    for _ in range(t_len):
        g = rng.uniform(*gamma) if isinstance(gamma, tuple) else gamma
        frames.append(prepare_frame(
            rng.standard_normal((d, s)),
            rng.standard_normal((d, s)),
            rng.uniform(-1.0, 1.0, (d, s)),
            beta=rng.uniform(*beta_range, s),
            gamma=g,
            scaling=scaling,
        ))
    return frames
