"""Monotonic integrate-and-fire pooling with exact threshold splitting.

Per-frame firing weights accumulate left to right; each time the running mass
crosses the threshold an event fires, the straddling frame's weight splits so
the closed event sums to exactly the threshold, and the remainder seeds the
next accumulation. Event *structure* (which frames belong to which event) is
decided by a plain float scan and treated as constant; the contribution
weights themselves are rebuilt from the cumulative-sum graph so gradients
reach both the weights and the frame contents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor

TAIL_POLICIES = ("always-fire", "drop", "fire-if-half")

SCALED_RESIDUAL_EPS = 1e-9  # fp drift from the scaling division counts as zero


class DegenerateFiringError(ValueError):
    """All firing weights are exactly zero; length scaling is undefined."""


@dataclass
class FiringWeights:
    """Per-frame firing weights, raw (logistic outputs) or length-scaled."""

    alphas: Tensor
    mode: str = "raw"  # "raw" | "scaled"
    target_length: int | None = None  # present iff scaled

    def __post_init__(self):
        if self.mode not in ("raw", "scaled"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if (self.mode == "scaled") != (self.target_length is not None):
            raise ValueError("target_length must be set exactly when mode is scaled")


@dataclass
class FireEvent:
    """One fired pooling event: frame contributions plus split bookkeeping."""

    index: int
    frames: list[int]
    weights: np.ndarray
    closed: bool
    mass: float
    split: tuple[float, float] | None = None  # (part in this event, carried remainder)


def firing_weights(encoded: Tensor) -> FiringWeights:
    """Logistic firing weights from the reserved last encoder channel."""
    if encoded.ndim != 2 or encoded.shape[1] < 2:
        raise ValueError("frame sequence needs >= 2 columns (last one is the firing logit)")
    alphas = dm.sigmoid(encoded[:, encoded.shape[1] - 1])
    return FiringWeights(alphas=alphas, mode="raw")


def scale_weights(weights: FiringWeights, target_length: int) -> FiringWeights:
    """Rescale raw weights so their total mass equals the target length."""
    if weights.mode != "raw":
        raise ValueError("scale_weights expects raw weights")
    if target_length < 1:
        raise ValueError("target_length must be >= 1")
    total = dm.tsum(weights.alphas)
    if float(total.data) <= 0.0:
        raise DegenerateFiringError("sum of firing weights is zero")
    scaled = dm.mul(weights.alphas, dm.div(dm.const(float(target_length)), total))
    return FiringWeights(alphas=scaled, mode="scaled", target_length=int(target_length))


def quantity_loss(weights: FiringWeights, target_length: int) -> Tensor:
    """|sum(alpha) - M|, with subgradient 0 at the kink. Raw weights only."""
    if weights.mode != "raw":
        raise ValueError("quantity loss is defined on raw weights")
    return dm.tabs(dm.sub(dm.tsum(weights.alphas), dm.const(float(target_length))))


def _fire_structure(alphas: np.ndarray, threshold: float):
    """Left-to-right scan deciding event membership.

    Member kinds: "interior" (weight = alpha_t), "carry" (left part clipped by
    the event's lower boundary), "close" (right part clipped by the upper
    boundary), "whole" (frame spans the full event). Zero-weight frames are
    never members. Returns (closed_events, tail_members, residual_mass).
    """
    events: list[list[tuple[int, str]]] = []
    cur: list[tuple[int, str]] = []
    acc = 0.0
    for t, rem in enumerate(alphas.tolist()):
        if rem <= 0.0:
            continue
        fired_here = False
        while acc + rem >= threshold:
            if cur:
                cur.append((t, "close"))
                events.append(cur)
            elif fired_here:
                events.append([(t, "whole")])
            else:
                # previous event closed exactly at the frame boundary: no
                # zero-weight frame is carried over
                events.append([(t, "close")])
            rem -= threshold - acc
            cur = []
            acc = 0.0
            fired_here = True
        if rem > 0.0:
            cur.append((t, "carry" if fired_here else "interior"))
            acc += rem
    return events, cur, acc


def integrate_and_fire(
    content: Tensor,
    weights: FiringWeights,
    threshold: float = 1.0,
    tail_policy: str = "fire-if-half",
) -> tuple[list[FireEvent], list[Tensor]]:
    """Accumulate weights, fire pooled content vectors at threshold crossings.

    Returns the fire events and one pooled (1, content_dim) vector per event
    (the pre-projection weighted sums). In scaled mode exactly
    ``target_length`` events fire and any sub-1e-9 residual is dropped; in raw
    mode ``tail_policy`` decides whether a final partial accumulation fires.
    """
    if tail_policy not in TAIL_POLICIES:
        raise ValueError(f"unknown tail policy {tail_policy!r}")
    alphas = weights.alphas
    if content.ndim != 2 or alphas.ndim != 1 or content.shape[0] != alphas.shape[0]:
        raise ValueError(
            f"content rows {content.shape} must match weight count {alphas.shape}"
        )

    events, tail, residual = _fire_structure(alphas.data, threshold)

    open_tail_index = None  # index of an unclosed partial event, if one fires
    if weights.mode == "scaled":
        target = weights.target_length
        if len(events) == target - 1 and residual >= threshold - SCALED_RESIDUAL_EPS:
            # final boundary missed only by accumulated rounding: the tail IS
            # the last event, short of the threshold by < 1e-9
            events.append(tail)
        elif not (len(events) == target and residual <= SCALED_RESIDUAL_EPS):
            raise AssertionError(
                f"scaled firing produced {len(events)} events + residual {residual:g} "
                f"for target {target}"
            )
    elif tail and (
        tail_policy == "always-fire"
        or (tail_policy == "fire-if-half" and residual >= 0.5 * threshold)
    ):
        open_tail_index = len(events)
        events.append(tail)

    if not events:
        return [], []

    # contribution weights for every member, assembled in one shot:
    #   interior -> alpha[t];  carry -> csum[t] - B_lo;
    #   close    -> B_hi - csum[t-1];  whole -> threshold
    # i.e. w = G_a @ alpha + G_c @ csum + offset with constant selectors.
    T = alphas.shape[0]
    n_members = sum(len(m) for m in events)
    g_alpha = np.zeros((n_members, T))
    g_csum = np.zeros((n_members, T))
    offset = np.zeros((n_members, 1))
    frames_flat: list[int] = []
    bounds: list[tuple[int, int]] = []  # member range per event
    row = 0
    for k, members in enumerate(events):
        b_lo = k * threshold
        b_hi = (k + 1) * threshold
        start = row
        for t, kind in members:
            if kind == "interior":
                g_alpha[row, t] = 1.0
            elif kind == "carry":
                g_csum[row, t] = 1.0
                offset[row, 0] = -b_lo
            elif kind == "close":
                if t > 0:
                    g_csum[row, t - 1] = -1.0
                offset[row, 0] = b_hi
            else:  # whole: frame interval spans the entire event
                offset[row, 0] = threshold
            frames_flat.append(t)
            row += 1
        bounds.append((start, row))

    csum = dm.cumsum(alphas, axis=0)
    a_col = dm.reshape(alphas, (T, 1))
    c_col = dm.reshape(csum, (T, 1))
    weights = dm.add(
        dm.add(dm.matmul(dm.const(g_alpha), a_col), dm.matmul(dm.const(g_csum), c_col)),
        dm.const(offset),
    )  # (n_members, 1)
    rows = content[np.array(frames_flat)]
    weighted = dm.mul(weights, rows)  # (n_members, content_dim)

    membership = np.zeros((len(events), n_members))
    for k, (lo, hi) in enumerate(bounds):
        membership[k, lo:hi] = 1.0
    pooled_all = dm.matmul(dm.const(membership), weighted)  # (n_events, content_dim)

    wdata = weights.data.reshape(-1)
    cdata = csum.data
    fire_events: list[FireEvent] = []
    pooled: list[Tensor] = []
    for k, (members, (lo, hi)) in enumerate(zip(events, bounds)):
        frames = frames_flat[lo:hi]
        w = wdata[lo:hi].copy()
        closed = k != open_tail_index
        split = None
        if closed and frames:
            leftover = float(cdata[frames[-1]]) - (k + 1) * threshold
            if leftover > 0.0:
                split = (float(w[-1]), leftover)
        fire_events.append(
            FireEvent(
                index=k,
                frames=list(frames),
                weights=w,
                closed=closed,
                mass=float(w.sum()),
                split=split,
            )
        )
        pooled.append(pooled_all[k : k + 1])
    return fire_events, pooled


@dataclass
class LabelRepSequence:
    """Projected label-level representation, one row per fire event."""

    matrix: Tensor  # (M, d_llm)
    events: list[FireEvent]

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.events):
            raise ValueError("row count must equal number of fire events")


def project(
    pooled: list[Tensor],
    events: list[FireEvent],
    weight: Tensor,
    bias: Tensor,
) -> LabelRepSequence:
    """Affine map of pooled vectors into the LM embedding space."""
    if len(pooled) != len(events):
        raise ValueError("pooled vectors and events must align")
    if not pooled:
        empty = dm.const(np.zeros((0, weight.shape[1])))
        return LabelRepSequence(matrix=empty, events=[])
    stacked = pooled[0] if len(pooled) == 1 else dm.concat(pooled, axis=0)
    if stacked.shape[1] != weight.shape[0]:
        raise ValueError(
            f"pooled dim {stacked.shape[1]} does not match projection input {weight.shape[0]}"
        )
    return LabelRepSequence(matrix=dm.add(dm.matmul(stacked, weight), bias), events=events)


def format_fire_events(events: list[FireEvent]) -> str:
    """Structured one-line-per-event dump for alignment inspection."""
    lines = []
    for e in events:
        span = f"{e.frames[0]}..{e.frames[-1]}" if e.frames else "-"
        split = f" split=({e.split[0]:.9g},{e.split[1]:.9g})" if e.split else ""
        wtxt = ",".join(f"{w:.9g}" for w in e.weights)
        lines.append(
            f"event={e.index} frames={span} mass={e.mass:.9g} closed={int(e.closed)}{split} weights=[{wtxt}]"
        )
    return "\n".join(lines)
