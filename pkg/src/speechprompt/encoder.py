"""Trainable pseudo-speech encoder and the frame-stacking helper.

Two stride-2 temporal convolutions reduce length by exactly 4x
(T = ceil(T0/4)); a stack of gated temporal convolutions with pointwise MLPs
mixes context in both directions. The last output channel is reserved for the
firing logit and starts at a negative bias so early training under-fires.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import ParamSet, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    d_in: int = 16
    hidden: int = 48
    content_dim: int = 24
    n_mixing: int = 2
    firing_bias: float = -1.0

    @property
    def d_out(self) -> int:
        return self.content_dim + 1  # content columns + firing logit channel

    def to_dict(self) -> dict:
        return {
            "d_in": self.d_in,
            "hidden": self.hidden,
            "content_dim": self.content_dim,
            "n_mixing": self.n_mixing,
            "firing_bias": self.firing_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(
            d_in=int(d["d_in"]),
            hidden=int(d["hidden"]),
            content_dim=int(d["content_dim"]),
            n_mixing=int(d["n_mixing"]),
            firing_bias=float(d["firing_bias"]),
        )


def register_encoder_params(ps: ParamSet, cfg: EncoderConfig, prefix: str = "encoder"):
    h = cfg.hidden
    ps.add(f"{prefix}.conv1.w", (3 * cfg.d_in, h))
    ps.add(f"{prefix}.conv1.b", (h,), init="zeros")
    ps.add(f"{prefix}.conv2.w", (3 * h, h))
    ps.add(f"{prefix}.conv2.b", (h,), init="zeros")
    for i in range(cfg.n_mixing):
        p = f"{prefix}.mix{i}"
        ps.add(f"{p}.cw", (3 * h, h))
        ps.add(f"{p}.cb", (h,), init="zeros")
        ps.add(f"{p}.gw", (3 * h, h))
        ps.add(f"{p}.gb", (h,), init="zeros")
        ps.add(f"{p}.w1", (h, 2 * h))
        ps.add(f"{p}.b1", (2 * h,), init="zeros")
        ps.add(f"{p}.w2", (2 * h, h))
        ps.add(f"{p}.b2", (h,), init="zeros")
    out_bias = np.zeros(cfg.d_out)
    out_bias[-1] = cfg.firing_bias
    ps.add(f"{prefix}.out.w", (h, cfg.d_out))
    ps.add(f"{prefix}.out.b", (cfg.d_out,), init=out_bias)


def encoder_param_names(cfg: EncoderConfig, prefix: str = "encoder") -> list[str]:
    ps = ParamSet(seed=0)
    register_encoder_params(ps, cfg, prefix)
    return ps.names()


def _conv3(x: Tensor, w: Tensor, b: Tensor, stride: int) -> Tensor:
    """Kernel-3 temporal convolution with zero padding 1; out length ceil(T/stride).

    Works on (T, c) or batched (B, T, c) input (time on axis -2).
    """
    T, c = x.shape[-2], x.shape[-1]
    taxis = x.ndim - 2
    pad_shape = x.shape[:-2] + (1, c)
    zero = dm.const(np.zeros(pad_shape))
    xp = dm.concat([zero, x, zero], axis=taxis)
    n_out = -(-T // stride)
    idx = lambda k: (slice(None),) * taxis + (slice(k, k + stride * n_out, stride),)
    cols = [xp[idx(k)] for k in range(3)]
    return dm.add(dm.matmul(dm.concat(cols, axis=taxis + 1), w), b)


def encode(
    x: np.ndarray, params: ParamSet, cfg: EncoderConfig, prefix: str = "encoder"
) -> Tensor:
    """Frame sequence E of shape (ceil(T0/4), content_dim + 1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.d_in:
        raise ValueError(f"expected (T0, {cfg.d_in}) features, got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite features")
    if x.shape[0] < 4:
        x = np.concatenate([x, np.zeros((4 - x.shape[0], cfg.d_in))], axis=0)

    p = lambda name: params[f"{prefix}.{name}"]
    h = dm.tanh(_conv3(dm.const(x), p("conv1.w"), p("conv1.b"), stride=2))
    h = dm.tanh(_conv3(h, p("conv2.w"), p("conv2.b"), stride=2))
    for i in range(cfg.n_mixing):
        c = dm.tanh(_conv3(h, p(f"mix{i}.cw"), p(f"mix{i}.cb"), stride=1))
        g = dm.sigmoid(_conv3(h, p(f"mix{i}.gw"), p(f"mix{i}.gb"), stride=1))
        h = dm.add(h, dm.mul(c, g))
        m = dm.matmul(dm.tanh(dm.add(dm.matmul(h, p(f"mix{i}.w1")), p(f"mix{i}.b1"))), p(f"mix{i}.w2"))
        h = dm.add(h, dm.add(m, p(f"mix{i}.b2")))
    return dm.add(dm.matmul(h, p("out.w")), p("out.b"))


def encode_batch(
    features: list[np.ndarray], params: ParamSet, cfg: EncoderConfig, prefix: str = "encoder"
) -> tuple[Tensor, list[int]]:
    """Batched twin of ``encode``: one padded forward for many utterances.

    Invalid tail frames are re-zeroed before every temporal convolution, so
    row i sliced to its true length equals the per-utterance ``encode`` output
    to float rounding. Returns ((B, Tmax, d_out) frames, true lengths).
    """
    feats = []
    for x in features:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != cfg.d_in:
            raise ValueError(f"expected (T0, {cfg.d_in}) features, got {x.shape}")
        if x.shape[0] < 4:
            x = np.concatenate([x, np.zeros((4 - x.shape[0], cfg.d_in))], axis=0)
        feats.append(x)
    t0s = [x.shape[0] for x in feats]
    t0_max = max(t0s)
    batch = np.zeros((len(feats), t0_max, cfg.d_in))
    for i, x in enumerate(feats):
        batch[i, : x.shape[0]] = x

    def mask_for(t_cur: int, lengths: list[int]) -> Tensor:
        m = np.zeros((len(lengths), t_cur, 1))
        for i, L in enumerate(lengths):
            m[i, :L] = 1.0
        return dm.const(m)

    p = lambda name: params[f"{prefix}.{name}"]
    h = dm.tanh(_conv3(dm.const(batch), p("conv1.w"), p("conv1.b"), stride=2))
    l1 = [-(-t // 2) for t in t0s]
    h = dm.mul(h, mask_for(h.shape[1], l1))
    h = dm.tanh(_conv3(h, p("conv2.w"), p("conv2.b"), stride=2))
    lengths = [-(-t // 2) for t in l1]
    mask = mask_for(h.shape[1], lengths)
    for i in range(cfg.n_mixing):
        h = dm.mul(h, mask)
        c = dm.tanh(_conv3(h, p(f"mix{i}.cw"), p(f"mix{i}.cb"), stride=1))
        g = dm.sigmoid(_conv3(h, p(f"mix{i}.gw"), p(f"mix{i}.gb"), stride=1))
        h = dm.add(h, dm.mul(c, g))
        m = dm.matmul(dm.tanh(dm.add(dm.matmul(h, p(f"mix{i}.w1")), p(f"mix{i}.b1"))), p(f"mix{i}.w2"))
        h = dm.add(h, dm.add(m, p(f"mix{i}.b2")))
    return dm.add(dm.matmul(h, p("out.w")), p("out.b")), lengths


def stack_frames(encoded: Tensor, k: int = 8) -> Tensor:
    """Group k consecutive frames per row (zero-padded final group), width k*d."""
    if k < 1:
        raise ValueError("k must be >= 1")
    T, d = encoded.shape
    n_out = -(-T // k)
    pad = n_out * k - T
    if pad:
        encoded = dm.concat([encoded, dm.const(np.zeros((pad, d)))], axis=0)
    return dm.reshape(encoded, (n_out, k * d))


def unstack_frames(stacked: np.ndarray, d: int, original_len: int) -> np.ndarray:
    """Inverse of stack_frames on the unpadded region (numpy helper)."""
    return stacked.reshape(-1, d)[:original_len]
