"""Self-attention over spatial positions of a feature map.

The block projects the input's channels to query/key/value spaces with 1x1
projections, forms an hw x hw column-stochastic affinity matrix, mixes the
value vectors with it, projects back to the input channel count, and adds the
input (residual form). Attention weights are computed from the input itself,
so unlike convolution the mixing is input-dependent and global: every output
position sees every input position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .nn import Layer
from .tensor import Parameter, Tensor, as_tensor


@dataclass
class AttentionMap:
    """Post-softmax affinity weights, one hw x hw matrix per image."""

    weights: np.ndarray

    def column_sums(self) -> np.ndarray:
        return self.weights.sum(axis=-2)


def unfold_mode3(x) -> Tensor:
    """Unfold (h,w,d) to a d x hw matrix; column j is the vector at
    row-major spatial position j."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"unfold_mode3 expects (h,w,d), got {x.shape}")
    h, w, d = x.shape
    return T.permute(T.reshape(x, (h * w, d)), (1, 0))


def fold_mode3(m, h: int, w: int) -> Tensor:
    """Inverse of unfold_mode3: d x hw back to (h,w,d)."""
    m = as_tensor(m)
    if m.ndim != 2 or m.shape[1] != h * w:
        raise DimensionError(f"cannot fold {m.shape} into {h}x{w} positions")
    return T.reshape(T.permute(m, (1, 0)), (h, w, m.shape[0]))


class AttentionBlock(Layer):
    """Residual self-attention layer for a c-channel feature map.

    Defaults d_k = d_v = c // 2 (min 1). Projections are bias-free 1x1 maps
    stored as (out, in) matrices. The affinity K^T Q is used unscaled.
    """

    def __init__(self, name: str, channels: int, d_k: int | None = None,
                 d_v: int | None = None, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if channels < 1:
            raise DimensionError("channels must be >= 1")
        self.channels = channels
        self.d_k = d_k if d_k is not None else max(1, channels // 2)
        self.d_v = d_v if d_v is not None else max(1, channels // 2)
        if self.d_k < 1 or self.d_v < 1:
            raise DimensionError("d_k and d_v must be >= 1")

        def init(dout, din):
            return rng.normal(0.0, np.sqrt(1.0 / din), size=(dout, din))

        self.w_q = Parameter(f"{name}.w_q", init(self.d_k, channels))
        self.w_k = Parameter(f"{name}.w_k", init(self.d_k, channels))
        self.w_v = Parameter(f"{name}.w_v", init(self.d_v, channels))
        self.w_out = Parameter(f"{name}.w_out", init(channels, self.d_v))

    def parameters(self):
        return [self.w_q, self.w_k, self.w_v, self.w_out]

    def forward(self, x, training=False):
        out, _ = attn_forward(self, x)
        return out


def attn_forward(block: AttentionBlock, x) -> tuple[Tensor, AttentionMap]:
    """Apply the block; returns the residual output and the attention map.

    Accepts (h,w,c) or (n,h,w,c); the map is hw x hw (or n x hw x hw).
    """
    x = as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x4 = T.reshape(x, (1,) + x.shape)
    elif x.ndim == 4:
        x4 = x
    else:
        raise DimensionError(f"expected image tensor, got shape {x.shape}")
    n, h, w, c = x4.shape
    if c != block.channels:
        raise DimensionError(
            f"input has {c} channels but block expects {block.channels}"
        )

    xm = T.permute(T.reshape(x4, (n, h * w, c)), (0, 2, 1))  # (n, c, hw)
    q = T.proj_channels(block.w_q, xm)                       # (n, d_k, hw)
    k = T.proj_channels(block.w_k, xm)
    v = T.proj_channels(block.w_v, xm)                       # (n, d_v, hw)

    affinity = T.bmm(T.permute(k, (0, 2, 1)), q)             # (n, hw, hw)
    weights = T.softmax_columns(affinity)
    mixed = T.bmm(v, weights)                                # (n, d_v, hw)
    out_m = T.proj_channels(block.w_out, mixed)              # (n, c, hw)
    out = T.reshape(T.permute(out_m, (0, 2, 1)), (n, h, w, c)) + x4

    amap = AttentionMap(weights.data[0] if squeeze else weights.data)
    return (T.reshape(out, (h, w, c)) if squeeze else out), amap
