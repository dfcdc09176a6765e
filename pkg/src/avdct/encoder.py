"""Edge-side compressor.

Each channel block goes through a linear filter and then a DCT compression
unit: forward cosine transform, ``N`` parallel (hard-threshold, scale)
subbands, and a bias-free 1x1 convolution that fuses the subbands back into
one length-``L`` latent row. One parameter set is shared by all channels
unless ``per_channel`` is requested.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffnet as nn
from .errors import ConfigError
from .transform import dct_matrix

PARAM_NAMES = ("lin_w", "lin_b", "t", "v", "fuse_w")


@dataclass
class EncoderParams:
    lin_w: np.ndarray  # (L, L) or (C, L, L)
    lin_b: np.ndarray  # (L,) or (C, L)
    t: np.ndarray  # (N, L) or (C, N, L), non-negative
    v: np.ndarray  # (N, L) or (C, N, L)
    fuse_w: np.ndarray  # (N,) or (C, N)

    @classmethod
    def identity(cls, L: int = 64, N: int = 3, C: int | None = None) -> "EncoderParams":
        """Parameters for which the encoder is exactly the per-channel DCT.

        Passing ``C`` allocates a separate parameter set for every channel.
        """
        if L < 1 or N < 1:
            raise ConfigError(f"need L >= 1 and N >= 1, got L={L}, N={N}")
        lead = () if C is None else (C,)
        fuse = np.zeros(lead + (N,))
        fuse[..., 0] = 1.0
        return cls(
            lin_w=np.broadcast_to(np.eye(L), lead + (L, L)).copy(),
            lin_b=np.zeros(lead + (L,)),
            t=np.zeros(lead + (N, L)),
            v=np.ones(lead + (N, L)),
            fuse_w=fuse,
        )

    @property
    def per_channel(self) -> bool:
        return self.lin_w.ndim == 3

    @property
    def block_length(self) -> int:
        return self.lin_w.shape[-1]

    @property
    def subbands(self) -> int:
        return self.fuse_w.shape[-1]

    def validate(self):
        L, N = self.block_length, self.subbands
        lead = self.lin_w.shape[:-2]
        expected = {
            "lin_w": lead + (L, L),
            "lin_b": lead + (L,),
            "t": lead + (N, L),
            "v": lead + (N, L),
            "fuse_w": lead + (N,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(
                    f"encoder parameter {name} has shape {getattr(self, name).shape}, expected {shape}"
                )
        if np.any(self.t < 0):
            raise ConfigError("encoder thresholds must be non-negative")

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderParams":
        return cls(**{n: np.asarray(d[n], dtype=np.float64) for n in PARAM_NAMES})

    def copy(self) -> "EncoderParams":
        return EncoderParams.from_dict({k: v.copy() for k, v in self.as_dict().items()})


def dcu(x, p: EncoderParams) -> np.ndarray:
    """DCT compression unit applied to block(s) ``x`` of length ``L``."""
    p.validate()
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.block_length:
        raise ConfigError(f"block length {x.shape[-1]} does not match encoder L={p.block_length}")
    return _dcu_forward(x, p)[0]


def _dcu_forward(x, p):
    y = x @ dct_matrix(p.block_length).T
    y_sub = y[..., None, :]
    e = nn.hard_threshold(y_sub, p.t)
    h = nn.scale(e, p.v)
    z = nn.conv1x1(h, p.fuse_w)
    return z, (y_sub, e, h)


def _check_frames(frames, p: EncoderParams) -> np.ndarray:
    p.validate()
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim < 2 or frames.shape[-1] != p.block_length:
        raise ConfigError(
            f"frame shape {frames.shape} incompatible with encoder L={p.block_length}"
        )
    if p.per_channel and frames.shape[-2] != p.lin_w.shape[0]:
        raise ConfigError(
            f"frame has {frames.shape[-2]} channels, encoder has {p.lin_w.shape[0]} parameter sets"
        )
    return frames


def encode_forward(frames, p: EncoderParams):
    """Encode ``(..., C, L)`` frames; returns ``(latent, cache)`` for backprop."""
    frames = _check_frames(frames, p)
    xbar = nn.linear(frames, p.lin_w, p.lin_b)
    z, dcu_cache = _dcu_forward(xbar, p)
    return z, (frames, dcu_cache)


def encode_frame(frame, p: EncoderParams) -> np.ndarray:
    """Latent coefficients for a ``C x L`` frame (or a stack of frames)."""
    return encode_forward(frame, p)[0]


def encode_backward(g, cache, p: EncoderParams) -> dict:
    """Gradients of every encoder parameter given ``dLoss/dlatent``."""
    frames, (y_sub, e, h) = cache
    gh, g_fuse = nn.conv1x1_backward(g, h, p.fuse_w)
    ge, g_v = nn.scale_backward(gh, e, p.v)
    gy_sub, g_t = nn.hard_threshold_backward(ge, y_sub, p.t)
    gy = gy_sub.sum(axis=-2)
    gxbar = gy @ dct_matrix(p.block_length)
    _, g_w, g_b = nn.linear_backward(gxbar, frames, p.lin_w)
    return {"lin_w": g_w, "lin_b": g_b, "t": g_t, "v": g_v, "fuse_w": g_fuse}


def model_stats(L: int = 64, N: int = 3, C: int = 64) -> tuple[int, int]:
    """Trainable parameter count and multiply-accumulates per ``C x L`` frame.

    MACs per channel: ``L*L`` for the linear layer, ``L*L`` for the matrix
    DCT, and ``L`` for each of threshold, scale and fuse in every subband.
    """
    params = L * L + L + 2 * N * L + N
    macs = C * (L * L + L * L + 3 * N * L)
    return params, macs
