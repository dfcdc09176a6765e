"""Fog-side reconstructor.

Pipeline per frame: two-stage cross-channel filter bank over the latent,
residual multi-head attention on the ``L x C`` feature map, a channel-axis
linear layer, a hard threshold per DCT index, column-wise inverse DCT, and a
shared output linear layer per channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffnet as nn
from .diffnet import MhaParams
from .errors import ConfigError, InvalidInputError
from .transform import dct_matrix

_OWN = ("fb_f", "fb_g", "post_w", "post_b", "dec_t", "out_w", "out_b")
PARAM_NAMES = _OWN + tuple("mha." + n for n in MhaParams.names)


@dataclass
class DecoderParams:
    fb_f: np.ndarray  # (C-1, L)
    fb_g: np.ndarray  # (C-1, L)
    mha: MhaParams
    post_w: np.ndarray  # (C, C)
    post_b: np.ndarray  # (C,)
    dec_t: np.ndarray  # (L,), non-negative
    out_w: np.ndarray  # (L, L)
    out_b: np.ndarray  # (L,)

    @classmethod
    def init(cls, C: int = 64, L: int = 64, h: int = 4, rng=None) -> "DecoderParams":
        """Identity-path initialisation: zero filter bank, zero attention output,
        identity channel and output linears, zero threshold. The attention
        projections are drawn fan-in uniform from ``rng``."""
        if C < 1 or L < 1:
            raise ConfigError(f"need C >= 1 and L >= 1, got C={C}, L={L}")
        return cls(
            fb_f=np.zeros((C - 1, L)),
            fb_g=np.zeros((C - 1, L)),
            mha=MhaParams.init(C, h, rng),
            post_w=np.eye(C),
            post_b=np.zeros(C),
            dec_t=np.zeros(L),
            out_w=np.eye(L),
            out_b=np.zeros(L),
        )

    @property
    def channels(self) -> int:
        return self.post_w.shape[0]

    @property
    def block_length(self) -> int:
        return self.out_w.shape[0]

    def validate(self):
        C, L = self.channels, self.block_length
        expected = {
            "fb_f": (C - 1, L),
            "fb_g": (C - 1, L),
            "post_w": (C, C),
            "post_b": (C,),
            "dec_t": (L,),
            "out_w": (L, L),
            "out_b": (L,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(
                    f"decoder parameter {name} has shape {getattr(self, name).shape}, expected {shape}"
                )
        self.mha.validate()
        if self.mha.channels != C:
            raise ConfigError(f"attention expects {self.mha.channels} channels, decoder has {C}")
        if np.any(self.dec_t < 0):
            raise ConfigError("decoder thresholds must be non-negative")

    def as_dict(self) -> dict:
        d = {n: getattr(self, n) for n in _OWN}
        d.update({"mha." + n: a for n, a in self.mha.as_dict().items()})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderParams":
        arr = {k: np.asarray(v, dtype=np.float64) for k, v in d.items()}
        mha = MhaParams(**{n: arr["mha." + n] for n in MhaParams.names})
        return cls(mha=mha, **{n: arr[n] for n in _OWN})

    def copy(self) -> "DecoderParams":
        return DecoderParams.from_dict({k: v.copy() for k, v in self.as_dict().items()})


def filter_bank(latent, fb_f, fb_g) -> np.ndarray:
    """Mix each channel with its neighbours; returns ``S`` of shape ``(..., L, C)``."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim < 2 or latent.shape[-2] < 1:
        raise InvalidInputError(f"latent must be (..., C, L) with C >= 1, got {latent.shape}")
    C, L = latent.shape[-2:]
    if fb_f.shape != (C - 1, L) or fb_g.shape != (C - 1, L):
        raise ConfigError(f"filter bank shapes {fb_f.shape}, {fb_g.shape} do not fit a {C}x{L} latent")
    return np.swapaxes(_filter_bank_rows(latent, fb_f, fb_g)[0], -1, -2)


def _filter_bank_rows(y, f, g):
    u = y.copy()
    u[..., 1:, :] += y[..., :-1, :] * f
    s = u.copy()
    s[..., :-1, :] += u[..., 1:, :] * g
    return s, u


def _filter_bank_backward(gs, y, u, f, g):
    gu = gs.copy()
    gu[..., 1:, :] += gs[..., :-1, :] * g
    grad_g = nn._reduce_to(gs[..., :-1, :] * u[..., 1:, :], g.shape)
    gy = gu.copy()
    gy[..., :-1, :] += gu[..., 1:, :] * f
    grad_f = nn._reduce_to(gu[..., 1:, :] * y[..., :-1, :], f.shape)
    return gy, grad_f, grad_g


def irmha(s, p: DecoderParams) -> np.ndarray:
    """Residual attention, channel linear, threshold, column-wise IDCT."""
    p.validate()
    return _irmha_forward(np.asarray(s, dtype=np.float64), p)[0]


def _irmha_forward(s, p):
    att, att_cache = nn.mha_forward(s, p.mha)
    r = s + att
    m = nn.linear(r, p.post_w, p.post_b)
    ht = nn.hard_threshold(m, p.dec_t[:, None])
    s_bar = dct_matrix(p.block_length).T @ ht
    return s_bar, (att_cache, r, m)


def decode_forward(latent, p: DecoderParams):
    """Reconstruct ``(..., C, L)`` frames; returns ``(frames, cache)``."""
    p.validate()
    latent = np.asarray(latent, dtype=np.float64)
    C, L = p.channels, p.block_length
    if latent.ndim < 2 or latent.shape[-2:] != (C, L):
        raise ConfigError(f"latent shape {latent.shape} does not match decoder ({C}, {L})")
    s_rows, u = _filter_bank_rows(latent, p.fb_f, p.fb_g)
    s = np.swapaxes(s_rows, -1, -2)
    s_bar, irmha_cache = _irmha_forward(s, p)
    cols = np.swapaxes(s_bar, -1, -2)
    z = nn.linear(cols, p.out_w, p.out_b)
    return z, (latent, u, irmha_cache, cols)


def decode_frame(latent, p: DecoderParams) -> np.ndarray:
    return decode_forward(latent, p)[0]


def decode_backward(gz, cache, p: DecoderParams):
    """Return ``(grad_latent, grads)`` with ``grads`` keyed like :meth:`DecoderParams.as_dict`."""
    latent, u, (att_cache, r, m), cols = cache
    gcols, g_out_w, g_out_b = nn.linear_backward(gz, cols, p.out_w)
    g_sbar = np.swapaxes(gcols, -1, -2)
    g_ht = dct_matrix(p.block_length) @ g_sbar
    g_m, g_dec_t = nn.hard_threshold_backward(g_ht, m, p.dec_t[:, None])
    g_r, g_post_w, g_post_b = nn.linear_backward(g_m, r, p.post_w)
    g_s_att, g_mha = nn.mha_backward(g_r, att_cache, p.mha)
    g_s = g_r + g_s_att
    g_latent, g_f, g_g = _filter_bank_backward(np.swapaxes(g_s, -1, -2), latent, u, p.fb_f, p.fb_g)
    grads = {
        "fb_f": g_f,
        "fb_g": g_g,
        "post_w": g_post_w,
        "post_b": g_post_b,
        "dec_t": g_dec_t[:, 0],
        "out_w": g_out_w,
        "out_b": g_out_b,
    }
    grads.update({"mha." + n: a for n, a in g_mha.items()})
    return g_latent, grads
