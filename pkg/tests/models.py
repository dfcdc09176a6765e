"""Randomised encoder/decoder instances away from the identity fixed point."""

import numpy as np

from avdct.decoder import DecoderParams
from avdct.encoder import EncoderParams


def random_encoder(L, N, rng, C=None):
    lead = () if C is None else (C,)
    return EncoderParams(
        lin_w=np.eye(L) + 0.5 * rng.normal(size=lead + (L, L)),
        lin_b=0.1 * rng.normal(size=lead + (L,)),
        t=rng.uniform(0.05, 0.3, size=lead + (N, L)),
        v=rng.normal(size=lead + (N, L)),
        fuse_w=rng.normal(size=lead + (N,)),
    )


def random_decoder(C, L, h, rng):
    d = DecoderParams.init(C, L, h, rng).as_dict()
    d = {k: v + 0.3 * rng.normal(size=v.shape) for k, v in d.items()}
    d["dec_t"] = rng.uniform(0.01, 0.1, size=L)
    return DecoderParams.from_dict(d)
