"""Variational training objective and the training loop.

The latent row of each channel is modelled as i.i.d. zero-mean Laplacian
with a scale fitted by maximum likelihood (the mean absolute value); the
prior is a Laplacian with a small fixed scale ``lam``. The KL between the
two is closed-form, and the loss minimised is ``mse + epsilon * kl``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .bitstream import quantize
from .decoder import DecoderParams, decode_backward, decode_forward
from .diffnet import AdamWState, adamw_step
from .encoder import EncoderParams, encode_backward, encode_forward, encode_frame
from .errors import ConfigError, DivergenceError, InvalidInputError, InvalidParameterError
from .evalkit import Checkpoint

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-12


@dataclass
class LossConfig:
    lam: float = 1e-5
    epsilon: float = 1e-6  # at lam=1e-5 the KL is ~1e6 times the MSE
    rho: float = 0.6
    kl_direction: str = "forward"
    max_epochs: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.01
    tau: int = 2
    omega: float = 1.2

    def validate(self):
        if not self.lam > 0:
            raise InvalidParameterError(f"lambda must be positive, got {self.lam}")
        if not 0.0 <= self.rho <= 1.0:
            raise InvalidParameterError(f"rho must lie in [0, 1], got {self.rho}")
        if self.epsilon < 0:
            raise InvalidParameterError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.kl_direction not in ("forward", "reverse"):
            raise InvalidParameterError(f"kl_direction must be forward or reverse, got {self.kl_direction!r}")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0")

    def hyper(self) -> dict:
        return {"lambda": self.lam, "epsilon": self.epsilon, "rho": self.rho,
                "tau": self.tau, "omega": self.omega}


def mle_scale(latent) -> np.ndarray | float:
    """Mean absolute value along the last axis, floored at ``1e-12``."""
    f = np.maximum(np.mean(np.abs(np.asarray(latent, dtype=np.float64)), axis=-1), SCALE_FLOOR)
    return float(f) if np.ndim(f) == 0 else f


def kl_from_scale(f, lam: float, L: int, direction: str = "forward"):
    """Closed-form KL for ``L`` i.i.d. Laplacians with scale ``f`` against scale ``lam``."""
    if not lam > 0:
        raise InvalidParameterError(f"lambda must be positive, got {lam}")
    f = np.asarray(f, dtype=np.float64)
    if direction == "forward":
        out = f * L / lam + L * np.log(lam / f) - L
    elif direction == "reverse":
        out = lam * L / f + L * np.log(f / lam) - L
    else:
        raise InvalidParameterError(f"unknown KL direction {direction!r}")
    return float(out) if out.ndim == 0 else out


def kl_divergence(latent, lam: float, direction: str = "forward"):
    """KL of the fitted latent distribution against the prior, per channel row."""
    latent = np.asarray(latent, dtype=np.float64)
    return kl_from_scale(mle_scale(latent), lam, latent.shape[-1], direction)


def kl_gradient(latent, lam: float, direction: str = "forward") -> np.ndarray:
    """d KL / d latent, flowing through the MLE scale (``d f / d y = sign(y) / L``)."""
    latent = np.asarray(latent, dtype=np.float64)
    raw = np.mean(np.abs(latent), axis=-1, keepdims=True)
    f = np.maximum(raw, SCALE_FLOOR)
    if direction == "forward":
        dkl_df_over_L = 1.0 / lam - 1.0 / f
    else:
        dkl_df_over_L = 1.0 / f - lam / f**2
    # the floor is flat, so nothing flows back when it is active
    dkl_df_over_L = np.where(raw > SCALE_FLOOR, dkl_df_over_L, 0.0)
    return np.sign(latent) * dkl_df_over_L


def _check_shapes(frame, recon, latent):
    frame = np.asarray(frame, dtype=np.float64)
    recon = np.asarray(recon, dtype=np.float64)
    latent = np.asarray(latent, dtype=np.float64)
    if frame.shape != recon.shape or frame.shape != latent.shape:
        raise InvalidInputError(
            f"shape mismatch: frame {frame.shape}, reconstruction {recon.shape}, latent {latent.shape}"
        )
    return frame, recon, latent


def elbo_loss(frame, recon, latent, cfg: LossConfig):
    """Return ``(total, recon_term, kl_term)``, each averaged over channels (and frames)."""
    frame, recon, latent = _check_shapes(frame, recon, latent)
    rec = float(np.mean((frame - recon) ** 2))
    kl = float(np.mean(kl_divergence(latent, cfg.lam, cfg.kl_direction)))
    return rec + cfg.epsilon * kl, rec, kl


def elbo_backward(frame, recon, latent, cfg: LossConfig):
    """Gradients of the total loss w.r.t. the reconstruction and the latent."""
    frame, recon, latent = _check_shapes(frame, recon, latent)
    g_recon = 2.0 * (recon - frame) / frame.size
    rows = latent.size // latent.shape[-1]
    g_latent = cfg.epsilon * kl_gradient(latent, cfg.lam, cfg.kl_direction) / rows
    return g_recon, g_latent


def zero_fraction(q) -> float:
    ints = q.ints if hasattr(q, "ints") else np.asarray(q)
    return float(np.count_nonzero(ints == 0) / ints.size) if ints.size else 1.0


# -- whole-model helpers ------------------------------------------------------------


def init_model(C: int, L: int = 64, N: int = 3, h: int = 4, seed=0):
    """Identity-initialised encoder and decoder; only attention projections are random."""
    return EncoderParams.identity(L, N), DecoderParams.init(C, L, h, np.random.default_rng(seed))


def _pack(enc, dec) -> dict:
    params = {"enc." + k: v for k, v in enc.as_dict().items()}
    params.update({"dec." + k: v for k, v in dec.as_dict().items()})
    return params


def _unpack(params):
    enc = EncoderParams.from_dict({k[4:]: v for k, v in params.items() if k.startswith("enc.")})
    dec = DecoderParams.from_dict({k[4:]: v for k, v in params.items() if k.startswith("dec.")})
    return enc, dec


def loss_and_grads(frames, enc: EncoderParams, dec: DecoderParams, cfg: LossConfig):
    """Forward and backward over a batch; returns ``(total, recon, kl, grads)``.

    ``grads`` is keyed ``enc.<name>`` / ``dec.<name>`` like the checkpoint.
    """
    latent, enc_cache = encode_forward(frames, enc)
    recon, dec_cache = decode_forward(latent, dec)
    total, rec, kl = elbo_loss(frames, recon, latent, cfg)
    g_recon, g_latent_kl = elbo_backward(frames, recon, latent, cfg)
    g_latent, dec_grads = decode_backward(g_recon, dec_cache, dec)
    enc_grads = encode_backward(g_latent + g_latent_kl, enc_cache, enc)
    grads = {"enc." + k: v for k, v in enc_grads.items()}
    grads.update({"dec." + k: v for k, v in dec_grads.items()})
    return total, rec, kl, grads


def latent_zero_fraction(frames, enc: EncoderParams, tau: int, omega: float) -> float:
    return zero_fraction(quantize(encode_frame(frames, enc), tau, omega))


# -- training -----------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    recon: float
    kl: float
    zero_fraction: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    stopped_by_rho: bool = False

    def __len__(self):
        return len(self.records)

    def losses(self) -> list:
        return [r.loss for r in self.records]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "recon", "kl", "zero_fraction"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.loss), repr(r.recon), repr(r.kl), repr(r.zero_fraction)])


_CLAMPED = ("enc.t", "dec.dec_t")


def train(frames, enc: EncoderParams, dec: DecoderParams, cfg: LossConfig, seed=0,
          monitor=None, on_epoch=None):
    """Minibatch AdamW on the variational loss.

    After every epoch the quantized latent of ``monitor`` (default: the
    training frames) is checked, and training stops at the first epoch whose
    zero fraction reaches ``cfg.rho``. Returns ``(checkpoint, history)``.
    """
    cfg.validate()
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise InvalidInputError(f"training frames must be (F, C, L), got {frames.shape}")
    monitor = frames if monitor is None else np.asarray(monitor, dtype=np.float64)
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in _pack(enc, dec).items()}
    state = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = TrainHistory()
    n = frames.shape[0]
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = frames[order[start:start + cfg.batch_size]]
            enc_b, dec_b = _unpack(params)
            total, rec, kl, grads = loss_and_grads(batch, enc_b, dec_b, cfg)
            if not math.isfinite(total):
                raise DivergenceError(f"loss became {total} at epoch {epoch}, batch {b}", epoch, b)
            try:
                params, state = adamw_step(params, grads, state)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}, batch {b}", epoch, b) from None
            for name in _CLAMPED:
                params[name] = np.maximum(params[name], 0.0)
            sums += np.array([total, rec, kl]) * batch.shape[0]
        mean = sums / n
        enc_now, _ = _unpack(params)
        zf = latent_zero_fraction(monitor, enc_now, cfg.tau, cfg.omega)
        record = EpochRecord(epoch, float(mean[0]), float(mean[1]), float(mean[2]), zf)
        history.records.append(record)
        log.info("epoch %d loss %.6g recon %.6g kl %.6g zeros %.3f", *asdict(record).values())
        if on_epoch is not None:
            on_epoch(record)
        if zf >= cfg.rho:
            history.stopped_by_rho = True
            break
    enc_final, dec_final = _unpack(params)
    hyper = {"L": enc_final.block_length, "C": dec_final.channels, "N": enc_final.subbands,
             "h": dec_final.mha.heads, **cfg.hyper()}
    return Checkpoint.from_models(enc_final, dec_final, hyper), history
