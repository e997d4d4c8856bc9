"""Training objective: ordered VQ loss, semantic alignment, InfoNCE, weighted total.

All functions are written against :mod:`vorvq.gradcore`, so they return a
float-valued array for plain inputs and a tape node for recorded inputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import dsp
from . import gradcore as gc


@dataclass(frozen=True)
class LossWeights:
    lambda_ord: float = 1.0
    lambda_stft: float = 1.0
    lambda_adv: float = 0.0
    lambda_align: float = 1.0
    alpha: float = 1.0
    beta: float = 0.25
    tau: float = 0.07

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
            if v < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class TeacherEmbedding:
    """Frozen random affine map standing in for a pretrained semantic encoder."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def create(cls, in_dim: int, out_dim: int = 768, seed: int = 0) -> TeacherEmbedding:
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((in_dim, out_dim)) / math.sqrt(in_dim)
        b = 0.1 * rng.standard_normal(out_dim)
        w.setflags(write=False)
        b.setflags(write=False)
        return cls(w, b)

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def features(self, clean) -> np.ndarray:
        return np.asarray(clean, dtype=np.float64) @ self.weight + self.bias


def _frame_sq_mean(diff):
    """Squared Frobenius norm averaged over frames (rows)."""
    rows = gc.value_of(diff).shape[0]
    return gc.mul(gc.sum(gc.square(diff)), 1.0 / rows)


def codebook_term(zc_hat, zq_hat):
    return _frame_sq_mean(gc.sub(gc.stop_gradient(zc_hat), zq_hat))


def commitment_term(zc_hat, zq_hat):
    return _frame_sq_mean(gc.sub(zc_hat, gc.stop_gradient(zq_hat)))


def reconstruction_l2(decoded, target):
    if gc.value_of(decoded).shape != gc.value_of(target).shape:
        raise ValueError("decoded and target shapes differ")
    return _frame_sq_mean(gc.sub(decoded, target))


def ordered_objective(decoded, target, trace, beta: float = 0.25, mel: dsp.MelConfig | None = None):
    """Reconstruction + codebook + beta * commitment, summed over every stage.

    With ``mel=None`` (latent mode) the reconstruction is a frame-averaged L2
    on ``decoded`` frames; otherwise ``decoded``/``target`` are waveforms and the
    mel L2 is used.
    """
    if gc.value_of(decoded).shape != gc.value_of(target).shape:
        raise ValueError("decoded and target shapes differ")
    if mel is None:
        total = reconstruction_l2(decoded, target)
    else:
        total = dsp.mel_l2_loss(decoded, target, mel)
    return gc.add(total, vq_terms(trace, beta))


def vq_terms(trace, beta: float = 0.25):
    """Codebook plus beta-weighted commitment terms summed over all stages."""
    total = 0.0
    for zc, zq in zip(trace.zc_hat, trace.zq_hat):
        if gc.value_of(zc).shape != gc.value_of(zq).shape:
            raise ValueError("masked continuous and quantized stage tensors differ in shape")
        total = gc.add(total, codebook_term(zc, zq))
        total = gc.add(total, gc.mul(commitment_term(zc, zq), beta))
    return total


def semantic_l2(y_q, proj_weight, proj_bias, teacher_feats):
    """Squared error between projected embeddings and teacher features.

    Summed over features and averaged over frames.
    """
    if gc.value_of(y_q).shape[0] != np.shape(gc.value_of(teacher_feats))[0]:
        raise ValueError("frame counts differ")
    return _frame_sq_mean(gc.sub(gc.affine(y_q, proj_weight, proj_bias), teacher_feats))


def l2_normalize(features):
    return gc.l2_normalize(features)


def infonce(f_fake, f_real, tau: float = 0.07):
    """Contrastive loss with ``f_fake`` rows as anchors over the ``f_real`` set.

    Rows must already be unit-norm.  Row ``i`` of ``f_real`` is the positive
    for row ``i`` of ``f_fake``; every other row of ``f_real`` is a negative.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    fv, rv = gc.value_of(f_fake), gc.value_of(f_real)
    if fv.shape != rv.shape or fv.ndim != 2 or fv.shape[0] < 1:
        raise ValueError("f_fake and f_real must be matching K x D matrices with K >= 1")
    for name, v in (("f_fake", fv), ("f_real", rv)):
        if np.max(np.abs(np.linalg.norm(v, axis=1) - 1.0)) > 1e-6:
            raise ValueError(f"{name} rows are not L2-normalized")
    scale = 1.0 / tau
    logits = gc.mul(gc.matmul(f_fake, gc.transpose(f_real)), scale)
    positives = gc.mul(gc.sum(gc.mul(f_fake, f_real), axis=1), scale)
    return gc.mean(gc.sub(gc.logsumexp(logits, axis=1), positives))


def multires_stft_loss(decoded_wave, target_wave, resolutions=dsp.DEFAULT_RESOLUTIONS):
    """Mean over resolutions of the mean absolute STFT-magnitude difference."""
    if not resolutions:
        raise ValueError("need at least one (n_fft, hop) resolution")
    if gc.value_of(decoded_wave).shape != gc.value_of(target_wave).shape:
        raise ValueError("waveforms must have equal length")
    total = 0.0
    for n_fft, hop in resolutions:
        diff = gc.sub(dsp.stft_magnitude(decoded_wave, n_fft, hop), dsp.stft_magnitude(target_wave, n_fft, hop))
        total = gc.add(total, gc.mean(gc.absolute(diff)))
    return gc.mul(total, 1.0 / len(resolutions))


def total_loss(components: Mapping, w: LossWeights):
    """Weighted sum of the loss terms.

    ``components`` may hold ``ord``, ``stft``, ``adv``, ``nce`` and ``sem``;
    absent terms count as zero.  A non-zero adversarial weight is rejected
    unless an ``adv`` value is supplied.
    """
    unknown = set(components) - {"ord", "stft", "adv", "nce", "sem"}
    if unknown:
        raise ValueError(f"unknown loss components {sorted(unknown)}")
    for name, v in components.items():
        if not np.all(np.isfinite(gc.value_of(v))):
            raise ValueError(f"loss component {name} is not finite")
    if w.lambda_adv != 0 and "adv" not in components:
        raise ValueError("lambda_adv is non-zero but no adversarial loss was supplied")

    total = 0.0
    for weight, key in ((w.lambda_ord, "ord"), (w.lambda_stft, "stft"), (w.lambda_adv, "adv")):
        if key in components and weight != 0:
            total = gc.add(total, gc.mul(components[key], weight))
    if w.lambda_align != 0:
        align = gc.add(components.get("nce", 0.0), gc.mul(components.get("sem", 0.0), w.alpha))
        total = gc.add(total, gc.mul(align, w.lambda_align))
    return total
