"""Toy affine encoder / quantizer / decoder and its differentiable forward pass."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .quantizer import Codebook, Projections, VORVQConfig, init_codebooks, rvq_forward, vo_rvq_forward

QUANTIZERS = ("continuous", "rvq", "vo_rvq")


@dataclass
class ToyModel:
    """Parameters of the encoder -> quantizer -> decoder stack.

    ``cfg`` always describes the masked (triangular) stack; the plain RVQ
    variant uses ``cfg.unmasked()`` internally.
    """

    quantizer: str
    cfg: VORVQConfig
    enc_w: np.ndarray
    enc_b: np.ndarray
    dec_w: np.ndarray
    dec_b: np.ndarray
    proj: Projections
    codebooks: list[Codebook]
    align_w: np.ndarray | None = None
    align_b: np.ndarray | None = None

    def __post_init__(self):
        if self.quantizer not in QUANTIZERS:
            raise ValueError(f"quantizer must be one of {QUANTIZERS}")

    @property
    def quantized(self) -> bool:
        return self.quantizer != "continuous"

    @property
    def stack_cfg(self) -> VORVQConfig:
        return self.cfg.unmasked() if self.quantizer == "rvq" else self.cfg

    @property
    def n_accumulate(self) -> int:
        return self.cfg.n_stages if self.quantizer == "rvq" else self.cfg.n_enhanced

    def params(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name (live references, updated in place by SGD)."""
        p = {"enc_w": self.enc_w, "enc_b": self.enc_b, "dec_w": self.dec_w, "dec_b": self.dec_b}
        if self.quantized:
            p.update(
                proj_in_w=self.proj.in_weight,
                proj_in_b=self.proj.in_bias,
                proj_out_w=self.proj.out_weight,
                proj_out_b=self.proj.out_bias,
            )
            for cb in self.codebooks:
                p[f"codebook_{cb.stage_index}"] = cb.vectors
        if self.align_w is not None:
            p.update(align_w=self.align_w, align_b=self.align_b)
        return p

    def set_codebook(self, cb: Codebook) -> None:
        self.codebooks[cb.stage_index - 1] = cb

    # ------------------------------------------------------- numeric paths

    def encode(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.enc_w + self.enc_b

    def quantize(self, y_c):
        """Returns ``(y_q, trace)``; ``trace`` is None for the continuous model."""
        if not self.quantized:
            return np.asarray(y_c), None
        fwd = rvq_forward if self.quantizer == "rvq" else vo_rvq_forward
        y_q, trace = fwd(y_c, self.stack_cfg, self.proj, self.codebooks)
        return y_q.frames, trace

    def decode(self, y_q) -> np.ndarray:
        return y_q @ self.dec_w + self.dec_b


def init_model(
    quantizer: str,
    cfg: VORVQConfig,
    d_in: int,
    first_batch: np.ndarray,
    rng: np.random.Generator,
    teacher_dim: int | None = None,
) -> ToyModel:
    """Gaussian fan-in encoder/decoder, orthogonal projections, k-means++ codebooks."""
    d_lat = cfg.latent_dim
    enc_w = rng.standard_normal((d_in, d_lat)) / math.sqrt(d_in)
    dec_w = rng.standard_normal((d_lat, d_in)) / math.sqrt(d_lat)
    proj = Projections.orthogonal(d_lat, cfg.full_dim, rng)
    model = ToyModel(quantizer, cfg, enc_w, np.zeros(d_lat), dec_w, np.zeros(d_in), proj, [])
    if model.quantized:
        y_c = model.encode(first_batch)
        model.codebooks = init_codebooks(y_c, model.stack_cfg, proj, rng, masked=True)
    if teacher_dim:
        model.align_w = rng.standard_normal((d_lat, teacher_dim)) / math.sqrt(d_lat)
        model.align_b = np.zeros(teacher_dim)
    return model


@dataclass
class TapeForward:
    leaves: dict[str, gc.Var]
    y_c: gc.Var
    y_q: gc.Var
    decoded: gc.Var
    trace: object  # QuantizationTrace-like: zc_hat / zq_hat lists of Vars
    codes: np.ndarray


@dataclass
class _TapeTrace:
    zc_hat: list
    zq_hat: list


def tape_forward(model: ToyModel, x: np.ndarray, tape: gc.Tape) -> TapeForward:
    """Record encoder, quantizer cascade (straight-through) and decoder on ``tape``.

    Forward values agree bit-for-bit with the numeric path.
    """
    leaves = {name: tape.leaf(arr) for name, arr in model.params().items()}
    y_c = gc.affine(x, leaves["enc_w"], leaves["enc_b"])
    zcs, zqs, codes = [], [], []
    if not model.quantized:
        y_q = y_c
    else:
        cfg = model.stack_cfg
        r = y_c
        y_q = np.zeros((x.shape[0], cfg.latent_dim))
        for i, cb in enumerate(model.codebooks, start=1):
            table = leaves[f"codebook_{i}"]
            z = gc.affine(r, leaves["proj_in_w"], leaves["proj_in_b"])
            zc = gc.take_cols(z, cb.dim)
            c, zq_ste = gc.ste_quantize(zc, table)
            zq = gc.gather_rows(table, c)
            yq = gc.affine(gc.pad_cols(zq_ste, cfg.full_dim), leaves["proj_out_w"], leaves["proj_out_b"])
            if i <= model.n_accumulate:
                y_q = gc.add(y_q, yq)
            r = gc.sub(r, yq)
            zcs.append(zc)
            zqs.append(zq)
            codes.append(c)
    decoded = gc.affine(y_q, leaves["dec_w"], leaves["dec_b"])
    code_matrix = np.stack(codes, axis=1) if codes else np.zeros((x.shape[0], 0), dtype=np.int64)
    return TapeForward(leaves, y_c, y_q, decoded, _TapeTrace(zcs, zqs), code_matrix)
