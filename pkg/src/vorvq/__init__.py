"""Variance-ordered residual vector quantization on a desk-scale toy codec."""

from .bundle import BundleError, decode_bundle, encode_bundle, load_bundle, save_bundle
from .quantizer import (
    Codebook,
    LatentSequence,
    Projections,
    QuantizationTrace,
    VORVQConfig,
    decode_codes,
    init_codebooks,
    kmeans_pp_init,
    linear_schedule,
    nearest_code,
    nearest_codes,
    quantize_stage,
    refresh_dead_codes,
    rvq_forward,
    vo_rvq_forward,
)

__all__ = [
    "BundleError",
    "Codebook",
    "LatentSequence",
    "Projections",
    "QuantizationTrace",
    "VORVQConfig",
    "decode_bundle",
    "decode_codes",
    "encode_bundle",
    "init_codebooks",
    "kmeans_pp_init",
    "linear_schedule",
    "load_bundle",
    "nearest_code",
    "nearest_codes",
    "quantize_stage",
    "refresh_dead_codes",
    "rvq_forward",
    "save_bundle",
    "vo_rvq_forward",
]
