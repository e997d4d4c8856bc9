"""Binary codebook bundle (``VORVQ1``) reader and writer.

Layout, all little-endian::

    8 bytes   magic b"VORVQ1\\0\\0"
    4 x u32   N, N_e, D_latent, d_full
    N x (u32 d_i, u32 K_i)
    f64[]     proj_in (D_latent x d_full, row-major), proj_in bias (d_full)
    f64[]     proj_out (d_full x D_latent, row-major), proj_out bias (D_latent)
    f64[]     codebook 1 .. N vectors (K_i x d_i, row-major)
    u32       CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .quantizer import Codebook, Projections, VORVQConfig

MAGIC = b"VORVQ1\x00\x00"
_F64 = np.dtype("<f8")


class BundleError(ValueError):
    """Malformed or corrupted bundle bytes."""


def encode_bundle(cfg: VORVQConfig, proj: Projections, codebooks: list[Codebook]) -> bytes:
    if len(codebooks) != cfg.n_stages:
        raise ValueError("one codebook per stage required")
    parts = [MAGIC, struct.pack("<4I", cfg.n_stages, cfg.n_enhanced, cfg.latent_dim, cfg.full_dim)]
    for cb in codebooks:
        parts.append(struct.pack("<2I", cb.dim, cb.size))
    for arr in (proj.in_weight, proj.in_bias, proj.out_weight, proj.out_bias, *(cb.vectors for cb in codebooks)):
        parts.append(np.ascontiguousarray(arr, dtype=_F64).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_bundle(data: bytes) -> tuple[VORVQConfig, Projections, list[Codebook]]:
    """Parse bundle bytes.  The returned config carries ``seed=0``."""
    if len(data) < len(MAGIC) + 20:
        raise BundleError("bundle too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise BundleError("CRC32 mismatch")
    if body[:8] != MAGIC:
        raise BundleError("bad magic bytes")
    pos = 8
    n, n_e, latent, full = struct.unpack_from("<4I", body, pos)
    pos += 16
    shapes = []
    for _ in range(n):
        shapes.append(struct.unpack_from("<2I", body, pos))
        pos += 8

    def read(rows, cols=None):
        nonlocal pos
        count = rows * (cols or 1)
        if pos + 8 * count > len(body):
            raise BundleError("truncated bundle")
        arr = np.frombuffer(body, dtype=_F64, count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        return arr.reshape(rows, cols) if cols is not None else arr

    proj = Projections(read(latent, full), read(full), read(full, latent), read(latent))
    books = [Codebook(i, read(k, d)) for i, (d, k) in enumerate(shapes, start=1)]
    if pos != len(body):
        raise BundleError(f"{len(body) - pos} trailing bytes before CRC")
    # the stored shapes are the source of truth; an unmasked (plain RVQ) stack keeps full_dim everywhere
    cfg = VORVQConfig(
        n_stages=n,
        n_enhanced=n_e,
        n_noise=n - n_e,
        latent_dim=latent,
        full_dim=full,
        kept_dims=tuple(d for d, _ in shapes),
        codebook_sizes=tuple(k for _, k in shapes),
    )
    return cfg, proj, books


def save_bundle(path, cfg: VORVQConfig, proj: Projections, codebooks: list[Codebook]) -> None:
    Path(path).write_bytes(encode_bundle(cfg, proj, codebooks))


def load_bundle(path) -> tuple[VORVQConfig, Projections, list[Codebook]]:
    return decode_bundle(Path(path).read_bytes())
