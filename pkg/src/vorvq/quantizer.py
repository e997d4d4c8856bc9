"""Residual vector quantization with triangular (variance-ordered) masking.

Every stage projects the running residual into a shared ``full_dim`` space,
keeps only the first ``kept_dims[i]`` coordinates, snaps them to the nearest
code, zero-pads back and projects out again.  All stages update the residual,
but only the first ``n_enhanced`` stages contribute to the output ``y_q``; the
remaining stages absorb what is left (the noise stages).

Stage indices are 1-based in the public API, matching how stages are usually
counted; lists such as ``kept_dims`` and ``codebook_sizes`` are 0-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import gradcore as gc


def linear_schedule(n_stages: int, full_dim: int) -> list[int]:
    """Kept dimensions ``ceil(i * full_dim / n_stages)`` for ``i = 1..n_stages``."""
    return [math.ceil(i * full_dim / n_stages) for i in range(1, n_stages + 1)]


@dataclass(frozen=True)
class VORVQConfig:
    n_stages: int
    n_enhanced: int
    n_noise: int
    latent_dim: int
    full_dim: int
    kept_dims: tuple[int, ...]
    codebook_sizes: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kept_dims", tuple(int(d) for d in self.kept_dims))
        object.__setattr__(self, "codebook_sizes", tuple(int(k) for k in self.codebook_sizes))
        if self.n_stages < 0 or self.n_enhanced < 0 or self.n_noise < 0:
            raise ValueError("stage counts must be non-negative")
        if self.n_enhanced + self.n_noise != self.n_stages:
            raise ValueError(
                f"n_enhanced + n_noise must equal n_stages ({self.n_enhanced} + {self.n_noise} != {self.n_stages})"
            )
        if self.latent_dim < 1 or self.full_dim < 1:
            raise ValueError("latent_dim and full_dim must be positive")
        if len(self.kept_dims) != self.n_stages or len(self.codebook_sizes) != self.n_stages:
            raise ValueError("kept_dims and codebook_sizes need one entry per stage")
        if self.n_stages:
            if any(d < 1 for d in self.kept_dims):
                raise ValueError("kept dims must be positive")
            if any(b < a for a, b in zip(self.kept_dims, self.kept_dims[1:])):
                raise ValueError("kept dims must be non-decreasing")
            if self.kept_dims[-1] != self.full_dim:
                raise ValueError("the last stage must keep all full_dim dimensions")
        if any(k < 2 for k in self.codebook_sizes):
            raise ValueError("every codebook needs at least 2 codes")

    @classmethod
    def build(
        cls,
        n_stages: int = 5,
        n_enhanced: int = 4,
        latent_dim: int = 16,
        full_dim: int = 16,
        codebook_size: int = 64,
        seed: int = 0,
        masked: bool = True,
    ) -> VORVQConfig:
        kept = linear_schedule(n_stages, full_dim) if masked else [full_dim] * n_stages
        return cls(
            n_stages=n_stages,
            n_enhanced=n_enhanced,
            n_noise=n_stages - n_enhanced,
            latent_dim=latent_dim,
            full_dim=full_dim,
            kept_dims=tuple(kept),
            codebook_sizes=(codebook_size,) * n_stages,
            seed=seed,
        )

    def unmasked(self) -> VORVQConfig:
        """Same structure with every stage keeping all ``full_dim`` dimensions."""
        return replace(self, kept_dims=(self.full_dim,) * self.n_stages)


@dataclass
class Codebook:
    stage_index: int
    vectors: np.ndarray
    usage_counts: np.ndarray = None
    idle_steps: np.ndarray = None

    def __post_init__(self):
        self.vectors = np.array(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("codebook vectors must be a K x dim matrix")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("codebook vectors must be finite")
        k = self.vectors.shape[0]
        if self.usage_counts is None:
            self.usage_counts = np.zeros(k, dtype=np.int64)
        if self.idle_steps is None:
            self.idle_steps = np.zeros(k, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def record_usage(self, codes) -> None:
        """Accumulate one step's assignments; unused codes age by one step."""
        hits = np.bincount(np.asarray(codes).ravel(), minlength=self.size)
        self.usage_counts += hits
        self.idle_steps = np.where(hits > 0, 0, self.idle_steps + 1)

    def perplexity(self, codes) -> float:
        p = np.bincount(np.asarray(codes).ravel(), minlength=self.size) / np.asarray(codes).size
        p = p[p > 0]
        return float(np.exp(-np.sum(p * np.log(p))))


@dataclass
class Projections:
    """Shared stage projections: ``z = r @ in_weight + in_bias`` and back."""

    in_weight: np.ndarray
    in_bias: np.ndarray
    out_weight: np.ndarray
    out_bias: np.ndarray

    def __post_init__(self):
        self.in_weight = np.array(self.in_weight, dtype=np.float64)
        self.in_bias = np.array(self.in_bias, dtype=np.float64)
        self.out_weight = np.array(self.out_weight, dtype=np.float64)
        self.out_bias = np.array(self.out_bias, dtype=np.float64)
        latent, full = self.in_weight.shape
        if self.in_bias.shape != (full,):
            raise ValueError("in_bias must have length full_dim")
        if self.out_weight.shape != (full, latent):
            raise ValueError("out_weight must be full_dim x latent_dim")
        if self.out_bias.shape != (latent,):
            raise ValueError("out_bias must have length latent_dim")

    @property
    def latent_dim(self) -> int:
        return self.in_weight.shape[0]

    @property
    def full_dim(self) -> int:
        return self.in_weight.shape[1]

    @classmethod
    def identity(cls, dim: int) -> Projections:
        return cls(np.eye(dim), np.zeros(dim), np.eye(dim), np.zeros(dim))

    @classmethod
    def orthogonal(cls, latent_dim: int, full_dim: int, rng: np.random.Generator) -> Projections:
        """Random orthonormal ``proj_in`` with ``proj_out`` its transpose.

        With this pairing every stage starts as an orthogonal projection, so the
        residual norm cannot grow along the cascade.
        """
        big, small = max(latent_dim, full_dim), min(latent_dim, full_dim)
        q, _ = np.linalg.qr(rng.standard_normal((big, small)))
        w = q if latent_dim >= full_dim else q.T
        return cls(w, np.zeros(full_dim), w.T.copy(), np.zeros(latent_dim))


@dataclass
class QuantizationTrace:
    """Per-stage tensors of one forward pass, each with a leading time axis."""

    zc_hat: list
    zq_hat: list
    codes: np.ndarray
    stage_outputs: list
    residuals: list
    y_q: object
    n_enhanced: int

    @property
    def n_stages(self) -> int:
        return len(self.stage_outputs)

    def enhanced_sum(self) -> np.ndarray:
        return _stage_sum(self.stage_outputs[: self.n_enhanced], self.residuals)

    def noise_sum(self) -> np.ndarray:
        return _stage_sum(self.stage_outputs[self.n_enhanced :], self.residuals)


def _stage_sum(outputs, residuals) -> np.ndarray:
    total = np.zeros_like(gc.value_of(residuals[0]))
    for y in outputs:
        total = total + gc.value_of(y)
    return total


@dataclass
class LatentSequence:
    frames: np.ndarray
    frame_rate: float | None = None

    def __post_init__(self):
        self.frames = np.array(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a T x D matrix")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("latent frames must be finite")

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return self.frames.shape[0]


# --------------------------------------------------------------------- lookup


def nearest_codes(points: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Index of the closest code for every row; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[-1] != vectors.shape[1]:
        raise ValueError(f"dimension mismatch: points have {points.shape[-1]}, codes have {vectors.shape[1]}")
    # fast expanded distances pick candidates; rows with a near-tie are re-scored
    # with the exact sum of squared differences so results never depend on
    # the expansion's rounding
    # (the per-row |p|^2 term does not affect the argmin and is left out)
    sq_p = np.sum(points * points, axis=1)
    sq_c = np.sum(vectors * vectors, axis=1)
    d2 = points @ (-2.0 * vectors.T)
    d2 += sq_c
    codes = np.argmin(d2, axis=1)
    best = d2[np.arange(len(d2)), codes]
    margin = 1e-9 * (sq_p + sq_c.max()) + 1e-300
    close = d2 <= (best + margin)[:, None]
    for r in np.flatnonzero(np.count_nonzero(close, axis=1) > 1):
        exact = np.sum((points[r] - vectors) ** 2, axis=1)
        exact[~close[r]] = np.inf
        codes[r] = np.argmin(exact)
    return codes


def nearest_code(v, cb: Codebook) -> tuple[int, np.ndarray]:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != cb.dim:
        raise ValueError(f"expected a vector of length {cb.dim}, got shape {v.shape}")
    idx = int(nearest_codes(v[None, :], cb.vectors)[0])
    return idx, cb.vectors[idx].copy()


def kmeans_pp_init(data, k: int, seed) -> np.ndarray:
    """k-means++ seeding: first center uniform, then D^2-weighted draws.

    ``seed`` may be an integer or a ``numpy.random.Generator``.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] < 1:
        raise ValueError("data must be an M x d matrix with d >= 1")
    m = data.shape[0]
    if m < k:
        raise ValueError(f"need at least K={k} rows, got {m}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = [int(rng.integers(m))]
    d2 = np.sum((data - data[chosen[0]]) ** 2, axis=1)
    taken = np.zeros(m, dtype=bool)
    taken[chosen[0]] = True
    for _ in range(k - 1):
        weights = np.where(taken, 0.0, d2)
        total = weights.sum()
        if total > 0:
            j = int(rng.choice(m, p=weights / total))
        else:
            # every remaining row duplicates a chosen center
            j = int(rng.choice(np.flatnonzero(~taken)))
        chosen.append(j)
        taken[j] = True
        d2 = np.minimum(d2, np.sum((data - data[j]) ** 2, axis=1))
    return data[chosen].copy()


# -------------------------------------------------------------------- stages


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")


def quantize_stage(residual, i: int, proj: Projections, cb: Codebook):
    """One stage of the cascade for a vector or a T x D block of residuals.

    Returns ``(codes, yq_i, zc_hat_i, zq_hat_i)``.  The kept width is the
    codebook dimension.
    """
    if cb.stage_index != i:
        raise ValueError(f"codebook belongs to stage {cb.stage_index}, not {i}")
    r = np.asarray(residual, dtype=np.float64)
    single = r.ndim == 1
    r = np.atleast_2d(r)
    _check_finite(r, "residual")
    if r.shape[1] != proj.latent_dim:
        raise ValueError(f"residual has dim {r.shape[1]}, projections expect {proj.latent_dim}")
    if cb.dim > proj.full_dim:
        raise ValueError("codebook is wider than the projected space")
    z = r @ proj.in_weight + proj.in_bias
    zc_hat = z[:, : cb.dim].copy()
    codes = nearest_codes(zc_hat, cb.vectors)
    zq_hat = cb.vectors[codes]
    z_q = np.zeros((r.shape[0], proj.full_dim))
    z_q[:, : cb.dim] = zq_hat
    yq = z_q @ proj.out_weight + proj.out_bias
    if single:
        return int(codes[0]), yq[0], zc_hat[0], zq_hat[0]
    return codes, yq, zc_hat, zq_hat


def _check_stack(y_c: np.ndarray, cfg: VORVQConfig, proj: Projections, codebooks, masked: bool) -> None:
    if y_c.ndim != 2 or y_c.shape[1] != cfg.latent_dim:
        raise ValueError(f"expected T x {cfg.latent_dim} latents, got shape {y_c.shape}")
    if proj.latent_dim != cfg.latent_dim or proj.full_dim != cfg.full_dim:
        raise ValueError("projection shapes disagree with the config")
    if len(codebooks) != cfg.n_stages:
        raise ValueError(f"expected {cfg.n_stages} codebooks, got {len(codebooks)}")
    for i, cb in enumerate(codebooks, start=1):
        want = cfg.kept_dims[i - 1] if masked else cfg.full_dim
        if cb.stage_index != i:
            raise ValueError(f"codebook {i} is labelled as stage {cb.stage_index}")
        if cb.vectors.shape != (cfg.codebook_sizes[i - 1], want):
            raise ValueError(
                f"stage {i} codebook has shape {cb.vectors.shape}, expected {(cfg.codebook_sizes[i - 1], want)}"
            )


def _cascade(y_c, cfg, proj, codebooks, masked: bool, n_accumulate: int):
    frames = y_c.frames if isinstance(y_c, LatentSequence) else np.asarray(y_c, dtype=np.float64)
    _check_stack(frames, cfg, proj, codebooks, masked)
    _check_finite(frames, "y_c")
    rate = y_c.frame_rate if isinstance(y_c, LatentSequence) else None

    y_q = np.zeros_like(frames)
    r = frames
    residuals, outputs, zcs, zqs, codes = [frames], [], [], [], []
    for i, cb in enumerate(codebooks, start=1):
        c, yq_i, zc, zq = quantize_stage(r, i, proj, cb)
        if i <= n_accumulate:
            y_q = y_q + yq_i
        r = r - yq_i
        residuals.append(r)
        outputs.append(yq_i)
        zcs.append(zc)
        zqs.append(zq)
        codes.append(c)
    code_matrix = np.stack(codes, axis=1) if codes else np.zeros((frames.shape[0], 0), dtype=np.int64)
    trace = QuantizationTrace(zcs, zqs, code_matrix, outputs, residuals, y_q, cfg.n_enhanced)
    return LatentSequence(y_q, rate), trace


def vo_rvq_forward(y_c, cfg: VORVQConfig, proj: Projections, codebooks):
    """Masked cascade; ``y_q`` sums the first ``n_enhanced`` stage outputs only."""
    return _cascade(y_c, cfg, proj, codebooks, masked=True, n_accumulate=cfg.n_enhanced)


def rvq_forward(y_c, cfg: VORVQConfig, proj: Projections, codebooks):
    """Plain residual VQ baseline: no masking, all stages accumulate."""
    return _cascade(y_c, cfg, proj, codebooks, masked=False, n_accumulate=cfg.n_stages)


def decode_codes(codes, cfg: VORVQConfig, proj: Projections, codebooks, n_accumulate: int | None = None) -> np.ndarray:
    """Rebuild ``y_q`` from a T x N code matrix (bit-identical to the forward pass)."""
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[1] != cfg.n_stages:
        raise ValueError(f"codes must be T x {cfg.n_stages}")
    n_accumulate = cfg.n_enhanced if n_accumulate is None else n_accumulate
    y_q = np.zeros((codes.shape[0], cfg.latent_dim))
    for i in range(n_accumulate):
        cb = codebooks[i]
        col = codes[:, i]
        if np.any(col < 0) or np.any(col >= cb.size):
            raise ValueError(f"stage {i + 1} code out of range [0, {cb.size})")
        z_q = np.zeros((codes.shape[0], cfg.full_dim))
        z_q[:, : cb.dim] = cb.vectors[col]
        y_q = y_q + (z_q @ proj.out_weight + proj.out_bias)
    return y_q


def refresh_dead_codes(cb: Codebook, recent_batch, threshold: int = 2, seed=0) -> Codebook:
    """Replace codes idle for ``threshold`` or more steps with batch samples.

    ``recent_batch`` holds recent stage inputs; only their first ``cb.dim``
    columns (the kept dims) are used.  Returns a new codebook whose refreshed
    entries have their counters reset.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    batch = np.atleast_2d(np.asarray(recent_batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise ValueError("recent batch is empty")
    if batch.shape[1] < cb.dim:
        raise ValueError("batch vectors are narrower than the codebook")
    batch = batch[:, : cb.dim]
    dead = np.flatnonzero(cb.idle_steps >= threshold)
    out = Codebook(cb.stage_index, cb.vectors.copy(), cb.usage_counts.copy(), cb.idle_steps.copy())
    if dead.size == 0:
        return out
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picks = rng.choice(batch.shape[0], size=dead.size, replace=batch.shape[0] < dead.size)
    out.vectors[dead] = batch[picks]
    out.usage_counts[dead] = 0
    out.idle_steps[dead] = 0
    return out


def init_codebooks(y_c, cfg: VORVQConfig, proj: Projections, seed, masked: bool = True) -> list[Codebook]:
    """k-means++ codebooks fitted stage by stage on projected residuals of ``y_c``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    r = np.asarray(y_c, dtype=np.float64)
    books = []
    for i in range(1, cfg.n_stages + 1):
        width = cfg.kept_dims[i - 1] if masked else cfg.full_dim
        zc = (r @ proj.in_weight + proj.in_bias)[:, :width]
        cb = Codebook(i, kmeans_pp_init(zc, cfg.codebook_sizes[i - 1], rng))
        _, yq_i, _, _ = quantize_stage(r, i, proj, cb)
        r = r - yq_i
        books.append(cb)
    return books
