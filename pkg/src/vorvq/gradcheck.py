"""Finite-difference sweep over every differentiable operation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import dsp, losses
from . import gradcore as gc

TOLERANCE = 1e-4

# small configurations so a 100-point sweep stays quick
_MEL = dsp.MelConfig(sample_rate=1600, n_fft=32, hop=8, n_mels=4, f_min=0.0, f_max=800.0)
_RESOLUTIONS = ((16, 4), (32, 8))
_WEIGHTS = losses.LossWeights(lambda_ord=1.5, lambda_stft=0.5, lambda_align=2.0, alpha=0.3)


@dataclass(frozen=True)
class OpCase:
    """A scalar-valued probe of one op and a sampler for its input point(s)."""

    name: str
    fn: Callable
    sample: Callable[[np.random.Generator], tuple]


@dataclass
class OpResult:
    name: str
    max_rel_error: float
    points: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


@dataclass
class GradcheckReport:
    results: list[OpResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def lines(self) -> list[str]:
        return [
            f"{'PASS' if r.passed else 'FAIL'}  {r.name:<22} max_rel_error={r.max_rel_error:.3e}  points={r.points}"
            for r in self.results
        ]


def _weighted(x, w):
    """Contract an op output with fixed random weights to get a scalar."""
    return gc.sum(gc.mul(x, w))


def _away_from_zero(rng, shape, floor=0.1):
    x = rng.uniform(floor, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _wave(rng, n):
    # a few tones plus noise keep STFT magnitudes away from zero
    t = np.arange(n)
    tones = sum(rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * rng.uniform(0.05, 0.45) * t + rng.uniform(0, 6)) for _ in range(3))
    return tones + 0.3 * rng.standard_normal(n)


def default_cases() -> list[OpCase]:
    """Every differentiable primitive plus the composite losses built on them."""
    w34 = np.random.default_rng(100).standard_normal((3, 4))
    w4 = np.random.default_rng(101).standard_normal(4)
    w3 = np.random.default_rng(102).standard_normal(3)
    w35 = np.random.default_rng(103).standard_normal((3, 5))
    w43 = np.random.default_rng(104).standard_normal((4, 3))
    w6 = np.random.default_rng(105).standard_normal(6)
    w26 = np.random.default_rng(106).standard_normal((3, 6))
    w_stft = np.random.default_rng(107).standard_normal((9, 17))
    w_mel = np.random.default_rng(108).standard_normal((4, 9))
    idx = np.array([2, 0, 2, 1, 2, 3])

    def normal(*shapes):
        return lambda rng: tuple(rng.standard_normal(s) for s in shapes)

    return [
        OpCase("add", lambda a, b: _weighted(gc.add(a, b), w34), normal((3, 4), (3, 4))),
        OpCase("add_broadcast", lambda a, b: _weighted(gc.add(a, b), w34), normal((3, 4), (4,))),
        OpCase("sub", lambda a, b: _weighted(gc.sub(a, b), w34), normal((3, 4), (3, 4))),
        OpCase("mul", lambda a, b: _weighted(gc.mul(a, b), w34), normal((3, 4), (3, 4))),
        OpCase("neg", lambda a: _weighted(gc.neg(a), w34), normal((3, 4))),
        OpCase("square", lambda a: _weighted(gc.square(a), w34), normal((3, 4))),
        OpCase("absolute", lambda a: _weighted(gc.absolute(a), w34), lambda rng: (_away_from_zero(rng, (3, 4)),)),
        OpCase(
            "magnitude",
            lambda a, b: _weighted(gc.magnitude(a, b), w34),
            lambda rng: (_away_from_zero(rng, (3, 4)), _away_from_zero(rng, (3, 4))),
        ),
        OpCase("sum_axis", lambda a: _weighted(gc.sum(a, axis=0), w4), normal((3, 4))),
        OpCase("mean", lambda a: gc.mul(gc.mean(gc.square(a)), 3.0), normal((3, 4))),
        OpCase("matmul", lambda a, b: _weighted(gc.matmul(a, b), w35), normal((3, 4), (4, 5))),
        OpCase("matvec", lambda a, b: _weighted(gc.matmul(a, b), w3), normal((3, 4), (4,))),
        OpCase("affine", lambda x, w, b: _weighted(gc.affine(x, w, b), w35), normal((3, 4), (4, 5), (5,))),
        OpCase("reshape", lambda a: _weighted(gc.reshape(a, (4, 3)), w43), normal((3, 4))),
        OpCase("transpose", lambda a: _weighted(gc.transpose(a), w43), normal((3, 4))),
        OpCase("take", lambda a: _weighted(gc.take(a, idx), w6), normal((4,))),
        OpCase("gather_rows", lambda a: _weighted(gc.gather_rows(a, idx), np.ones((6, 3))), normal((4, 3))),
        OpCase("take_cols", lambda a: _weighted(gc.take_cols(a, 2), w34[:, :2]), normal((3, 4))),
        OpCase("pad_cols", lambda a: _weighted(gc.pad_cols(a, 6), w26), normal((3, 4))),
        OpCase("l2_normalize", lambda a: _weighted(gc.l2_normalize(a), w34), normal((3, 4))),
        OpCase("logsumexp", lambda a: _weighted(gc.logsumexp(a, axis=1), w3), normal((3, 4))),
        OpCase("stft_magnitude", lambda x: _weighted(dsp.stft_magnitude(x, 16, 4), w_stft), lambda rng: (_wave(rng, 64),)),
        OpCase("mel_magnitude", lambda x: _weighted(dsp.mel_magnitude(x, _MEL), w_mel), lambda rng: (_wave(rng, 64),)),
        OpCase("mel_l2_loss", lambda a, b: dsp.mel_l2_loss(a, b, _MEL), lambda rng: (_wave(rng, 64), _wave(rng, 64))),
        OpCase("multires_stft_loss", lambda a, b: losses.multires_stft_loss(a, b, _RESOLUTIONS),
               lambda rng: (_wave(rng, 64), _wave(rng, 64))),
        OpCase("reconstruction_l2", losses.reconstruction_l2, normal((3, 4), (3, 4))),
        # sg[] inputs are constants for finite differences, so only the live side is probed
        OpCase("codebook_term", lambda zq: losses.codebook_term(w34, zq), normal((3, 4))),
        OpCase("commitment_term", lambda zc: losses.commitment_term(zc, w34), normal((3, 4))),
        OpCase("semantic_l2", lambda y, w, b: losses.semantic_l2(y, w, b, w35), normal((3, 4), (4, 5), (5,))),
        OpCase(
            "infonce",
            lambda a, b: losses.infonce(gc.l2_normalize(a), gc.l2_normalize(b), 0.5),
            normal((4, 3), (4, 3)),
        ),
        OpCase(
            "total_loss",
            lambda o, s_, n_, m: losses.total_loss({"ord": gc.sum(o), "stft": gc.sum(s_), "nce": gc.sum(n_), "sem": gc.sum(m)}, _WEIGHTS),
            normal((2,), (2,), (2,), (2,)),
        ),
    ]


def check_op(case: OpCase, n_points: int = 100, seed: int = 0, eps: float = 1e-6) -> OpResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_points):
        worst = max(worst, gc.fd_check(case.fn, case.sample(rng), eps=eps))
    return OpResult(case.name, worst, n_points)


def gradcheck_all(n_points: int = 100, seed: int = 0, cases: list[OpCase] | None = None) -> GradcheckReport:
    """Central-difference check of every case at ``n_points`` random points."""
    report = GradcheckReport()
    for k, case in enumerate(default_cases() if cases is None else cases):
        report.results.append(check_op(case, n_points, seed=(seed, k)))
    return report
