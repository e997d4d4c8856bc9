"""End-to-end acceptance suite: one PASS/FAIL line per criterion.

Lines are printed by each test and repeated in the terminal summary.
Criteria 6 and 7 share one module-scoped set of 15 training runs.
"""

from __future__ import annotations

import itertools
import math
import time

import numpy as np
import pytest

from test_losses import infonce_oracle, unit_rows
from test_quantizer import brute_force_cascade, random_stack
from vorvq import disentangle as dis
from vorvq import dsp, harness, losses
from vorvq import gradcore as gc
from vorvq.bundle import decode_bundle, encode_bundle
from vorvq.gradcheck import TOLERANCE, gradcheck_all
from vorvq.quantizer import Codebook, Projections, VORVQConfig, quantize_stage, vo_rvq_forward

SEEDS = range(5)


# ------------------------------------------------------------- criterion 1


def test_criterion_1_oracle_equivalence(verdict):
    rng = np.random.default_rng(20240101)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(1, 4))
        cfg, proj, books = random_stack(
            rng, n, int(rng.integers(0, n + 1)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 5))
        )
        y_c = rng.standard_normal((int(rng.integers(1, 9)), cfg.latent_dim))
        y_q, trace = vo_rvq_forward(y_c, cfg, proj, books)
        ref, codes, resid = brute_force_cascade(y_c, cfg, proj, books)
        same = (
            np.array_equal(trace.codes, codes)
            and np.array_equal(y_q.frames, ref)
            and np.array_equal(trace.residuals[-1], resid)
        )
        mismatches += not same
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10.0
    verdict(1, ok, f"200 instances, {mismatches} mismatches vs brute force, {elapsed:.2f}s (limit 10s)")
    assert ok


# ------------------------------------------------------------- criterion 2


def _orthogonal_stack(rng, n, n_e, dim, k):
    cfg = VORVQConfig.build(n, n_e, dim, dim, k)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    proj = Projections(q, rng.standard_normal(dim), q.T.copy(), rng.standard_normal(dim))
    books = [Codebook(i, rng.standard_normal((k, d))) for i, d in enumerate(cfg.kept_dims, start=1)]
    return cfg, proj, books


def test_criterion_2_telescoping_and_masks(verdict):
    rng = np.random.default_rng(7)
    failures = []
    for trial in range(1000):
        n = int(rng.integers(1, 7))
        dim = int(rng.integers(1, 9))
        cfg, proj, books = _orthogonal_stack(rng, n, int(rng.integers(0, n + 1)), dim, int(rng.integers(2, 9)))
        y_c = rng.standard_normal((int(rng.integers(1, 12)), dim))
        y_q, tr = vo_rvq_forward(y_c, cfg, proj, books)
        scale = np.abs(y_c).max() + sum(np.abs(s).max() for s in tr.stage_outputs)
        # schedule: nondecreasing, ends at full width
        ok = list(cfg.kept_dims) == sorted(cfg.kept_dims) and cfg.kept_dims[-1] == cfg.full_dim
        for i in range(1, n + 1):
            lhs = tr.residuals[i] + np.sum(tr.stage_outputs[:i], axis=0)
            ok &= np.allclose(lhs, y_c, rtol=1e-10, atol=1e-10 * scale)
        ok &= np.allclose(y_q.frames, np.sum(tr.stage_outputs[: cfg.n_enhanced], axis=0) if cfg.n_enhanced else 0.0,
                          rtol=1e-10, atol=1e-10 * scale)
        for i, (cb, d) in enumerate(zip(books, cfg.kept_dims), start=1):
            r_prev = tr.residuals[i - 1]
            ok &= tr.zc_hat[i - 1].shape[1] == d
            # stage output only sees the kept dims of the quantized vector
            padded = np.zeros((len(y_c), dim))
            padded[:, :d] = tr.zq_hat[i - 1]
            ok &= np.allclose(tr.stage_outputs[i - 1], padded @ proj.out_weight + proj.out_bias, rtol=1e-10, atol=1e-10 * scale)
            # moving the residual along masked projected directions changes neither code nor quantized vector
            if d < dim:
                bump = np.zeros((len(y_c), dim))
                bump[:, d:] = 5.0 * rng.standard_normal((len(y_c), dim - d))
                c0, _, _, zq0 = quantize_stage(r_prev, i, proj, cb)
                c1, _, _, zq1 = quantize_stage(r_prev + bump @ proj.in_weight.T, i, proj, cb)
                ok &= np.array_equal(c0, c1) and np.array_equal(zq0, zq1)
        if not ok:
            failures.append(trial)
    passed = not failures
    verdict(2, passed, f"1000 random configurations, rtol 1e-10, {len(failures)} violations")
    assert passed, failures[:10]


# ------------------------------------------------------------- criterion 3


def test_criterion_3_enhanced_only_accumulation(verdict):
    rng = np.random.default_rng(3)
    changed = 0
    for _ in range(100):
        n = int(rng.integers(2, 7))
        n_e = int(rng.integers(1, n))
        cfg, proj, books = random_stack(rng, n, n_e, int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(2, 9)))
        y_c = rng.standard_normal((int(rng.integers(1, 20)), cfg.latent_dim))
        y_q, _ = vo_rvq_forward(y_c, cfg, proj, books)
        noise = [Codebook(cb.stage_index, 50.0 * rng.standard_normal(cb.vectors.shape)) for cb in books[n_e:]]
        y_q2, _ = vo_rvq_forward(y_c, cfg, proj, books[:n_e] + noise)
        changed += not np.array_equal(y_q.frames, y_q2.frames)
    verdict(3, changed == 0, f"100 inputs with random noise-stage codebooks, {changed} changed y_q")
    assert changed == 0


# ------------------------------------------------------------- criterion 4


def _sg_and_ste_checks() -> list[str]:
    problems = []
    rng = np.random.default_rng(4)
    # stop-gradient leaf gets exactly zero, even when its value is used
    tape = gc.Tape()
    x = tape.leaf(rng.standard_normal(5))
    y = tape.leaf(rng.standard_normal(5))
    out = gc.add(gc.sum(gc.square(gc.stop_gradient(x))), gc.sum(gc.mul(gc.stop_gradient(x), y)))
    g = tape.backward(out)
    if not np.array_equal(g[x], np.zeros(5)) or not np.array_equal(g[y], x.value):
        problems.append("stop_gradient")
    # codebook term reaches only codes, commitment term only the encoder side
    enc, table, data = rng.standard_normal((3, 2)), rng.standard_normal((4, 2)), rng.standard_normal((6, 3))
    for term, enc_moves in ((losses.codebook_term, False), (losses.commitment_term, True)):
        tape = gc.Tape()
        w, c = tape.leaf(enc), tape.leaf(table)
        zc = gc.matmul(data, w)
        codes, _ = gc.ste_quantize(zc, c)
        g = tape.backward(term(zc, gc.gather_rows(c, codes)))
        if bool(g[w].any()) != enc_moves or bool(g[c].any()) == enc_moves:
            problems.append(term.__name__)
    # STE: identity on kept dims, zero on masked dims
    for _ in range(20):
        full, kept = 6, int(rng.integers(1, 6))
        z = rng.standard_normal((7, full))
        up = rng.standard_normal((7, kept))
        tape = gc.Tape()
        zl = tape.leaf(z)
        _, zq = gc.ste_quantize(gc.take_cols(zl, kept), rng.standard_normal((5, kept)))
        grad = tape.backward(gc.sum(gc.mul(zq, up)))[zl]
        if not (np.array_equal(grad[:, :kept], up) and not grad[:, kept:].any()):
            problems.append("ste")
            break
    return problems


def test_criterion_4_gradient_suite(verdict):
    report = gradcheck_all(n_points=100, seed=0)
    for line in report.lines():
        print(line)
    worst = max(report.results, key=lambda r: r.max_rel_error)
    problems = _sg_and_ste_checks()
    ok = report.passed and not problems
    verdict(
        4,
        ok,
        f"{len(report.results)} ops x 100 points, worst {worst.name} {worst.max_rel_error:.2e} "
        f"(limit {TOLERANCE:g}); failures {report.failures}; sg/STE problems {problems}",
    )
    assert ok


# ------------------------------------------------------------- criterion 5


def test_criterion_5_infonce(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    for k in range(1, 17):
        for _ in range(10):
            d = int(rng.integers(1, 9))
            tau = float(rng.uniform(0.05, 2.0))
            fake, real = unit_rows(rng, k, d), unit_rows(rng, k, d)
            worst = max(worst, abs(float(losses.infonce(fake, real, tau)) - infonce_oracle(fake, real, tau)))
    single = float(losses.infonce(np.array([[0.6, 0.8]]), np.array([[0.0, 1.0]]), 0.1))
    ortho = abs(float(losses.infonce(np.eye(2), np.eye(2), 1.0)) - math.log(1 + math.exp(-1)))
    ok = worst <= 1e-12 and single == 0.0 and ortho <= 1e-12
    verdict(5, ok, f"K=1..16 max |err| {worst:.1e}; K=1 value {single}; orthonormal K=2 |err| {ortho:.1e}")
    assert ok


# ------------------------------------------------------- criteria 6 and 7


@pytest.fixture(scope="module")
def ablation_runs(tmp_path_factory):
    runs, diverged = {}, []
    out = tmp_path_factory.mktemp("ablation")
    for seed in SEEDS:
        for variant in ("continuous", "rvq", "vo_rvq"):
            cfg = harness.ExperimentConfig(
                quantizer=variant, model_seed=seed, data_seed=seed, output_dir=str(out / f"{variant}_{seed}")
            )
            start = time.perf_counter()
            try:
                result = harness.train(cfg, write=False)
            except harness.TrainingDiverged:
                diverged.append(f"{variant}/seed{seed}")
                continue
            runs[variant, seed] = {
                "seconds": time.perf_counter() - start,
                "final": result.final,
                "slope": harness.loss_slope(result.records),
            }
    return runs, diverged


def _report_divergence(number, diverged, verdict):
    if diverged:
        verdict(number, False, f"training diverged for {diverged}")
        pytest.fail(f"diverged runs {diverged}")


def test_criterion_6_disentanglement_direction(ablation_runs, verdict):
    ablation_runs, diverged = ablation_runs
    _report_divergence(6, diverged, verdict)
    vo = [ablation_runs["vo_rvq", s]["final"].accuracy for s in SEEDS]
    rvq = [ablation_runs["rvq", s]["final"].accuracy for s in SEEDS]
    seconds = sum(ablation_runs[v, s]["seconds"] for v in ("rvq", "vo_rvq") for s in SEEDS)
    med_vo, med_rvq = float(np.median(vo)), float(np.median(rvq))
    ok = med_vo - med_rvq >= 0.10 and med_vo >= 0.65 and seconds < 600
    verdict(
        6,
        ok,
        f"median accuracy vo_rvq {100 * med_vo:.2f}% vs rvq {100 * med_rvq:.2f}% "
        f"(need +10 pp and >= 65%); per seed vo {[round(a, 4) for a in vo]} rvq {[round(a, 4) for a in rvq]}; "
        f"train+eval {seconds:.0f}s (limit 600s)",
    )
    assert ok


def test_criterion_7_discretization_ablation(ablation_runs, verdict):
    ablation_runs, diverged = ablation_runs
    _report_divergence(7, diverged, verdict)
    ratios, slopes, wins = [], [], []
    for s in SEEDS:
        cont = ablation_runs["continuous", s]["final"].recon_mse
        for v in ("rvq", "vo_rvq"):
            ratios.append(ablation_runs[v, s]["final"].recon_mse / cont)
        slopes.extend(ablation_runs[v, s]["slope"] for v in ("continuous", "rvq", "vo_rvq"))
    vo = np.median([ablation_runs["vo_rvq", s]["final"].accuracy for s in SEEDS])
    rvq = np.median([ablation_runs["rvq", s]["final"].accuracy for s in SEEDS])
    mse_ok = max(ratios) < 2.0
    slope_ok = max(slopes) < 0.0
    wins = bool(vo > rvq)
    ok = mse_ok and slope_ok and wins
    verdict(
        7,
        ok,
        f"max MSE ratio to continuous {max(ratios):.3f} (< 2: {mse_ok}); max loss slope {max(slopes):.2e} "
        f"(< 0: {slope_ok}); vo_rvq median accuracy beats rvq: {wins}",
    )
    assert ok


# ------------------------------------------------------------- criterion 8


def _best_ncut(w):
    best = math.inf
    for bits in itertools.product((0, 1), repeat=len(w) - 1):
        labels = np.array((0,) + bits)
        if labels.any():
            best = min(best, dis.normalized_cut(w, labels))
    return best


def test_criterion_8_spectral_oracle(verdict):
    rng = np.random.default_rng(8)
    misses = {m: 0 for m in range(2, 9)}
    counts = dict.fromkeys(misses, 0)
    for trial in range(350):
        m = 2 + trial % 7
        pts = rng.standard_normal((m, 2))
        w = dis.build_affinity(pts)
        pred = dis.spectral_clustering(pts, 2, seed=trial)
        counts[m] += 1
        misses[m] += abs(dis.normalized_cut(w, pred) - _best_ncut(w)) > 1e-9
    # well-separated two-group instances, reported alongside
    sep_misses = 0
    for trial in range(140):
        m = 4 + trial % 5
        half = int(rng.integers(2, m - 1))
        pts = rng.standard_normal((m, 2))
        pts[half:, 0] += 10.0
        w = dis.build_affinity(pts)
        sep_misses += abs(dis.normalized_cut(w, dis.spectral_clustering(pts, 2, seed=trial)) - _best_ncut(w)) > 1e-9
    a = rng.standard_normal((100, 2))
    b = rng.standard_normal((100, 2))
    b[:, 0] += 10.0
    truth = np.r_[np.zeros(100, int), np.ones(100, int)]
    blob_acc = dis.clustering_metrics(dis.spectral_clustering(np.vstack([a, b]), 2, seed=0), truth)["accuracy"]
    total_misses = sum(misses.values())
    ok = total_misses == 0 and blob_acc == 1.0
    verdict(
        8,
        ok,
        f"generic Gaussian clouds M=2..8: {total_misses}/350 above the brute-force optimum (per M {misses}); "
        f"10-sigma two-group M=4..8: {sep_misses}/140; blobs M=200 accuracy {blob_acc}",
    )
    assert ok


# ------------------------------------------------------------- criterion 9


def test_criterion_9_determinism_and_serialization(tmp_path, verdict):
    cfg = harness.ExperimentConfig(steps=200, output_dir=str(tmp_path / "a"))
    first = harness.train(cfg)
    csv_a = (first.output_dir / "metrics.csv").read_bytes()
    bundle_a = (first.output_dir / "model.vorvq").read_bytes()
    second = harness.train(cfg)
    same_csv = csv_a == (second.output_dir / "metrics.csv").read_bytes()
    same_bundle = bundle_a == (second.output_dir / "model.vorvq").read_bytes()

    decoded = decode_bundle(bundle_a)  # validates the CRC32
    round_trip = encode_bundle(*decoded) == bundle_a
    corrupted = bytearray(bundle_a)
    corrupted[len(corrupted) // 2] ^= 0x10
    try:
        decode_bundle(bytes(corrupted))
        crc_rejects = False
    except ValueError:
        crc_rejects = True
    model, loaded_cfg = harness.load_model(first.output_dir)
    same_eval = harness.evaluate(model, loaded_cfg, step=cfg.steps).row() == first.final.row()
    ok = same_csv and same_bundle and round_trip and crc_rejects and same_eval
    verdict(
        9,
        ok,
        f"identical CSV {same_csv}, identical bundle {same_bundle}, bundle round-trip {round_trip}, "
        f"corrupted CRC rejected {crc_rejects}, reloaded eval metrics identical {same_eval}",
    )
    assert ok


# ------------------------------------------------------------ criterion 10


def test_criterion_10_dsp(verdict):
    rng = np.random.default_rng(10)
    self_zero = all(float(dsp.mel_l2_loss(a, a)) == 0.0 for a in (rng.standard_normal(4096) for _ in range(5)))
    mel_err = abs(dsp.hz_to_mel(700.0) - 2595.0 * math.log10(2.0))
    n, hop, k = 64, 16, 10
    mag = dsp.stft_magnitude(np.sin(2 * np.pi * k * np.arange(1024) / n), n, hop)[:, 4:-4]
    peak = bool(np.all(np.argmax(mag, axis=0) == k))
    height = bool(np.allclose(mag[k], dsp.hann_window(n).sum() / 2, rtol=1e-9))
    leak = float(np.delete(mag, [k - 1, k, k + 1], axis=0).max())
    ok = self_zero and mel_err <= 1e-9 and peak and height and leak < 1e-9
    verdict(
        10,
        ok,
        f"mel_l2(a,a)==0 {self_zero}; |mel(700)-2595 log10 2| {mel_err:.1e}; "
        f"sine at bin {k}: peak {peak}, height {height}, max leakage outside main lobe {leak:.1e}",
    )
    assert ok
