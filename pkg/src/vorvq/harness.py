"""Experiment runner: training, disentanglement evaluation, ablation, artifacts."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import disentangle, dsp, losses, synthdata
from . import gradcore as gc
from .bundle import load_bundle, save_bundle
from .pipeline import QUANTIZERS, ToyModel, init_model, tape_forward
from .quantizer import Codebook, Projections, VORVQConfig, refresh_dead_codes

MODES = ("latent", "waveform")
BUNDLE_NAME = "model.vorvq"
SIDECAR_NAME = "model.json"
METRICS_NAME = "metrics.csv"


class TrainingDiverged(RuntimeError):
    """A loss term or parameter became non-finite; a diagnostic dump was written."""


def _default_vorvq() -> dict:
    return {"n_stages": 5, "n_enhanced": 4, "full_dim": 16, "codebook_size": 64}


def _default_weights() -> dict:
    # no semantic teacher in the plain ablation variants
    return {"lambda_align": 0.0}


@dataclass
class ExperimentConfig:
    mode: str = "latent"
    quantizer: str = "vo_rvq"
    vorvq: dict = field(default_factory=_default_vorvq)
    loss_weights: dict = field(default_factory=_default_weights)
    d_in: int = 32
    d_latent: int = 16
    steps: int = 2000
    batch_size: int = 32
    frames: int = 64
    learning_rate: float = 0.02  # 0.05 diverges for the masked cascade
    grad_clip: float | None = 10.0  # global gradient-norm ceiling; None disables
    log_every: int = 50
    rank_clean: int | None = None
    variance_ratio: float = 4.0
    snr_db: float = 10.0
    teacher_dim: int = 768
    nce_frames: int = 64
    refresh_threshold: int = 2
    eval_frames: int = 2000
    model_seed: int = 0
    data_seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.quantizer not in QUANTIZERS:
            raise ValueError(f"quantizer must be one of {QUANTIZERS}")
        latent = self.vorvq.get("latent_dim", self.d_latent)
        if latent != self.d_latent:
            raise ValueError(f"vorvq.latent_dim={latent} disagrees with d_latent={self.d_latent}")
        for name in ("d_in", "d_latent", "batch_size", "frames", "log_every", "eval_frames", "teacher_dim", "nce_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.refresh_threshold < 1:
            raise ValueError("refresh_threshold must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and non-negative")
        if self.grad_clip is not None and not (self.grad_clip > 0 and math.isfinite(self.grad_clip)):
            raise ValueError("grad_clip must be a positive finite number or null")
        vcfg = self.vorvq_config()
        if self.quantizer != "continuous" and self.batch_frames < max(vcfg.codebook_sizes):
            raise ValueError("codebook init needs at least K frames in the first batch")
        self.weights()

    def vorvq_config(self) -> VORVQConfig:
        kw = {k: v for k, v in self.vorvq.items() if k != "latent_dim"}
        return VORVQConfig.build(latent_dim=self.d_latent, seed=self.model_seed, **kw)

    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(**self.loss_weights)

    @property
    def batch_frames(self) -> int:
        return self.batch_size * self.frames

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def replace(self, **changes) -> ExperimentConfig:
        return ExperimentConfig.from_dict({**self.to_dict(), **changes})


# ------------------------------------------------------------------ data


@dataclass
class Batch:
    """Encoder input frames and the clean frames the decoder must reproduce."""

    mixture: np.ndarray
    clean: np.ndarray
    n_waves: int = 0  # > 0 in waveform mode: frames are ``n_waves`` waveforms laid end to end


def make_batch(cfg: ExperimentConfig, stream: int, index: int, n_frames: int) -> Batch:
    """Deterministic batch from ``(data_seed, stream, index)``.

    Stream 1 feeds training steps, stream 2 evaluation.  In latent mode all
    batches share the clean loading drawn from ``(data_seed, 0)``.
    """
    if cfg.mode == "latent":
        b = synthdata.gen_two_source(
            n_frames,
            cfg.d_in,
            cfg.rank_clean,
            cfg.variance_ratio,
            seed=(cfg.data_seed, stream, index),
            structure_seed=(cfg.data_seed, 0),
        )
        return Batch(b.mixture, b.clean)
    n_waves = max(1, n_frames // cfg.frames)
    wave_len = cfg.frames * cfg.d_in
    clean, noisy = [], []
    for w in range(n_waves):
        c, n = synthdata.gen_noisy_waveform(wave_len / dsp.MelConfig().sample_rate, snr_db=cfg.snr_db,
                                            seed=(cfg.data_seed, stream, index, w))
        clean.append(c.reshape(-1, cfg.d_in))
        noisy.append(n.reshape(-1, cfg.d_in))
    return Batch(np.vstack(noisy), np.vstack(clean), n_waves)


def make_teacher(cfg: ExperimentConfig) -> losses.TeacherEmbedding:
    return losses.TeacherEmbedding.create(cfg.d_in, cfg.teacher_dim, seed=(cfg.data_seed, 3))


# --------------------------------------------------------------- metrics


@dataclass
class MetricsRecord:
    step: int
    phase: str
    loss_ord: float
    loss_stft: float
    loss_nce: float
    loss_sem: float
    loss_total: float
    recon_mse: float
    perplexity: list[float] = field(default_factory=list)
    accuracy: float | None = None
    macro_recall: float | None = None
    macro_f1: float | None = None

    def row(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "perplexity"}
        for i, p in enumerate(self.perplexity, start=1):
            out[f"perplexity_{i}"] = p
        return out


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, rows: list[dict]) -> None:
    """Header from the first row; floats with 17 significant digits."""
    if not rows:
        raise ValueError("no rows to write")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = list(rows[0])
    writer.writerow(header)
    for r in rows:
        writer.writerow([format_value(r.get(k)) for k in header])
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def loss_slope(records: list[MetricsRecord]) -> float:
    """Least-squares slope of the total training loss against step."""
    train = [r for r in records if r.phase == "train"]
    if len(train) < 2:
        raise ValueError("need at least two logged training steps")
    steps = np.array([r.step for r in train], dtype=np.float64)
    total = np.array([r.loss_total for r in train])
    return float(np.polyfit(steps, total, 1)[0])


# -------------------------------------------------------------- training


@dataclass
class StepResult:
    components: dict
    total: float
    grads: dict
    fwd: object
    recon_mse: float


def _reconstruction(cfg, fwd, batch: Batch, mel: dsp.MelConfig | None):
    """Latent mode: frame L2.  Waveform mode: per-waveform mel L2 and STFT loss, averaged."""
    if batch.n_waves == 0:
        return losses.reconstruction_l2(fwd.decoded, batch.clean), None
    waves = gc.reshape(fwd.decoded, (batch.n_waves, -1))
    targets = batch.clean.reshape(batch.n_waves, -1)
    rec, stft = 0.0, 0.0
    for w in range(batch.n_waves):
        row = gc.take(waves, w)
        rec = gc.add(rec, dsp.mel_l2_loss(row, targets[w], mel))
        stft = gc.add(stft, losses.multires_stft_loss(row, targets[w]))
    scale = 1.0 / batch.n_waves
    return gc.mul(rec, scale), gc.mul(stft, scale)


def loss_and_grads(model: ToyModel, cfg: ExperimentConfig, batch: Batch, teacher, nce_rows) -> StepResult:
    w = cfg.weights()
    mel = dsp.MelConfig() if batch.n_waves else None
    tape = gc.Tape()
    fwd = tape_forward(model, batch.mixture, tape)
    rec, stft = _reconstruction(cfg, fwd, batch, mel)
    components = {"ord": gc.add(rec, losses.vq_terms(fwd.trace, w.beta))}
    if stft is not None:
        components["stft"] = stft
    if w.lambda_align != 0:
        targets = teacher.features(batch.clean)
        components["sem"] = losses.semantic_l2(fwd.y_q, fwd.leaves["align_w"], fwd.leaves["align_b"], targets)
        fake = gc.affine(gc.take(fwd.y_q, nce_rows), fwd.leaves["align_w"], fwd.leaves["align_b"])
        components["nce"] = losses.infonce(
            losses.l2_normalize(fake), losses.l2_normalize(targets[nce_rows]), w.tau
        )
    values = {k: float(gc.value_of(v)) for k, v in components.items()}
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        return StepResult(values, math.nan, {}, fwd, math.nan)
    total = losses.total_loss(components, w)
    grads = tape.backward(total)
    named = {name: grads[leaf] for name, leaf in fwd.leaves.items()}
    recon_mse = float(np.mean((gc.value_of(fwd.decoded) - batch.clean) ** 2))
    return StepResult(values, float(gc.value_of(total)), named, fwd, recon_mse)


def clip_gradients(grads: dict, max_norm: float | None) -> dict:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``."""
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def _param_norms(model: ToyModel) -> dict:
    return {k: float(np.linalg.norm(v)) for k, v in model.params().items()}


def _dump_and_abort(cfg: ExperimentConfig, step: int, what: str, info: dict) -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "diagnostic.json"
    path.write_text(json.dumps({"step": step, "reason": what, **info, "config": cfg.to_dict()}, indent=2, default=str))
    raise TrainingDiverged(f"step {step}: {what} (diagnostics in {path})")


def _record(step, phase, res: StepResult, model: ToyModel, cfg: ExperimentConfig) -> MetricsRecord:
    c = res.components
    perp = []
    if model.quantized:
        perp = [cb.perplexity(res.fwd.codes[:, i]) for i, cb in enumerate(model.codebooks)]
    return MetricsRecord(
        step=step,
        phase=phase,
        loss_ord=c["ord"],
        loss_stft=c.get("stft", 0.0),
        loss_nce=c.get("nce", 0.0),
        loss_sem=c.get("sem", 0.0),
        loss_total=res.total,
        recon_mse=res.recon_mse,
        perplexity=perp,
    )


@dataclass
class TrainResult:
    final: MetricsRecord
    records: list[MetricsRecord]
    model: ToyModel
    output_dir: Path


def build_model(cfg: ExperimentConfig) -> ToyModel:
    first = make_batch(cfg, 1, 0, cfg.batch_frames)
    teacher_dim = cfg.teacher_dim if cfg.weights().lambda_align != 0 else None
    return init_model(
        cfg.quantizer, cfg.vorvq_config(), cfg.d_in, first.mixture, synthdata.make_rng((cfg.model_seed, 0)), teacher_dim
    )


def train(cfg: ExperimentConfig, write: bool = True) -> TrainResult:
    """SGD on the weighted objective against the clean target; logs and serializes the run."""
    model = build_model(cfg)
    teacher = make_teacher(cfg) if cfg.weights().lambda_align != 0 else None
    opt = gc.SGD(cfg.learning_rate)
    refresh_rng = synthdata.make_rng((cfg.model_seed, 1))
    nce_rng = synthdata.make_rng((cfg.model_seed, 2))
    records: list[MetricsRecord] = []

    for step in range(cfg.steps):
        batch = make_batch(cfg, 1, step, cfg.batch_frames)
        n_rows = batch.mixture.shape[0]
        nce_rows = nce_rng.choice(n_rows, size=min(cfg.nce_frames, n_rows), replace=False) if teacher else None
        res = loss_and_grads(model, cfg, batch, teacher, nce_rows)
        if not math.isfinite(res.total):
            _dump_and_abort(cfg, step, "non-finite loss", {"components": res.components, "param_norms": _param_norms(model)})
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            records.append(_record(step, "train", res, model, cfg))

        opt.step(model.params(), clip_gradients(res.grads, cfg.grad_clip))
        bad = [k for k, v in model.params().items() if not np.all(np.isfinite(v))]
        if bad:
            _dump_and_abort(cfg, step, f"non-finite parameters {bad}", {"components": res.components})

        if model.quantized:
            for i, cb in enumerate(model.codebooks):
                cb.record_usage(res.fwd.codes[:, i])
                if np.any(cb.idle_steps >= cfg.refresh_threshold):
                    fresh = refresh_dead_codes(cb, gc.value_of(res.fwd.trace.zc_hat[i]), cfg.refresh_threshold, refresh_rng)
                    model.set_codebook(fresh)

    try:
        final = evaluate(model, cfg, step=cfg.steps)
    except TrainingDiverged as exc:
        _dump_and_abort(cfg, cfg.steps, str(exc), {"param_norms": _param_norms(model)})
    records.append(final)
    out = Path(cfg.output_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / METRICS_NAME, [r.row() for r in records])
        save_model(model, cfg, out)
    return TrainResult(final, records, model, out)


# ------------------------------------------------------------ evaluation


def eval_batch(cfg: ExperimentConfig, seed: int = 0) -> Batch:
    return make_batch(cfg, 2, seed, cfg.eval_frames)


def evaluate(model: ToyModel, cfg: ExperimentConfig, step: int, seed: int = 0) -> MetricsRecord:
    """Losses and clean-reconstruction MSE on the evaluation batch, plus clustering when quantized."""
    batch = eval_batch(cfg, seed)
    teacher = make_teacher(cfg) if model.align_w is not None else None
    n_rows = batch.mixture.shape[0]
    nce_rows = synthdata.make_rng((cfg.data_seed, 4, seed)).choice(n_rows, min(cfg.nce_frames, n_rows), replace=False)
    res = loss_and_grads(model, cfg, batch, teacher, nce_rows)
    if not math.isfinite(res.total):
        raise TrainingDiverged("non-finite evaluation loss")
    rec = _record(step, "eval", res, model, cfg)
    if model.quantized:
        m = cluster_trace(model, batch, seed)
        rec.accuracy, rec.macro_recall, rec.macro_f1 = m["accuracy"], m["macro_recall"], m["macro_f1"]
    return rec


def cluster_trace(model: ToyModel, batch: Batch, seed: int = 0) -> dict:
    _, trace = model.quantize(model.encode(batch.mixture))
    emb = disentangle.extract_embeddings(trace)
    pred = disentangle.spectral_clustering(emb.points, 2, seed=seed)
    return disentangle.clustering_metrics(pred, emb.labels)


def eval_disentangle(bundle_path, seed: int = 0, eval_frames: int | None = None) -> dict:
    """Clustering metrics of a saved model on evaluation batch ``seed``."""
    model, cfg = load_model(bundle_path)
    if not model.quantized:
        raise ValueError("a continuous model has no quantizer stages to cluster")
    if eval_frames is not None:
        cfg = cfg.replace(eval_frames=eval_frames)
    return cluster_trace(model, eval_batch(cfg, seed), seed)


# --------------------------------------------------------- serialization


def _sidecar_path(path) -> Path:
    p = Path(path)
    if p.is_dir():
        return p / SIDECAR_NAME
    return p.with_suffix(".json")


def save_model(model: ToyModel, cfg: ExperimentConfig, out_dir) -> Path:
    """Binary quantizer bundle (quantized models only) plus a JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {"enc_w": model.enc_w, "enc_b": model.enc_b, "dec_w": model.dec_w, "dec_b": model.dec_b}
    if model.align_w is not None:
        arrays.update(align_w=model.align_w, align_b=model.align_b)
    sidecar = {
        "format": "vorvq-toy-model/1",
        "quantizer": model.quantizer,
        "bundle": BUNDLE_NAME if model.quantized else None,
        "rng": synthdata.RNG_NAME,
        "seeds": {"model_seed": cfg.model_seed, "data_seed": cfg.data_seed},
        "config": cfg.to_dict(),
        # repr floats round-trip exactly through JSON
        "arrays": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in arrays.items()},
    }
    if model.quantized:
        save_bundle(out / BUNDLE_NAME, model.stack_cfg, model.proj, model.codebooks)
    path = out / SIDECAR_NAME
    path.write_text(json.dumps(sidecar) + "\n")
    return path


def load_model(path) -> tuple[ToyModel, ExperimentConfig]:
    """Load from a run directory, a sidecar ``.json`` or the ``.vorvq`` bundle beside it."""
    side = _sidecar_path(path)
    if not side.exists():
        raise FileNotFoundError(f"no model sidecar at {side}")
    meta = json.loads(side.read_text())
    cfg = ExperimentConfig.from_dict(meta["config"])
    arrays = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in meta["arrays"].items()}
    vcfg = cfg.vorvq_config()
    if meta["bundle"] is not None:
        bundle_path = side.parent / meta["bundle"]
        if not bundle_path.exists():
            raise FileNotFoundError(f"missing quantizer bundle {bundle_path}")
        _, proj, books = load_bundle(bundle_path)
    else:
        # unused by the continuous model
        proj, books = Projections.orthogonal(vcfg.latent_dim, vcfg.full_dim, np.random.default_rng(0)), []
    model = ToyModel(
        meta["quantizer"], vcfg, arrays["enc_w"], arrays["enc_b"], arrays["dec_w"], arrays["dec_b"], proj, books,
        arrays.get("align_w"), arrays.get("align_b"),
    )
    if model.quantized:
        for cb, want in zip(books, model.stack_cfg.kept_dims):
            if cb.dim != want:
                raise ValueError("bundle stage widths disagree with the sidecar config")
    return model, cfg


def export_codebooks(bundle_path, out_path) -> list[Codebook]:
    """Write each stage's codebook as CSV rows ``stage,code,v0..``."""
    side = _sidecar_path(bundle_path)
    src = Path(bundle_path)
    if src.suffix != ".vorvq":
        meta = json.loads(side.read_text())
        if meta["bundle"] is None:
            raise ValueError("continuous model has no codebooks")
        src = side.parent / meta["bundle"]
    if not src.exists():
        raise FileNotFoundError(f"no bundle at {src}")
    _, _, books = load_bundle(src)
    width = max(cb.dim for cb in books)
    rows = []
    for cb in books:
        for k, vec in enumerate(cb.vectors):
            row = {"stage": cb.stage_index, "code": k}
            row.update({f"v{j}": (float(vec[j]) if j < cb.dim else None) for j in range(width)})
            rows.append(row)
    write_csv(out_path, rows)
    return books


# -------------------------------------------------------------- ablation


def ablate(base: ExperimentConfig, write: bool = True) -> list[dict]:
    """Train the continuous, rvq and vo_rvq variants under identical seeds and data."""
    rows = []
    n = base.vorvq_config().n_stages
    for variant in QUANTIZERS:
        cfg = base.replace(quantizer=variant, output_dir=str(Path(base.output_dir) / variant))
        result = train(cfg, write=write)
        f = result.final
        row = {
            "variant": variant,
            "model_seed": cfg.model_seed,
            "data_seed": cfg.data_seed,
            "steps": cfg.steps,
            "recon_mse": f.recon_mse,
            "accuracy": f.accuracy,
            "macro_recall": f.macro_recall,
            "macro_f1": f.macro_f1,
            "loss_slope": loss_slope(result.records),
        }
        for i in range(n):
            row[f"perplexity_{i + 1}"] = f.perplexity[i] if f.perplexity else None
        rows.append(row)
    if write:
        Path(base.output_dir).mkdir(parents=True, exist_ok=True)
        write_csv(Path(base.output_dir) / "ablation.csv", rows)
    return rows
