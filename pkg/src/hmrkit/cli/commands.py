"""Training, evaluation, export and ablation runs.

Output layout under ``output_dir``:

- ``config.txt``: the run configuration in ``key = value`` form
- ``loss.csv``: one row per step (step, l_v, l_j3d, l_j2d, l_bce, l_dice, total)
- ``checkpoint.npz``: latest weights, rewritten at the end of every epoch
- ``metrics.csv``: per-sample sample_id, mpjpe, pa_mpjpe, mpvpe, f5, f15 and a mean row
- ``ablation.csv``: one row per (sampling_mode, mask_mode) cell
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .. import meshtopo, synthgen
from ..losses import LossLog, LossReport, compute_losses
from ..metrics import METRIC_COLUMNS, evaluate_sample, mpjpe, write_metrics_csv
from ..model import (
    CheckpointError,
    PointGuidedMeshModel,
    read_checkpoint,
    save_checkpoint,
)
from ..ndtensor import Adam, default_dtype, no_grad
from .config import RunConfig, config_to_text, parse_config

log = logging.getLogger(__name__)

DTYPES = {"f32": np.float32, "f64": np.float64}
BATCH_KEYS = ("image", "gt_coarse", "gt_dense", "gt_joints3d", "gt_joints2d", "gt_heatmaps")
ABLATION_CELLS = (
    ("point_guided", "progressive"),
    ("point_guided", "none"),
    ("learned_queries", "progressive"),
    ("learned_queries", "none"),
)
ABLATION_COLUMNS = ("sampling_mode", "mask_mode", "final_loss") + METRIC_COLUMNS[1:]


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, report: LossReport):
        super().__init__(f"non-finite loss at step {step}: {report}")
        self.step = step
        self.report = report


@dataclass
class TrainResult:
    model: PointGuidedMeshModel
    reports: list[LossReport]
    checkpoint: Path | None

    @property
    def final_loss(self) -> float:
        return self.reports[-1].total


def _synth_config(config: RunConfig) -> synthgen.SynthConfig:
    m = config.model
    return synthgen.SynthConfig(image_size=m.image_size, heatmap_size=m.feature_resolution, occlusion=config.dataset.occlusion)


def make_batch(samples, dtype=np.float64) -> dict[str, np.ndarray]:
    return {k: np.stack([getattr(s, k) for s in samples]).astype(dtype) for k in BATCH_KEYS}


def training_samples(config: RunConfig, template) -> list:
    d = config.dataset
    return synthgen.make_dataset(d.count, d.seed, template, _synth_config(config))


def eval_samples(config: RunConfig, template) -> list:
    d = config.dataset
    return synthgen.make_dataset(d.eval_count, d.eval_seed, template, _synth_config(config))


def _output_dir(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    return out


def predict(model: PointGuidedMeshModel, samples, batch_size: int = 8):
    """Regressed joints (R @ dense) and dense vertices for each sample, as float64."""
    dtype = model.params["head.coord.w"].dtype
    R = model.template.R
    joints, dense = [], []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            images = np.stack([s.image for s in samples[i : i + batch_size]]).astype(dtype)
            out = model(images)
            v = out.dense_vertices.data.astype(np.float64)
            dense.extend(v)
            joints.extend(R @ v)
    return joints, dense


def dataset_mpjpe(model: PointGuidedMeshModel, samples) -> float:
    """Mean pelvis-aligned MPJPE of mesh-regressed joints, in metres."""
    joints, _ = predict(model, samples)
    return float(np.mean([mpjpe(j, s.gt_joints3d) for j, s in zip(joints, samples)]))


def train(config: RunConfig, samples=None, template=None, write: bool = True, on_step=None) -> TrainResult:
    """Adam over mini-batches with the configured step-decay schedule.

    Batches walk a per-epoch permutation drawn from ``dataset.seed``. With
    ``write`` the loss CSV, config and per-epoch checkpoint go to
    ``output_dir``. ``on_step(step, model)`` runs before each update.
    """
    config.validate()
    dtype = DTYPES[config.precision]
    template = template or meshtopo.build_template(config.model.template_preset)
    out = _output_dir(config) if write else None
    with default_dtype(dtype):
        samples = samples if samples is not None else training_samples(config, template)
        model = PointGuidedMeshModel(config.model, template, seed=config.seed)
        optim = Adam(model.params, lr=config.optimizer.learning_rate)
        loss_log = None
        if out is not None:
            (out / "config.txt").write_text(config_to_text(config))
            loss_log = LossLog(out / "loss.csv")
        total = config.total_steps()
        bs = config.optimizer.batch_size
        per_epoch = math.ceil(len(samples) / bs)
        rng = np.random.default_rng([config.dataset.seed, 7])
        reports: list[LossReport] = []
        checkpoint = None
        order = np.arange(len(samples))
        for step in range(total):
            b = step % per_epoch
            if b == 0:
                order = rng.permutation(len(samples))
            batch = make_batch([samples[i] for i in order[b * bs : (b + 1) * bs]], dtype)
            if on_step is not None:
                on_step(step, model)
            optim.lr = config.learning_rate(step)
            optim.zero_grad()
            loss, report = compute_losses(model(batch["image"]), batch, template, config.weights)
            if not np.isfinite(report.total):
                if loss_log is not None:
                    loss_log.append(step, report)
                raise TrainingDivergedError(step, report)
            loss.backward()
            optim.step()
            reports.append(report)
            if loss_log is not None:
                loss_log.append(step, report)
            if out is not None and (b == per_epoch - 1 or step == total - 1):
                checkpoint = out / "checkpoint.npz"
                save_checkpoint(checkpoint, model, config_to_text(config), {"step": step + 1})
            if step % 50 == 0:
                log.info("step %d lr %.1e loss %.6f", step, optim.lr, report.total)
    return TrainResult(model, reports, checkpoint)


def load_model(path: str | Path, precision: str | None = None):
    """Rebuild the model recorded in a checkpoint; returns (model, run config)."""
    arrays, text, _ = read_checkpoint(path)
    config = parse_config(text)
    if precision is not None:
        config = replace(config, precision=precision)
    template = meshtopo.build_template(config.model.template_preset)
    with default_dtype(DTYPES[config.precision]):
        model = PointGuidedMeshModel(config.model, template, seed=config.seed)
    model.load_state_dict(arrays)
    return model, config


def evaluate(model: PointGuidedMeshModel, samples, path: str | Path | None = None, oracle: bool = False):
    """Per-sample metrics (mm) and their mean; with ``oracle`` GT is scored against itself."""
    if oracle:
        joints = [s.gt_joints3d for s in samples]
        dense = [s.gt_dense for s in samples]
    else:
        joints, dense = predict(model, samples)
    rows = [
        (str(s.seed), evaluate_sample(j, s.gt_joints3d, v, s.gt_dense)) for j, v, s in zip(joints, dense, samples)
    ]
    if path is None:
        return rows, {k: float(np.mean([r[k] for _, r in rows])) for k in METRIC_COLUMNS[1:]}
    return rows, write_metrics_csv(path, rows)


def cmd_train(config: RunConfig) -> TrainResult:
    return train(config)


def cmd_eval(
    checkpoint: str | Path,
    config: RunConfig | None = None,
    oracle: bool = False,
    out: str | None = None,
    seed: int | None = None,
    precision: str | None = None,
) -> dict[str, float]:
    """Score a checkpoint on an evaluation split.

    The split comes from ``config`` or, when None, from the config stored in
    the checkpoint; ``out``, ``seed`` (evaluation seed) and ``precision``
    override it.
    """
    model, stored = load_model(checkpoint, precision)
    config = config or stored
    if config.model != stored.model:
        raise CheckpointError("run config model section does not match the checkpoint")
    config = replace(
        config,
        precision=stored.precision,
        output_dir=out or config.output_dir,
        dataset=replace(config.dataset, eval_seed=config.dataset.eval_seed if seed is None else seed),
    )
    samples = eval_samples(config, model.template)
    _, summary = evaluate(model, samples, _output_dir(config) / "metrics.csv", oracle=oracle)
    return summary


def cmd_export(checkpoint: str | Path, seed: int, out_dir: str | Path) -> Path:
    """Predicted dense mesh (OBJ), GT mesh, input image and one PGM per predicted heatmap."""
    model, config = load_model(checkpoint)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sample = synthgen.make_sample(seed, model.template, _synth_config(config))
    dtype = model.params["head.coord.w"].dtype
    with no_grad():
        pred = model(sample.image[None].astype(dtype))
    faces = model.template.dense_faces
    meshtopo.write_obj(out / "mesh.obj", pred.dense_vertices.data[0], faces, comment=f"predicted, sample seed {seed}")
    meshtopo.write_obj(out / "gt_mesh.obj", sample.gt_dense, faces, comment=f"ground truth, sample seed {seed}")
    synthgen.write_ppm(out / "image.ppm", sample.image)
    hm_dir = out / "heatmaps"
    hm_dir.mkdir(exist_ok=True)
    for i, hm in enumerate(pred.heatmaps.data[0]):
        synthgen.write_pgm(hm_dir / f"vertex_{i:04d}.pgm", hm)
    return out


def cmd_gen_data(config: RunConfig) -> Path:
    out = _output_dir(config)
    template = meshtopo.build_template(config.model.template_preset)
    for sample in training_samples(config, template):
        synthgen.dump_sample(sample, out / f"sample_{sample.seed:06d}")
    return out


def cmd_ablate(config: RunConfig) -> list[dict]:
    """Train and evaluate each (sampling_mode, mask_mode) cell under one budget."""
    base = Path(config.output_dir)
    _output_dir(config)
    template = meshtopo.build_template(config.model.template_preset)
    with default_dtype(DTYPES[config.precision]):
        train_set = training_samples(config, template)
        test_set = eval_samples(config, template)
    rows = []
    for sampling, masking in ABLATION_CELLS:
        cell = replace(
            config,
            model=replace(config.model, sampling_mode=sampling, mask_mode=masking),
            output_dir=str(base / f"{sampling}__{masking}"),
        )
        result = train(cell, samples=train_set, template=template)
        _, summary = evaluate(result.model, test_set, Path(cell.output_dir) / "metrics.csv")
        rows.append({"sampling_mode": sampling, "mask_mode": masking, "final_loss": result.final_loss, **summary})
    with (base / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r["sampling_mode"], r["mask_mode"]] + [repr(float(r[k])) for k in ABLATION_COLUMNS[2:]])
    return rows

