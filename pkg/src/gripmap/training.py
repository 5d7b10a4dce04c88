"""Training: weakly supervised loss, augmentation, and the fitting loop.

Supervision is sparse: each frame carries a handful of labeled pixels, each
with a grip value, three layer thicknesses, and a row weight.  The loss
reads the dense prediction at the nearest pixel per label and combines a
weighted grip term with a weighted thickness term averaged over the three
layers:

    L = (1/N) sum_i w_i (y_i - f_i)^2
      + (lambda / (3N)) sum_l sum_i w_i (y_li - f_li)^2

with N the number of labels in the sample and w_i the per-frame weights
normalized to mean one.  A batch averages the per-sample losses of its
labeled members.

Augmentation applies, per sample and in fixed order: joint scale and
rotation, horizontal flip, Gaussian blur, and RGB color jitter.  Geometric
transforms hit every image, mask, and label pixel identically; labels
pushed out of the frame are dropped.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigError, DegenerateWeightsError, InputError, TrainingDivergedError
from .evaluation import sample_eval_frame, weighted_frame_rmse
from .model import (
    GripMapOutput,
    GripNet,
    ModelConfig,
    init_model,
    inputs_to_tensors,
    load_model,
    sample_to_inputs,
    save_model,
)
from .pipeline import Sample, SparseLabel

LOG_HEADER = ["epoch", "train_loss", "val_loss", "val_rmse", "seconds"]

SCALE_RANGE = (0.9, 1.1)
ROTATION_DEG = 5.0
BLUR_SIGMA_RANGE = (0.3, 1.0)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and augmentation settings for one training run."""

    lambda_aux: float = 1.0
    epochs: int = 38
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    p_scale_rot: float = 0.30
    p_hflip: float = 0.50
    p_blur: float = 0.30
    p_color_jitter: float = 0.30
    seed: int = 0

    def __post_init__(self):
        if self.lambda_aux < 0:
            raise ConfigError("lambda_aux must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        for name in ("p_scale_rot", "p_hflip", "p_blur", "p_color_jitter"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be a probability")


@dataclass
class TrainState:
    """Progress of a run: epoch counter and the best validation so far."""

    epoch: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0


@dataclass
class TrainResult:
    """Outcome of a run: best model plus the artifacts written to disk."""

    model: GripNet
    checkpoint_path: Path
    log_path: Path
    log_rows: list[tuple[int, float, float, float, float]]
    best_val_loss: float
    best_epoch: int


# ---------------------------------------------------------------------------
# Loss


def label_arrays(labels: Sequence[SparseLabel]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pack labels as pixel coords (n, 2) [u, v], targets (n, 4), raw weights (n,)."""
    uv = np.asarray([[lab.u, lab.v] for lab in labels], dtype=np.intp).reshape(-1, 2)
    targets = np.asarray(
        [[lab.grip, lab.d_water, lab.d_ice, lab.d_snow] for lab in labels],
        dtype=np.float64,
    ).reshape(-1, 4)
    raw = np.asarray([lab.weight_raw for lab in labels], dtype=np.float64)
    return uv, targets, raw


def normalized_label_weights(labels: Sequence[SparseLabel]) -> np.ndarray:
    """Mean-one weights from the raw row weights of one frame's labels."""
    if len(labels) == 0:
        raise DegenerateWeightsError("no labels to weight")
    raw = np.asarray([lab.weight_raw for lab in labels], dtype=np.float64)
    total = float(raw.sum())
    if total <= 0.0:
        raise DegenerateWeightsError("label weights sum to zero")
    return raw * (raw.size / total)


def loss(
    output: GripMapOutput | np.ndarray,
    labels: Sequence[SparseLabel],
    lambda_aux: float = 1.0,
    weights: np.ndarray | None = None,
) -> float:
    """Weighted grip-plus-thickness loss of one frame's sparse labels.

    Predictions are read at the nearest pixel.  When ``weights`` is omitted
    the raw label weights are normalized to mean one; an explicit array is
    used as given.
    """
    maps = output.stack() if isinstance(output, GripMapOutput) else np.asarray(output)
    if maps.ndim != 3 or maps.shape[0] != 4:
        raise InputError(f"expected (4, H, W) prediction maps, got {maps.shape}")
    if len(labels) == 0:
        raise DegenerateWeightsError("loss is undefined for a frame without labels")
    uv, targets, _ = label_arrays(labels)
    if weights is None:
        w = normalized_label_weights(labels)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != len(labels):
            raise InputError("weights length does not match labels")
    pred = maps[:, uv[:, 1], uv[:, 0]].astype(np.float64)  # (4, n)
    grip_term = float(np.mean(w * (targets[:, 0] - pred[0]) ** 2))
    aux = 0.0
    for layer in range(1, 4):
        aux += float(np.mean(w * (targets[:, layer] - pred[layer]) ** 2))
    return grip_term + (lambda_aux / 3.0) * aux


def batch_loss(
    maps: torch.Tensor,
    batch_labels: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
    lambda_aux: float,
) -> torch.Tensor:
    """Differentiable batch loss over (B, 4, H, W) predictions.

    ``batch_labels`` holds per-sample (uv, targets, mean-one weights); the
    batch loss is the mean of per-sample losses.  Samples must all carry at
    least one label, the caller filters unlabeled ones.
    """
    if maps.ndim != 4 or maps.shape[1] != 4:
        raise InputError(f"expected (B, 4, H, W) maps, got {tuple(maps.shape)}")
    if len(batch_labels) != maps.shape[0]:
        raise InputError("batch labels do not match batch size")
    terms = []
    for b, (uv, targets, weights) in enumerate(batch_labels):
        if uv.shape[0] == 0:
            raise DegenerateWeightsError("unlabeled sample reached batch_loss")
        u = torch.from_numpy(np.ascontiguousarray(uv[:, 0]))
        v = torch.from_numpy(np.ascontiguousarray(uv[:, 1]))
        t = torch.from_numpy(targets).to(maps.dtype)
        w = torch.from_numpy(weights).to(maps.dtype)
        pred = maps[b][:, v, u]  # (4, n)
        grip_term = torch.mean(w * (t[:, 0] - pred[0]) ** 2)
        aux = maps.new_zeros(())
        for layer in range(1, 4):
            aux = aux + torch.mean(w * (t[:, layer] - pred[layer]) ** 2)
        terms.append(grip_term + (lambda_aux / 3.0) * aux)
    return torch.stack(terms).mean()


# ---------------------------------------------------------------------------
# Augmentation


def _content_matrix(scale: float, angle_deg: float) -> np.ndarray:
    """Forward content transform in (row, col) coordinates about the origin."""
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    # rotation of (u, v) by theta, expressed on (v, u) vectors, times scale
    return scale * np.array([[c, s], [-s, c]], dtype=np.float64)


def scale_rotate_sample(sample: Sample, scale: float, angle_deg: float) -> Sample:
    """Scale and rotate content about the image center; drop lost labels.

    All images and masks are resampled identically (bilinear for float
    images, nearest for masks); label pixels follow the same transform,
    rounded to the nearest pixel, and are dropped when they leave the frame.
    Raw weights travel with their labels unchanged.
    """
    if scale <= 0:
        raise InputError("scale must be positive")
    h, w = sample.height, sample.width
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0], dtype=np.float64)
    fwd = _content_matrix(scale, angle_deg)
    inv = np.linalg.inv(fwd)
    offset = center - inv @ center

    def _float(img: np.ndarray) -> np.ndarray:
        return ndimage.affine_transform(
            np.asarray(img, dtype=np.float64), inv, offset=offset, order=1,
            mode="constant", cval=0.0).astype(np.float32)

    def _mask(img: np.ndarray) -> np.ndarray:
        moved = ndimage.affine_transform(
            img.astype(np.uint8), inv, offset=offset, order=0,
            mode="constant", cval=0)
        return moved.astype(bool)

    rgb = np.stack([_float(sample.rgb[..., c]) for c in range(3)], axis=-1)
    labels = []
    for lab in sample.labels:
        vu = np.array([lab.v, lab.u], dtype=np.float64)
        moved = center + fwd @ (vu - center)
        v_new = int(np.rint(moved[0]))
        u_new = int(np.rint(moved[1]))
        if 0 <= u_new < w and 0 <= v_new < h:
            labels.append(replace(lab, u=u_new, v=v_new))
    return Sample(
        id=sample.id,
        frame_time=sample.frame_time,
        position=sample.position.copy(),
        rgb=rgb,
        thermal=_float(sample.thermal),
        reflectance=_float(sample.reflectance),
        reflectance_valid=_mask(sample.reflectance_valid),
        labels=labels,
        road_mask=_mask(sample.road_mask),
    )


def hflip_sample(sample: Sample) -> Sample:
    """Mirror the frame left-right; u maps to W - 1 - u, an exact involution."""
    w = sample.width
    labels = [replace(lab, u=w - 1 - lab.u) for lab in sample.labels]
    return Sample(
        id=sample.id,
        frame_time=sample.frame_time,
        position=sample.position.copy(),
        rgb=np.flip(sample.rgb, axis=1).copy(),
        thermal=np.flip(sample.thermal, axis=1).copy(),
        reflectance=np.flip(sample.reflectance, axis=1).copy(),
        reflectance_valid=np.flip(sample.reflectance_valid, axis=1).copy(),
        labels=labels,
        road_mask=np.flip(sample.road_mask, axis=1).copy(),
    )


def blur_sample(sample: Sample, sigma: float) -> Sample:
    """Gaussian-blur the float images; masks and labels are untouched."""
    if sigma < 0:
        raise InputError("sigma must be non-negative")
    rgb = ndimage.gaussian_filter(
        np.asarray(sample.rgb, dtype=np.float64), sigma=(sigma, sigma, 0.0)
    ).astype(np.float32)
    return Sample(
        id=sample.id,
        frame_time=sample.frame_time,
        position=sample.position.copy(),
        rgb=rgb,
        thermal=ndimage.gaussian_filter(
            np.asarray(sample.thermal, dtype=np.float64), sigma).astype(np.float32),
        reflectance=ndimage.gaussian_filter(
            np.asarray(sample.reflectance, dtype=np.float64), sigma).astype(np.float32),
        reflectance_valid=sample.reflectance_valid.copy(),
        labels=list(sample.labels),
        road_mask=sample.road_mask.copy(),
    )


def color_jitter_sample(
    sample: Sample, brightness: float, gains: np.ndarray, offset: float
) -> Sample:
    """Affine photometric jitter on RGB only, clipped back to [0, 1]."""
    gains = np.asarray(gains, dtype=np.float64).reshape(3)
    rgb = np.clip(
        np.asarray(sample.rgb, dtype=np.float64) * brightness * gains + offset,
        0.0, 1.0).astype(np.float32)
    return Sample(
        id=sample.id,
        frame_time=sample.frame_time,
        position=sample.position.copy(),
        rgb=rgb,
        thermal=sample.thermal.copy(),
        reflectance=sample.reflectance.copy(),
        reflectance_valid=sample.reflectance_valid.copy(),
        labels=list(sample.labels),
        road_mask=sample.road_mask.copy(),
    )


def augment(
    sample: Sample,
    rng: np.random.Generator,
    p_scale_rot: float = 0.30,
    p_hflip: float = 0.50,
    p_blur: float = 0.30,
    p_color_jitter: float = 0.30,
) -> Sample:
    """Randomized augmentation chain, applied in a fixed order per sample."""
    out = sample
    if rng.random() < p_scale_rot:
        scale = rng.uniform(*SCALE_RANGE)
        angle = rng.uniform(-ROTATION_DEG, ROTATION_DEG)
        out = scale_rotate_sample(out, scale, angle)
    if rng.random() < p_hflip:
        out = hflip_sample(out)
    if rng.random() < p_blur:
        out = blur_sample(out, rng.uniform(*BLUR_SIGMA_RANGE))
    if rng.random() < p_color_jitter:
        brightness = rng.uniform(0.8, 1.2)
        gains = rng.uniform(0.9, 1.1, size=3)
        offset = rng.uniform(-0.05, 0.05)
        out = color_jitter_sample(out, brightness, gains, offset)
    return out


# ---------------------------------------------------------------------------
# Fitting loop


def _stack_batch(samples: Sequence[Sample], modalities, dtype) -> dict[str, torch.Tensor]:
    per_modality: dict[str, list[torch.Tensor]] = {}
    for sample in samples:
        tensors = inputs_to_tensors(sample_to_inputs(sample, modalities), dtype=dtype)
        for m, t in tensors.items():
            per_modality.setdefault(m, []).append(t)
    return {m: torch.cat(ts, dim=0) for m, ts in per_modality.items()}


def _batch_label_arrays(samples: Sequence[Sample]):
    packed = []
    for sample in samples:
        uv, targets, _ = label_arrays(sample.labels)
        packed.append((uv, targets, normalized_label_weights(sample.labels)))
    return packed


def _validate_splits(train_samples, val_samples) -> tuple[int, int]:
    if len(train_samples) == 0 or len(val_samples) == 0:
        raise InputError("train and val splits must both be non-empty")
    shapes = {(s.height, s.width) for s in list(train_samples) + list(val_samples)}
    if len(shapes) != 1:
        raise InputError(f"samples disagree on frame shape: {sorted(shapes)}")
    if not any(len(s.labels) > 0 for s in train_samples):
        raise InputError("no labeled sample in the train split")
    if not any(len(s.labels) > 0 for s in val_samples):
        raise InputError("no labeled sample in the val split")
    return shapes.pop()


def _write_log(path: Path, rows) -> None:
    lines = [",".join(LOG_HEADER)]
    for epoch, train_loss, val_loss, val_rmse, seconds in rows:
        lines.append(
            f"{epoch},{repr(float(train_loss))},{repr(float(val_loss))},"
            f"{repr(float(val_rmse))},{seconds:.3f}")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _log_figure(rows, path: Path) -> None:
    import matplotlib.pyplot as plt

    epochs = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [r[1] for r in rows], label="train loss")
    ax.plot(epochs, [r[2] for r in rows], label="val loss")
    ax.plot(epochs, [r[3] for r in rows], label="val RMSE", linestyle="--")
    ax.set_xlabel("epoch")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _validate_epoch(model, val_samples, modalities, lambda_aux, batch_size, dtype):
    """Eval-mode loss and weighted RMSE over the labeled validation frames."""
    losses = []
    frames = []
    labeled = [s for s in val_samples if len(s.labels) > 0]
    model.train(False)
    with torch.no_grad():
        for start in range(0, len(labeled), batch_size):
            chunk = labeled[start:start + batch_size]
            maps = model(_stack_batch(chunk, modalities, dtype))
            arr = maps.detach().cpu().numpy().astype(np.float64)
            for b, sample in enumerate(chunk):
                losses.append(loss(arr[b], sample.labels, lambda_aux))
                output = GripMapOutput(
                    grip=arr[b, 0], d_water=arr[b, 1],
                    d_ice=arr[b, 2], d_snow=arr[b, 3])
                frames.append(sample_eval_frame(sample, output))
    val_loss = float(np.mean(losses))
    val_rmse = weighted_frame_rmse(frames).rmse
    return val_loss, val_rmse


def train(
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: Path | str,
    checkpoint_name: str = "model_best.ckpt",
    log_name: str = "train_log.csv",
) -> TrainResult:
    """Fit a model with Adam, keeping the best-validation checkpoint.

    Per epoch: shuffle, augment, and batch the train split, take one Adam
    step per batch, then score the val split with eval-mode weights.  The
    checkpoint is rewritten whenever validation loss improves, and a CSV
    log row ``epoch,train_loss,val_loss,val_rmse,seconds`` is appended.  A
    non-finite training loss aborts the run.  Fully deterministic for a
    fixed config and seed, except for the seconds column.
    """
    _validate_splits(train_samples, val_samples)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / checkpoint_name
    log_path = out_dir / log_name

    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    model = init_model(model_config, config.seed)
    dtype = next(model.parameters()).dtype
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        eps=config.eps,
    )

    state = TrainState()
    rows: list[tuple[int, float, float, float, float]] = []
    modalities = model_config.modalities
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        state.epoch = epoch
        model.train(True)
        order = rng.permutation(len(train_samples))
        loss_sum = 0.0
        n_scored = 0
        for start in range(0, len(order), config.batch_size):
            chunk_idx = order[start:start + config.batch_size]
            batch = []
            for i in chunk_idx:
                augmented = augment(
                    train_samples[i], rng,
                    p_scale_rot=config.p_scale_rot,
                    p_hflip=config.p_hflip,
                    p_blur=config.p_blur,
                    p_color_jitter=config.p_color_jitter,
                )
                if len(augmented.labels) > 0:
                    batch.append(augmented)
            if len(batch) == 0:
                continue
            maps = model(_stack_batch(batch, modalities, dtype))
            loss_t = batch_loss(maps, _batch_label_arrays(batch), config.lambda_aux)
            loss_val = float(loss_t.detach())
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(
                    f"non-finite training loss {loss_val} in epoch {epoch}")
            optimizer.zero_grad()
            loss_t.backward()
            optimizer.step()
            loss_sum += loss_val * len(batch)
            n_scored += len(batch)
        if n_scored == 0:
            raise DegenerateWeightsError(
                f"augmentation left no labeled sample in epoch {epoch}")
        train_loss = loss_sum / n_scored

        val_loss, val_rmse = _validate_epoch(
            model, val_samples, modalities, config.lambda_aux,
            config.batch_size, dtype)
        if not (math.isfinite(val_loss) and math.isfinite(val_rmse)):
            raise TrainingDivergedError(
                f"non-finite validation metrics in epoch {epoch}")
        seconds = time.perf_counter() - t0
        rows.append((epoch, train_loss, val_loss, val_rmse, seconds))
        _write_log(log_path, rows)
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_epoch = epoch
            save_model(checkpoint_path, model)

    _log_figure(rows, log_path.with_suffix(".png"))
    best_model = load_model(checkpoint_path)
    return TrainResult(
        model=best_model,
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        log_rows=rows,
        best_val_loss=state.best_val_loss,
        best_epoch=state.best_epoch,
    )


def read_log(path: Path | str) -> list[tuple[int, float, float, float, float]]:
    """Read a training log CSV back as typed rows."""
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0].split(",") != LOG_HEADER:
        raise InputError(f"unexpected log header in {path}")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append((int(parts[0]), float(parts[1]), float(parts[2]),
                     float(parts[3]), float(parts[4])))
    return rows
