"""Evaluation: weighted RMSE, dataset statistics, ablations, exports.

The headline metric mirrors how sparse reference measurements are scored
against dense predictions: per frame, a weighted mean square error with
weights normalized to mean one, then the arithmetic mean over frames, then
the square root.  Frames without labels cannot be scored and are excluded
with a counted warning.

Report-producing entry points write delimited CSV plus a rendered figure
next to it, so a run directory is inspectable without further tooling.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DegenerateStatisticsError, DegenerateWeightsError, InputError
from .model import (
    GripMapOutput,
    ModelConfig,
    forward,
    sample_to_inputs,
)
from .pipeline import Sample

REPORT_HEADER = ["modalities", "set", "grip_mean", "grip_sd", "n_samples", "rmse"]
SCATTER_HEADER = [
    "grip_truth",
    "grip_pred",
    "d_water_mm_truth",
    "d_water_mm_pred",
    "d_ice_mm_truth",
    "d_ice_mm_pred",
    "d_snow_mm_truth",
    "d_snow_mm_pred",
]

# Colormap range anchored to the grip extremes of the synthetic world:
# packed snow floor 0.1 would be ice, dry asphalt 0.82.  Values are clamped
# into [0, 1] first, then mapped through a fixed blue-to-red ramp.
OVERLAY_GRIP_LO = 0.10
OVERLAY_GRIP_HI = 0.82
OVERLAY_CMAP = "coolwarm"
LABEL_SQUARE = 14


@dataclass(frozen=True)
class RmseResult:
    """Weighted RMSE over a set of frames plus its per-frame breakdown."""

    rmse: float
    per_frame_mse: np.ndarray
    n_frames: int
    n_skipped: int


@dataclass(frozen=True)
class DatasetStats:
    """Unweighted grip statistics over every label of a split."""

    grip_mean: float
    grip_sd: float
    n_labels: int
    n_frames: int


@dataclass(frozen=True)
class EvalReport:
    """One evaluation row: a model (or shim) scored on one sample set."""

    set_name: str
    modalities: tuple[str, ...]
    checkpoint_id: str
    grip_mean: float
    grip_sd: float
    n_labels: int
    n_frames: int
    n_skipped: int
    rmse: float
    per_frame_mse: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class AblationPlan:
    """Modality subsets to train and evaluate, one model per subset."""

    subsets: tuple[tuple[str, ...], ...]

    def __post_init__(self) -> None:
        if len(self.subsets) == 0:
            raise InputError("ablation plan has no subsets")
        seen = set()
        for subset in self.subsets:
            if len(subset) == 0:
                raise InputError("ablation subset is empty")
            key = tuple(sorted(subset))
            if key in seen:
                raise InputError(f"duplicate ablation subset {subset}")
            seen.add(key)

    @staticmethod
    def full() -> "AblationPlan":
        """All seven non-empty subsets of the three modalities."""
        mods = ("rgb", "thermal", "reflectance")
        subsets = []
        for mask in range(1, 8):
            subsets.append(tuple(m for i, m in enumerate(mods) if mask >> i & 1))
        return AblationPlan(subsets=tuple(subsets))


def weighted_frame_rmse(
    frames: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
) -> RmseResult:
    """Score per-frame (prediction, target, weight) triples.

    Weights are normalized to mean one within each frame before the weighted
    mean square error; frames with zero labels are skipped and counted in
    ``n_skipped``.  Raises if every frame is empty.
    """
    mses = []
    skipped = 0
    for pred, target, weight in frames:
        pred = np.asarray(pred, dtype=np.float64).reshape(-1)
        target = np.asarray(target, dtype=np.float64).reshape(-1)
        weight = np.asarray(weight, dtype=np.float64).reshape(-1)
        if not (pred.shape == target.shape == weight.shape):
            raise InputError(
                f"frame arrays disagree: {pred.shape} vs {target.shape} vs {weight.shape}"
            )
        if pred.size == 0:
            skipped += 1
            continue
        if np.any(weight < 0):
            raise DegenerateWeightsError("negative frame weights")
        total = float(weight.sum())
        if total <= 0.0:
            raise DegenerateWeightsError("frame weights sum to zero")
        norm = weight * (weight.size / total)
        mses.append(float(np.mean(norm * (pred - target) ** 2)))
    if len(mses) == 0:
        raise DegenerateStatisticsError("no frame with labels to score")
    per_frame = np.asarray(mses, dtype=np.float64)
    return RmseResult(
        rmse=float(math.sqrt(per_frame.mean())),
        per_frame_mse=per_frame,
        n_frames=len(mses),
        n_skipped=skipped,
    )


def dataset_stats(samples: Iterable[Sample]) -> DatasetStats:
    """Unweighted mean and population SD of grip over all labels."""
    grips = []
    n_frames = 0
    for sample in samples:
        n_frames += 1
        grips.extend(label.grip for label in sample.labels)
    if len(grips) == 0:
        raise DegenerateStatisticsError("no labels in split")
    arr = np.asarray(grips, dtype=np.float64)
    return DatasetStats(
        grip_mean=float(arr.mean()),
        grip_sd=float(arr.std()),
        n_labels=arr.size,
        n_frames=n_frames,
    )


def sample_eval_frame(
    sample: Sample, output: GripMapOutput
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Extract (grip prediction, grip truth, raw weight) at the label pixels.

    Predictions are read at the nearest pixel; labels already store integer
    pixel coordinates.  Weights are passed raw, the metric normalizes.
    """
    if len(sample.labels) == 0:
        empty = np.zeros(0, dtype=np.float64)
        return empty, empty, empty
    u = np.asarray([label.u for label in sample.labels], dtype=np.intp)
    v = np.asarray([label.v for label in sample.labels], dtype=np.intp)
    pred = output.grip[v, u].astype(np.float64)
    truth = np.asarray([label.grip for label in sample.labels], dtype=np.float64)
    weight = np.asarray([label.weight_raw for label in sample.labels], dtype=np.float64)
    return pred, truth, weight


def oracle_frames(
    samples: Sequence[Sample],
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per-frame triples of a perfect predictor: prediction equals truth.

    Several labels can share one pixel, so perfection is defined per label,
    not per pixel; this bounds the metric pipeline at exactly RMSE 0.
    """
    frames = []
    for sample in samples:
        truth = np.asarray([lab.grip for lab in sample.labels], dtype=np.float64)
        weight = np.asarray([lab.weight_raw for lab in sample.labels], dtype=np.float64)
        frames.append((truth.copy(), truth, weight))
    return frames


def oracle_label_pairs(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    """(truth, prediction) per label for the perfect predictor: identical."""
    truths = []
    for sample in samples:
        for lab in sample.labels:
            truths.append([lab.grip, lab.d_water, lab.d_ice, lab.d_snow])
    if not truths:
        raise DegenerateStatisticsError("no labels to export")
    arr = np.asarray(truths, dtype=np.float64)
    return arr, arr.copy()


def oracle_output(sample: Sample) -> GripMapOutput:
    """Splat the sample's own labels into dense maps, for visualization.

    Unlabeled pixels are zero; where several labels share a pixel the last
    one wins, so this is an overlay aid, not the scoring-path oracle.
    """
    h, w = sample.height, sample.width
    # float64 so splatted labels read back exactly and the shim scores 0
    grip = np.zeros((h, w), dtype=np.float64)
    d_water = np.zeros((h, w), dtype=np.float64)
    d_ice = np.zeros((h, w), dtype=np.float64)
    d_snow = np.zeros((h, w), dtype=np.float64)
    for label in sample.labels:
        grip[label.v, label.u] = label.grip
        d_water[label.v, label.u] = label.d_water
        d_ice[label.v, label.u] = label.d_ice
        d_snow[label.v, label.u] = label.d_snow
    return GripMapOutput(grip=grip, d_water=d_water, d_ice=d_ice, d_snow=d_snow)


def predict_outputs(
    model, samples: Sequence[Sample], modalities: Sequence[str]
) -> list[GripMapOutput]:
    """Run the model over samples in inference mode, one dense map each."""
    outputs = []
    for sample in samples:
        inputs = sample_to_inputs(sample, modalities)
        outputs.append(forward(model, inputs, training=False))
    return outputs


def evaluate_model(
    model,
    samples: Sequence[Sample],
    modalities: Sequence[str],
    set_name: str = "eval",
    checkpoint_id: str = "",
) -> EvalReport:
    """Score a model on a sample set: grip stats plus weighted RMSE."""
    if len(samples) == 0:
        raise InputError("empty evaluation set")
    outputs = predict_outputs(model, samples, modalities)
    return report_from_outputs(
        samples, outputs, modalities, set_name=set_name, checkpoint_id=checkpoint_id
    )


def report_from_outputs(
    samples: Sequence[Sample],
    outputs: Sequence[GripMapOutput],
    modalities: Sequence[str],
    set_name: str = "eval",
    checkpoint_id: str = "",
) -> EvalReport:
    """Assemble an EvalReport from precomputed dense outputs."""
    if len(samples) != len(outputs):
        raise InputError("samples and outputs differ in length")
    frames = [sample_eval_frame(s, o) for s, o in zip(samples, outputs)]
    return report_from_frames(samples, frames, modalities,
                              set_name=set_name, checkpoint_id=checkpoint_id)


def report_from_frames(
    samples: Sequence[Sample],
    frames: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
    modalities: Sequence[str],
    set_name: str = "eval",
    checkpoint_id: str = "",
) -> EvalReport:
    """Assemble an EvalReport from per-frame (pred, truth, weight) triples."""
    result = weighted_frame_rmse(frames)
    stats = dataset_stats(samples)
    return EvalReport(
        set_name=set_name,
        modalities=tuple(modalities),
        checkpoint_id=checkpoint_id,
        grip_mean=stats.grip_mean,
        grip_sd=stats.grip_sd,
        n_labels=stats.n_labels,
        n_frames=result.n_frames,
        n_skipped=result.n_skipped,
        rmse=result.rmse,
        per_frame_mse=result.per_frame_mse,
    )


def modalities_tag(modalities: Sequence[str]) -> str:
    """Canonical CSV cell for a modality subset, e.g. ``rgb+reflectance``."""
    order = {"rgb": 0, "thermal": 1, "reflectance": 2}
    return "+".join(sorted(modalities, key=lambda m: order[m]))


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_report_csv(reports: Sequence[EvalReport], path: Path) -> Path:
    """Write evaluation rows as CSV and a companion RMSE bar figure."""
    path = Path(path)
    lines = [",".join(REPORT_HEADER)]
    for report in reports:
        lines.append(
            ",".join(
                [
                    modalities_tag(report.modalities),
                    report.set_name,
                    f"{report.grip_mean:.6f}",
                    f"{report.grip_sd:.6f}",
                    str(report.n_labels),
                    f"{report.rmse:.6f}",
                ]
            )
        )
    _atomic_write_text(path, "\n".join(lines) + "\n")
    _report_figure(reports, path.with_suffix(".png"))
    return path


def read_report_csv(path: Path) -> list[dict[str, str]]:
    """Read rows written by write_report_csv (values kept as strings)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_HEADER:
            raise InputError(f"unexpected report header {reader.fieldnames}")
        return list(reader)


def _report_figure(reports: Sequence[EvalReport], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(reports)), 3.2))
    tags = [f"{modalities_tag(r.modalities)}\n{r.set_name}" for r in reports]
    ax.bar(np.arange(len(reports)), [r.rmse for r in reports], color="#4878a8")
    ax.set_xticks(np.arange(len(reports)))
    ax.set_xticklabels(tags, fontsize=7)
    ax.set_ylabel("weighted RMSE")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def run_ablation(
    plan: AblationPlan,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    eval_sets: Mapping[str, Sequence[Sample]],
    model_config: ModelConfig,
    train_config,
    out_dir: Path,
    seeds: Sequence[int] = (0, 1, 2),
) -> dict[tuple[str, str], float]:
    """Train one model per modality subset and seed, score every eval set.

    Writes ``ablation_seed<k>.csv`` per seed plus ``ablation.csv`` holding
    the across-seed median RMSE per (subset, set) cell, all with a bar
    figure alongside.  A failed training run annotates its rows with
    ``failed(<error>)`` instead of aborting the sweep.  Returns the median
    RMSE table keyed by (modalities tag, set name).
    """
    from .training import train  # deferred: training imports this module

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_seed: dict[int, list[EvalReport | tuple[tuple[str, ...], str, str]]] = {}
    for seed in seeds:
        rows: list[EvalReport | tuple[tuple[str, ...], str, str]] = []
        for subset in plan.subsets:
            sub_config = replace(model_config, modalities=subset)
            sub_train = replace(train_config, seed=seed)
            run_dir = out_dir / f"run_{modalities_tag(subset).replace('+', '_')}_s{seed}"
            try:
                result = train(train_samples, val_samples, sub_config, sub_train, run_dir)
                for set_name, samples in eval_sets.items():
                    rows.append(
                        evaluate_model(
                            result.model,
                            samples,
                            subset,
                            set_name=set_name,
                            checkpoint_id=str(result.checkpoint_path.name),
                        )
                    )
            except Exception as exc:  # annotate the row, keep sweeping
                for set_name in eval_sets:
                    rows.append((subset, set_name, f"failed({type(exc).__name__})"))
        per_seed[seed] = rows
        _write_ablation_rows(rows, out_dir / f"ablation_seed{seed}.csv", eval_sets, train_samples, val_samples)

    median = _median_table(per_seed, plan, eval_sets)
    _write_median_csv(median, per_seed, plan, eval_sets, out_dir / "ablation.csv")
    return median


def _write_ablation_rows(rows, path: Path, eval_sets, train_samples, val_samples) -> None:
    lines = [",".join(REPORT_HEADER)]
    for row in rows:
        if isinstance(row, EvalReport):
            lines.append(
                ",".join(
                    [
                        modalities_tag(row.modalities),
                        row.set_name,
                        f"{row.grip_mean:.6f}",
                        f"{row.grip_sd:.6f}",
                        str(row.n_labels),
                        f"{row.rmse:.6f}",
                    ]
                )
            )
        else:
            subset, set_name, note = row
            stats = dataset_stats(eval_sets[set_name])
            lines.append(
                ",".join(
                    [
                        modalities_tag(subset),
                        set_name,
                        f"{stats.grip_mean:.6f}",
                        f"{stats.grip_sd:.6f}",
                        str(stats.n_labels),
                        note,
                    ]
                )
            )
    _atomic_write_text(path, "\n".join(lines) + "\n")
    reports = [r for r in rows if isinstance(r, EvalReport)]
    if reports:
        _report_figure(reports, path.with_suffix(".png"))


def _median_table(per_seed, plan: AblationPlan, eval_sets) -> dict[tuple[str, str], float]:
    median: dict[tuple[str, str], float] = {}
    for subset in plan.subsets:
        tag = modalities_tag(subset)
        for set_name in eval_sets:
            values = []
            for rows in per_seed.values():
                for row in rows:
                    if isinstance(row, EvalReport):
                        if modalities_tag(row.modalities) == tag and row.set_name == set_name:
                            values.append(row.rmse)
            if values:
                median[(tag, set_name)] = float(np.median(values))
            else:
                median[(tag, set_name)] = float("nan")
    return median


def _write_median_csv(median, per_seed, plan: AblationPlan, eval_sets, path: Path) -> None:
    lines = [",".join(REPORT_HEADER)]
    reports_for_fig = []
    for subset in plan.subsets:
        tag = modalities_tag(subset)
        for set_name, samples in eval_sets.items():
            stats = dataset_stats(samples)
            rmse = median[(tag, set_name)]
            cell = f"{rmse:.6f}" if math.isfinite(rmse) else "failed(all-seeds)"
            lines.append(
                ",".join(
                    [
                        tag,
                        set_name,
                        f"{stats.grip_mean:.6f}",
                        f"{stats.grip_sd:.6f}",
                        str(stats.n_labels),
                        cell,
                    ]
                )
            )
            if math.isfinite(rmse):
                reports_for_fig.append(
                    EvalReport(
                        set_name=set_name,
                        modalities=subset,
                        checkpoint_id="median",
                        grip_mean=stats.grip_mean,
                        grip_sd=stats.grip_sd,
                        n_labels=stats.n_labels,
                        n_frames=0,
                        n_skipped=0,
                        rmse=rmse,
                        per_frame_mse=np.zeros(0),
                    )
                )
    _atomic_write_text(path, "\n".join(lines) + "\n")
    if reports_for_fig:
        _report_figure(reports_for_fig, path.with_suffix(".png"))


def collect_label_pairs(
    samples: Sequence[Sample], outputs: Sequence[GripMapOutput]
) -> tuple[np.ndarray, np.ndarray]:
    """Stack (truth, prediction) per label as (n, 4) arrays.

    Column order: grip, water mm, ice mm, snow mm; predictions read at the
    nearest pixel.
    """
    if len(samples) != len(outputs):
        raise InputError("samples and outputs differ in length")
    truths = []
    preds = []
    for sample, output in zip(samples, outputs):
        for label in sample.labels:
            truths.append([label.grip, label.d_water, label.d_ice, label.d_snow])
            preds.append(
                [
                    output.grip[label.v, label.u],
                    output.d_water[label.v, label.u],
                    output.d_ice[label.v, label.u],
                    output.d_snow[label.v, label.u],
                ]
            )
    if not truths:
        raise DegenerateStatisticsError("no labels to export")
    return (
        np.asarray(truths, dtype=np.float64),
        np.asarray(preds, dtype=np.float64),
    )


def sample_indices(population: int, n: int, seed: int, replace: bool = False) -> np.ndarray:
    """Uniform index sample for the scatter export, deterministic per seed."""
    if population <= 0:
        raise DegenerateStatisticsError("no labels to export")
    if n > population and not replace:
        raise InputError(
            f"requested {n} rows from {population} labels without replacement"
        )
    rng = np.random.default_rng(seed)
    return rng.choice(population, size=n, replace=replace)


def scatter_export(
    truths: np.ndarray,
    preds: np.ndarray,
    path: Path,
    n: int = 50000,
    seed: int = 0,
    replace: bool = False,
) -> Path:
    """Export n uniformly sampled (truth, prediction) rows as CSV + figure.

    Sampling is without replacement unless ``replace`` is set; asking for
    more rows than labels without replacement is an error.  Deterministic
    per seed.
    """
    truths = np.asarray(truths, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if truths.ndim != 2 or truths.shape[1] != 4 or truths.shape != preds.shape:
        raise InputError(f"expected matching (n, 4) arrays, got {truths.shape} and {preds.shape}")
    idx = sample_indices(truths.shape[0], n, seed, replace)
    path = Path(path)
    lines = [",".join(SCATTER_HEADER)]
    for i in idx:
        row = []
        for j in range(4):
            row.append(repr(float(truths[i, j])))
            row.append(repr(float(preds[i, j])))
        lines.append(",".join(row))
    _atomic_write_text(path, "\n".join(lines) + "\n")
    _scatter_figure(truths[idx], preds[idx], path.with_suffix(".png"))
    return path


def _scatter_figure(truths: np.ndarray, preds: np.ndarray, path: Path) -> None:
    names = ["grip", "water mm", "ice mm", "snow mm"]
    fig, axes = plt.subplots(2, 2, figsize=(7, 6))
    for j, ax in enumerate(axes.flat):
        ax.plot(truths[:, j], preds[:, j], ".", markersize=1.5, alpha=0.3)
        lo = float(min(truths[:, j].min(), preds[:, j].min()))
        hi = float(max(truths[:, j].max(), preds[:, j].max()))
        if hi <= lo:
            hi = lo + 1.0
        ax.plot([lo, hi], [lo, hi], "k-", linewidth=0.7)
        ax.set_xlabel(f"true {names[j]}")
        ax.set_ylabel(f"predicted {names[j]}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_overlay(
    sample: Sample,
    grip_map: np.ndarray,
    alpha: float = 0.6,
    v_lo: float = OVERLAY_GRIP_LO,
    v_hi: float = OVERLAY_GRIP_HI,
) -> np.ndarray:
    """Composite a grip map over the RGB frame, with ground-truth squares.

    Grip values are clamped to [0, 1], mapped through a fixed blue-to-red
    ramp spanning [v_lo, v_hi], and alpha-blended over road pixels only.
    Each label paints a 14 x 14 px square of its true grip color, clipped at
    the image border.  Returns float32 (H, W, 3) in [0, 1].
    """
    grip_map = np.asarray(grip_map, dtype=np.float64)
    if grip_map.shape != sample.road_mask.shape:
        raise InputError(
            f"grip map {grip_map.shape} does not match mask {sample.road_mask.shape}"
        )
    cmap = plt.get_cmap(OVERLAY_CMAP)
    span = v_hi - v_lo
    clamped = np.clip(grip_map, 0.0, 1.0)
    unit = np.clip((clamped - v_lo) / span, 0.0, 1.0)
    colors = cmap(unit)[..., :3].astype(np.float32)
    out = sample.rgb.copy()
    mask = sample.road_mask
    out[mask] = (1.0 - alpha) * out[mask] + alpha * colors[mask]
    half = LABEL_SQUARE // 2
    h, w = grip_map.shape
    for label in sample.labels:
        r0 = max(0, label.v - half)
        r1 = min(h, label.v + LABEL_SQUARE - half)
        c0 = max(0, label.u - half)
        c1 = min(w, label.u + LABEL_SQUARE - half)
        g = np.clip(label.grip, 0.0, 1.0)
        color = np.asarray(cmap(np.clip((g - v_lo) / span, 0.0, 1.0))[:3], dtype=np.float32)
        out[r0:r1, c0:c1] = color
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def overlay_emit(sample: Sample, grip_map: np.ndarray, path: Path, alpha: float = 0.6) -> Path:
    """Render the overlay for one sample and write it as a PNG."""
    image = render_overlay(sample, grip_map, alpha=alpha)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.png")
    plt.imsave(tmp, image)
    os.replace(tmp, path)
    return path
