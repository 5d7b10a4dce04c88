"""Command-line entry points: synth, split, train, eval, ablate, visualize, scatter.

Every command reads one INI configuration file (``--config``) and writes
its outputs atomically, so rerunning a command never leaves a corrupt
artifact behind.  Report commands emit CSV plus a rendered figure next to
it.  ``--checkpoint oracle`` substitutes a perfect-recall predictor that
splats each sample's own labels, which bounds the metric pipeline at
RMSE 0.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import evaluation, pipeline, synth, training
from .config import RunConfig, load_config
from .errors import ConfigError, GripmapError
from .model import forward, load_model, sample_to_inputs

SPLIT_SEARCH_ORDER = ("test", "val", "train", "unsplit", "excluded")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gripmap",
        description="Dense road-grip prediction from fused RGB, thermal, and "
                    "LiDAR-reflectance images, on synthetic drives.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, checkpoint=False, out=False, modalities=False, ids=False):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="run configuration INI file")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the synth/train/scatter seeds")
        if out:
            cmd.add_argument("--out", default=None, help="output directory")
        if checkpoint:
            cmd.add_argument("--checkpoint", required=True,
                             help="model checkpoint path, or 'oracle'")
        if modalities:
            cmd.add_argument("--modalities", default=None,
                             help="comma list, e.g. rgb,thermal,reflectance")
        if ids:
            cmd.add_argument("--ids", default=None,
                             help="comma list of sample ids (default: first test samples)")
        return cmd

    add("synth", "generate scenes, simulate drives, and persist samples")
    add("split", "assign samples to geofenced train/val/test splits")
    add("train", "fit a model on the train split", out=True, modalities=True)
    add("eval", "score a checkpoint on the configured sets",
        checkpoint=True, out=True, modalities=True)
    add("ablate", "train and score every configured modality subset", out=True)
    add("visualize", "render grip-map overlays for chosen samples",
        checkpoint=True, out=True, ids=True)
    add("scatter", "export sampled (truth, prediction) pairs",
        checkpoint=True, out=True)
    return parser


def _out_dir(config: RunConfig, args, command: str) -> Path:
    base = Path(args.out) if getattr(args, "out", None) else config.out_dir / command
    base.mkdir(parents=True, exist_ok=True)
    return base


def _load_set(config: RunConfig, name: str) -> list[pipeline.Sample]:
    split_dir = config.root / name
    if not (split_dir / "manifest.csv").exists():
        raise ConfigError(f"split {name!r} has no manifest under {split_dir}")
    samples = pipeline.load_split(split_dir)
    if len(samples) == 0:
        raise ConfigError(f"split {name!r} is empty")
    return samples


def _outputs_for(checkpoint: str, samples, config: RunConfig):
    """Dense predictions per sample from a checkpoint path or the oracle shim."""
    if checkpoint == "oracle":
        return [evaluation.oracle_output(s) for s in samples], config.model.modalities
    model = load_model(Path(checkpoint))
    outputs = [forward(model, sample_to_inputs(s, model.config.modalities))
               for s in samples]
    return outputs, model.config.modalities


def cmd_synth(config: RunConfig, args) -> int:
    plan = config.synth
    all_samples = []
    for d in range(plan.n_drives):
        profile = plan.profile_for_drive(d)
        seed_d = plan.drive_seed(d)
        scene = synth.generate_scene(profile, seed_d, config.geometry_for_drive(d))
        path = synth.make_weaving_trajectory(
            plan.x_start, plan.drive_y(d), plan.speed, plan.duration,
            plan.weave_amplitude, plan.weave_period)
        recording = synth.simulate_drive(
            scene, path, profile, seed_d, rig=config.rig, params=config.render,
            frame_rate=plan.frame_rate, rws_rate=plan.rws_rate,
            label_noise_sd=plan.label_noise_sd)
        samples = pipeline.assemble_samples(recording, drive_id=f"d{d:03d}")
        all_samples.extend(samples)
        print(f"drive d{d:03d} [{profile.name}]: {len(samples)} samples")
    dest = config.root / "unsplit"
    pipeline.save_split(all_samples, dest)
    print(f"wrote {len(all_samples)} samples from {plan.n_drives} drives to {dest}")
    return 0


def cmd_split(config: RunConfig, args) -> int:
    if config.split is None:
        raise ConfigError("missing config key split.centers")
    rows = pipeline.read_manifest(config.root / "unsplit")
    positions = {sid: (px, py) for sid, _, px, py in rows}
    assignment = pipeline.geofence_split(
        positions, config.split.centers, config.split.radius,
        buffer=config.split.buffer,
        val_test_assignment=list(config.split.assignments))
    pipeline.apply_split(config.root, assignment)
    counts = assignment.counts()
    print("split counts: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_train(config: RunConfig, args) -> int:
    out = _out_dir(config, args, "train")
    train_samples = _load_set(config, "train")
    val_samples = _load_set(config, "val")
    result = training.train(train_samples, val_samples, config.model,
                            config.train, out)
    last = result.log_rows[-1]
    print(f"epoch {last[0]}: train_loss={last[1]:.6f} val_loss={last[2]:.6f} "
          f"val_rmse={last[3]:.6f}")
    print(f"best val_loss {result.best_val_loss:.6f} at epoch {result.best_epoch}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    return 0


def cmd_eval(config: RunConfig, args) -> int:
    out = _out_dir(config, args, "eval")
    reports = []
    for set_name in config.eval.sets:
        samples = _load_set(config, set_name)
        if args.checkpoint == "oracle":
            report = evaluation.report_from_frames(
                samples, evaluation.oracle_frames(samples),
                config.model.modalities, set_name=set_name,
                checkpoint_id="oracle")
        else:
            outputs, modalities = _outputs_for(args.checkpoint, samples, config)
            if getattr(args, "modalities", None):
                wanted = tuple(m.strip() for m in args.modalities.split(","))
                if set(wanted) != set(modalities):
                    raise ConfigError(
                        f"checkpoint expects modalities {modalities}, flag gave {wanted}")
            report = evaluation.report_from_outputs(
                samples, outputs, modalities, set_name=set_name,
                checkpoint_id=args.checkpoint)
        reports.append(report)
        skipped = f" ({report.n_skipped} unlabeled frames skipped)" if report.n_skipped else ""
        print(f"set={set_name} n_frames={report.n_frames} "
              f"grip_mean={report.grip_mean:.4f} grip_sd={report.grip_sd:.4f} "
              f"rmse={report.rmse:.6f}{skipped}")
    path = evaluation.write_report_csv(reports, out / "eval.csv")
    print(f"report: {path}")
    return 0


def cmd_ablate(config: RunConfig, args) -> int:
    out = _out_dir(config, args, "ablate")
    plan = (evaluation.AblationPlan(subsets=config.eval.subsets)
            if config.eval.subsets else evaluation.AblationPlan.full())
    train_samples = _load_set(config, "train")
    val_samples = _load_set(config, "val")
    eval_sets = {name: _load_set(config, name) for name in config.eval.sets}
    median = evaluation.run_ablation(
        plan, train_samples, val_samples, eval_sets, config.model,
        config.train, out, seeds=config.eval.seeds)
    for (tag, set_name), rmse in sorted(median.items()):
        print(f"{tag} on {set_name}: median rmse {rmse:.6f}")
    print(f"table: {out / 'ablation.csv'}")
    return 0


def _find_samples(config: RunConfig, ids: list[str]) -> list[pipeline.Sample]:
    manifests = {}
    for split in SPLIT_SEARCH_ORDER:
        path = config.root / split / "manifest.csv"
        if path.exists():
            for sid, ft, px, py in pipeline.read_manifest(config.root / split):
                manifests.setdefault(sid, (split, ft, px, py))
    samples = []
    for sid in ids:
        if sid not in manifests:
            raise ConfigError(f"sample id {sid!r} not found in any split manifest")
        split, ft, px, py = manifests[sid]
        samples.append(pipeline.read_sample(
            config.root / split / sid, sample_id=sid, frame_time=ft,
            position=(px, py)))
    return samples


def _default_ids(config: RunConfig, count: int = 4) -> list[str]:
    for split in SPLIT_SEARCH_ORDER:
        path = config.root / split / "manifest.csv"
        if path.exists():
            rows = pipeline.read_manifest(config.root / split)
            if rows:
                return [sid for sid, *_ in rows[:count]]
    raise ConfigError(f"no samples found under {config.root}")


def cmd_visualize(config: RunConfig, args) -> int:
    out = _out_dir(config, args, "visualize")
    ids = ([part.strip() for part in args.ids.split(",") if part.strip()]
           if args.ids else _default_ids(config))
    samples = _find_samples(config, ids)
    outputs, _ = _outputs_for(args.checkpoint, samples, config)
    for sample, output in zip(samples, outputs):
        path = evaluation.overlay_emit(sample, output.grip,
                                       out / f"{sample.id}_overlay.png")
        print(f"overlay: {path}")
    return 0


def cmd_scatter(config: RunConfig, args) -> int:
    out = _out_dir(config, args, "scatter")
    samples = []
    for set_name in config.eval.sets:
        samples.extend(_load_set(config, set_name))
    if args.checkpoint == "oracle":
        truths, preds = evaluation.oracle_label_pairs(samples)
    else:
        outputs, _ = _outputs_for(args.checkpoint, samples, config)
        truths, preds = evaluation.collect_label_pairs(samples, outputs)
    path = evaluation.scatter_export(
        truths, preds, out / "scatter.csv", n=config.eval.scatter_n,
        seed=config.eval.scatter_seed, replace=config.eval.scatter_replace)
    print(f"scatter: {path} ({truths.shape[0]} labels in population)")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "visualize": cmd_visualize,
    "scatter": cmd_scatter,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, seed=args.seed,
                             modalities=tuple(
                                 m.strip() for m in args.modalities.split(","))
                             if getattr(args, "modalities", None) else None)
        return COMMANDS[args.command](config, args)
    except (GripmapError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
