"""Command-line surface tying the pipeline together.

Subcommands: gen-data, train-flow, train-texture, train-joint, sample, eval,
baseline-warp. Every run resolves its full effective configuration (config
file merged with defaults and flag overrides) and writes it to
``run_manifest.json`` in the output directory, so any run can be replayed
exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from . import core, evaluation, fileio, synthdata, training
from .networks import ArchConfig, from_torch, restore_networks, to_torch
from .synthdata import ClipDataset, DatasetConfig
from .training import StageMismatchError, TrainConfig, TrainingDiverged


def _dataclass_kwargs(cls, flat: dict, used: set):
    names = {f.name for f in fields(cls)}
    out = {}
    for key, value in flat.items():
        if key in names:
            if isinstance(value, list):
                value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
            out[key] = value
            used.add(key)
    return out


def resolve_configs(config_path, seed_override=None, stage=None):
    """Split a flat config file into (DatasetConfig, ArchConfig, TrainConfig kwargs)."""
    flat = fileio.read_config(config_path) if config_path else {}
    used = set()
    data_kwargs = _dataclass_kwargs(DatasetConfig, flat, used)
    arch_kwargs = _dataclass_kwargs(ArchConfig, flat, used)
    train_kwargs = _dataclass_kwargs(TrainConfig, flat, used)
    unknown = set(flat) - used
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if stage is not None:
        declared = train_kwargs.get("stage")
        if declared is not None and declared != stage:
            raise ValueError(f"config declares stage {declared!r} but the command trains {stage!r}")
        train_kwargs["stage"] = stage
    if seed_override is not None:
        train_kwargs["seed"] = seed_override
    return data_kwargs, arch_kwargs, train_kwargs


def _effective(dataset_cfg=None, arch=None, train_cfg=None, **extra):
    out = dict(extra)
    if dataset_cfg is not None:
        out["dataset"] = asdict(dataset_cfg)
    if arch is not None:
        out["arch"] = arch.to_dict()
    if train_cfg is not None:
        out["train"] = asdict(train_cfg)
    return out


def cmd_gen_data(args):
    data_kwargs, _, _ = resolve_configs(args.config)
    cfg = DatasetConfig(**data_kwargs)
    seed = args.seed if args.seed is not None else 0
    fileio.write_run_manifest(args.out, "gen-data", _effective(dataset_cfg=cfg, seed=seed))
    manifest = synthdata.make_dataset(cfg, seed, args.out)
    print(f"wrote dataset manifest {manifest} ({cfg.n_classes * cfg.clips_per_class} clips)")
    return 0


def _train_command(args, stage):
    _, arch_kwargs, train_kwargs = resolve_configs(args.config, args.seed, stage)
    train_kwargs.setdefault("total_iters", 70)
    arch = ArchConfig(**arch_kwargs)
    cfg = TrainConfig(**train_kwargs)
    dataset = ClipDataset(args.data)
    fileio.write_run_manifest(args.out, f"train-{stage}", _effective(arch=arch, train_cfg=cfg, data=str(args.data)))
    flow_init = getattr(args, "flow_checkpoint", None)
    texture_init = getattr(args, "texture_checkpoint", None)
    result = training.train_stage(stage, dataset, cfg, arch=arch, out_dir=args.out,
                                  flow_init=flow_init, texture_init=texture_init)
    last = next(rec for rec in reversed(result.log) if "L_D" in rec)
    print(f"stage {stage}: {cfg.total_iters} iterations, final L_D={last['L_D']:.4f} "
          f"L_G={last['L_G']:.4f}; checkpoint {result.checkpoint_path}")
    return 0


def cmd_train_flow(args):
    return _train_command(args, "flow")


def cmd_train_texture(args):
    return _train_command(args, "texture")


def cmd_train_joint(args):
    return _train_command(args, "joint")


def _load_networks(args, names):
    ckpts = []
    if getattr(args, "checkpoint", None):
        ckpts.append(fileio.load_checkpoint(args.checkpoint))
    if getattr(args, "flow_checkpoint", None):
        ckpts.append(fileio.load_checkpoint(args.flow_checkpoint))
    if getattr(args, "texture_checkpoint", None):
        ckpts.append(fileio.load_checkpoint(args.texture_checkpoint))
    nets = {}
    for ckpt in ckpts:
        have = {k.split(".", 1)[0] for k in ckpt.tensors}
        nets.update(restore_networks(ckpt, names=[n for n in names if n in have and n not in nets]))
    missing = [n for n in names if n not in nets]
    if missing:
        raise ValueError(f"no checkpoint provides {missing}; pass --checkpoint or the per-stage checkpoints")
    for net in nets.values():
        net.eval()
    return nets


def cmd_sample(args):
    seed = args.seed if args.seed is not None else 0
    use_flow_file = args.flow_from != "checkpoint"
    names = ["texture_generator"] + ([] if use_flow_file else ["flow_generator"])
    nets = _load_networks(args, names)
    arch = nets["texture_generator"].arch
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_run_manifest(out, "sample", _effective(
        arch=arch, seed=seed, n=args.n, flow_from=args.flow_from))

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    z_flow = torch.from_numpy(rng.standard_normal((args.n, arch.latent_dim)).astype(np.float32))
    z_tex = torch.from_numpy(rng.standard_normal((args.n, arch.latent_dim)).astype(np.float32))

    with torch.no_grad():
        if use_flow_file:
            flow_np, _ = fileio.load_clip(args.flow_from)
            flow_np = evaluation.center_crop(flow_np.astype(np.float32), arch.video_shape[1:])
            flows = to_torch(flow_np)[None].expand(args.n, -1, -1, -1, -1)
        else:
            flows, _ = nets["flow_generator"](z_flow)
        videos, _, _ = nets["texture_generator"](z_tex, flows)

    videos_np = from_torch(videos)
    flows_np = from_torch(flows)
    for i in range(args.n):
        fileio.save_clip(out / f"sample_{i:03d}_video.ftc", videos_np[i].astype(np.float32))
        fileio.save_clip(out / f"sample_{i:03d}_flow.ftc", flows_np[i].astype(np.float32))
        if args.gif:
            fileio.export_gif(videos_np[i], out / f"sample_{i:03d}.gif")
        if args.panel:
            fileio.export_panel(videos_np[i], flows_np[i], out / f"sample_{i:03d}_panel.png")
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_eval(args):
    nets = _load_networks(args, ["flow_discriminator", "texture_discriminator"])
    dataset = ClipDataset(args.data)
    out = Path(args.out)
    fileio.write_run_manifest(out, "eval", _effective(
        data=str(args.data), split_seed=args.split_seed,
        seed=args.seed if args.seed is not None else 0))
    report = evaluation.evaluate_representation(
        dataset, nets["flow_discriminator"], nets["texture_discriminator"],
        split_seed=args.split_seed, clf_seed=args.seed if args.seed is not None else 0)
    path = evaluation.write_report(report, out)
    print(f"flow {report.flow_accuracy:.3f}  texture {report.texture_accuracy:.3f}  "
          f"fused {report.fused_accuracy:.3f}  chance {report.chance:.3f}  -> {path}")
    return 0


def cmd_baseline_warp(args):
    dataset = ClipDataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_run_manifest(out, "baseline-warp", _effective(
        data=str(args.data), clips=args.clips))
    n = min(args.clips, len(dataset))
    rows = []
    for i in range(n):
        s = dataset.sample(i)
        warped = core.warp_video(s.video[0], s.flow)
        per_frame = np.abs(warped.astype(np.float64) - s.video.astype(np.float64)).mean(axis=(1, 2, 3))
        rows.append(per_frame)
        if args.panel:
            fileio.export_panel(warped, s.flow, out / f"warp_{i:03d}_panel.png")
    errors = np.stack(rows)
    with open(out / "warp_errors.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["clip"] + [f"frame_{t}" for t in range(errors.shape[1])])
        for i, row in enumerate(errors):
            writer.writerow([i] + [f"{e:.6f}" for e in row])
    summary = {"clips": int(n),
               "mean_final_frame_error": float(errors[:, -1].mean()),
               "mean_error": float(errors.mean())}
    fileio.atomic_write_text(out / "warp_summary.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"warping baseline over {n} clips: mean error {summary['mean_error']:.4f}, "
          f"final frame {summary['mean_final_frame_error']:.4f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="flowtex",
                                     description="Two-stage flow/texture adversarial video generation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="flat JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("gen-data", help="synthesize a labeled moving-shapes dataset")
    common(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_gen_data)

    for stage, fn in (("flow", cmd_train_flow), ("texture", cmd_train_texture)):
        p = sub.add_parser(f"train-{stage}", help=f"train the {stage} generator/discriminator pair")
        common(p)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        p.set_defaults(fn=fn)

    p = sub.add_parser("train-joint", help="joint fine-tuning from pretrained checkpoints")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--flow-checkpoint", type=Path, required=True)
    p.add_argument("--texture-checkpoint", type=Path, required=True)
    p.set_defaults(fn=cmd_train_joint)

    p = sub.add_parser("sample", help="generate clips from latent seeds")
    common(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="joint checkpoint with all networks")
    p.add_argument("--flow-checkpoint", type=Path, default=None)
    p.add_argument("--texture-checkpoint", type=Path, default=None)
    p.add_argument("--flow-from", default="checkpoint",
                   help="'checkpoint' to generate flow, or a clip file with ground-truth flow")
    p.add_argument("-n", type=int, default=4, help="number of clips")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--gif", action="store_true")
    p.add_argument("--panel", action="store_true")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="discriminator-feature probe and report")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--flow-checkpoint", type=Path, default=None)
    p.add_argument("--texture-checkpoint", type=Path, default=None)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("baseline-warp", help="first-frame warping baseline comparison")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--clips", type=int, default=8)
    p.add_argument("--panel", action="store_true")
    p.set_defaults(fn=cmd_baseline_warp)
    return parser


_ERROR_CATEGORIES = (
    (StageMismatchError, "stage-mismatch"),
    (TrainingDiverged, "diverged"),
    (fileio.VersionError, "version"),
    (fileio.IntegrityError, "integrity"),
    (fileio.FileFormatError, "format"),
    (fileio.UnknownTensorError, "unknown-tensor"),
    (synthdata.SceneSpecError, "scene-spec"),
    (core.ShapeError, "shape"),
    (FileNotFoundError, "missing-file"),
    (ValueError, "config"),
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except tuple(e for e, _ in _ERROR_CATEGORIES) as exc:
        category = next(cat for cls, cat in _ERROR_CATEGORIES if isinstance(exc, cls))
        print(f"error[{category}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
