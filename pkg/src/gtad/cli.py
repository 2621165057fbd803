"""Command-line harness: gen / train / eval / ablate / export.

Flags mirror PipelineConfig fields in kebab-case; ``--config FILE`` reads
key=value lines (the emitted ``config.echo`` is itself a valid config
file).  Precedence: defaults < config file < explicit flags.  A run
directory collects report.csv, per_class_iou.csv, bev_*.ppm, model.ckpt,
and config.echo.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .heads_losses import iou_csv
from .pipeline import (ABLATION_AXES, GtadModel, PipelineConfig, RunReport,
                       ablation_csv, build_bundles, config_from_mapping, evaluate,
                       export_bev_image, run_ablation, train)
from .numerics import Rng
from .scenegen import bundle_scene, generate_scene, load_scene, save_scene


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path, default=None,
                        help="key=value file of PipelineConfig overrides")
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar="V",
                            help=f"PipelineConfig.{f.name}")


def read_config_file(path: Path) -> dict[str, str]:
    overrides = {}
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SystemExit(f"bad config line (want key=value): {raw!r}")
        key, value = line.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def build_config(args) -> PipelineConfig:
    overrides: dict[str, str] = {}
    if getattr(args, "config", None):
        overrides.update(read_config_file(args.config))
    for f in fields(PipelineConfig):
        val = getattr(args, f"cfg_{f.name}", None)
        if val is not None:
            overrides[f.name] = val
    return config_from_mapping(overrides)


def write_config_echo(cfg: PipelineConfig, seed: int, path: Path):
    lines = [f"{k}={v.strip(chr(39))}" for k, v in sorted(cfg.echo().items())]
    path.write_text("\n".join(lines) + f"\n# seed={seed}\n", encoding="utf-8")


def _scene_paths(arg: str) -> list[Path]:
    p = Path(arg)
    if p.is_dir():
        found = sorted(p.glob("*.gtadscn"))
        if not found:
            raise SystemExit(f"no .gtadscn files under {p}")
        return found
    return [p]


def _load_bundles(arg: str):
    return [load_scene(p) for p in _scene_paths(arg)]


def _write_run_outputs(out: Path, cfg: PipelineConfig, seed: int, report: RunReport,
                       model: GtadModel | None, bundles):
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.csv")
    per_class = np.array(report.per_class_iou) if report.per_class_iou else np.zeros(1)
    (out / "per_class_iou.csv").write_text(iou_csv(per_class, report.miou),
                                           encoding="utf-8")
    write_config_echo(cfg, seed, out / "config.echo")
    if model is not None:
        model.save(out / "model.ckpt")
    if bundles:
        bundle = bundles[0]
        gt = bundle.frames[-1].gt_occupancy
        export_bev_image(gt, out / "bev_gt.ppm")
        if model is not None:
            from .numerics import autograd_off

            end = bundle.num_frames - 1
            frames = bundle.frames[end - cfg.history : end + 1]
            with autograd_off():
                vol = model.forward(frames, bundle.cameras, Rng(seed).child("export"))
            export_bev_image(vol.labels, out / "bev_pred.ppm")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root = Rng(args.seed)
    for i in range(args.scenes):
        scene_seed = int(root.child("scene", i).integers(0, 2**63 - 1))
        scene = generate_scene(cfg.scene_config(scene_seed))
        bundle = bundle_scene(scene, cfg.fine_spec)
        path = out / f"scene_{i:03d}.gtadscn"
        save_scene(bundle, path)
        print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    train_bundles = _load_bundles(args.scenes)
    eval_bundles = _load_bundles(args.eval_scenes) if args.eval_scenes else None
    model, report = train(cfg, args.seed, train_bundles, eval_bundles)
    _write_run_outputs(Path(args.out), cfg, args.seed, report, model,
                       eval_bundles or train_bundles)
    print(f"final loss {report.epoch_losses[-1]:.4f}  mIoU {report.miou:.4f}  "
          f"probe IoU {report.probe_iou:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = build_config(args)
    bundles = _load_bundles(args.scenes)
    model = GtadModel(cfg, Rng(args.seed).child("init"))
    model.load(args.ckpt)
    miou_v, miou_u, per_class, probe = evaluate(model, bundles, args.seed)
    report = RunReport(miou=miou_v, miou_union=miou_u,
                       per_class_iou=[float(v) for v in per_class],
                       probe_iou=probe, config_echo=cfg.echo(), seed=args.seed)
    _write_run_outputs(Path(args.out), cfg, args.seed, report, model, bundles)
    print(f"mIoU {miou_v:.4f}  probe IoU {probe:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    train_bundles = _load_bundles(args.scenes)
    eval_bundles = _load_bundles(args.eval_scenes) if args.eval_scenes else None
    rows, reports, extras = run_ablation(cfg, args.axis, args.seed,
                                         train_bundles, eval_bundles)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablation_{args.axis}.csv").write_text(ablation_csv(rows, reports),
                                                   encoding="utf-8")
    for (fname, label, row_cfg), rep in zip(rows, reports):
        row_dir = out / f"{args.axis}_{label}"
        row_dir.mkdir(exist_ok=True)
        rep.save(row_dir / "report.csv")
        write_config_echo(row_cfg, args.seed, row_dir / "config.echo")
    if extras:
        lines = [f"{k},{repr(v)}" for k, v in sorted(extras.items())]
        (out / "ablation_extras.csv").write_text("\n".join(lines) + "\n",
                                                 encoding="utf-8")
    print(f"wrote {out / f'ablation_{args.axis}.csv'} ({len(rows)} rows)")
    return 0


def cmd_export(args) -> int:
    cfg = build_config(args)
    bundle = load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frame = bundle.frames[args.frame if args.frame >= 0 else bundle.num_frames - 1]
    export_bev_image(frame.gt_occupancy, out / f"bev_gt_f{frame.index}.ppm", args.z_mode)
    if args.ckpt:
        model = GtadModel(cfg, Rng(args.seed).child("init"))
        model.load(args.ckpt)
        from .numerics import autograd_off

        end = frame.index
        if end < cfg.history:
            raise SystemExit(f"frame {end} has no {cfg.history}-frame history")
        frames = bundle.frames[end - cfg.history : end + 1]
        with autograd_off():
            vol = model.forward(frames, bundle.cameras, Rng(args.seed).child("export"))
        export_bev_image(vol.labels, out / f"bev_pred_f{frame.index}.ppm", args.z_mode)
    print(f"wrote BEV images under {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gtad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate synthetic scene files")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--scenes", type=int, default=4)
    p_gen.add_argument("--seed", type=int, required=True)
    _add_config_flags(p_gen)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train on scene files")
    p_train.add_argument("--scenes", required=True, help="scene file or directory")
    p_train.add_argument("--eval-scenes", default=None)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, required=True)
    _add_config_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--scenes", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--seed", type=int, default=0)
    _add_config_flags(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", help="run one ablation axis")
    p_abl.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p_abl.add_argument("--scenes", required=True)
    p_abl.add_argument("--eval-scenes", default=None)
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--seed", type=int, required=True)
    _add_config_flags(p_abl)
    p_abl.set_defaults(func=cmd_ablate)

    p_exp = sub.add_parser("export", help="write BEV label images")
    p_exp.add_argument("--scene", required=True)
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--ckpt", default=None)
    p_exp.add_argument("--frame", type=int, default=-1)
    p_exp.add_argument("--z-mode", default="top_down_argmax")
    p_exp.add_argument("--seed", type=int, default=0)
    _add_config_flags(p_exp)
    p_exp.set_defaults(func=cmd_export)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
