"""Command-line entry point: synth, train, track, eval, ablate-steps,
ablate-memory, and info subcommands."""

from __future__ import annotations

import argparse
import itertools
import os
import sys

import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import metrics as metrics_mod
from . import trainer as trainer_mod
from . import tracker as tracker_mod
from .model import build_model, flops_estimate, load_checkpoint, load_model, save_checkpoint


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="flat KEY=VALUE config file")
    p.add_argument("--preset", default=None, choices=sorted(config_mod.PRESETS),
                   help="named model preset applied before the config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a single config key")


def _load_config(args) -> dict:
    return config_mod.parse_config(path=args.config, overrides=args.overrides,
                                   preset=args.preset)


def _load_sequences(data_dir: str, in_memory: bool = False) -> list:
    if not data_dir:
        raise ValueError("no dataset directory configured (data.dir)")
    seqs = [data_mod.load_sequence(p) for p in data_mod.list_sequences(data_dir)]
    if in_memory:
        for seq in seqs:
            seq.materialize()
    return seqs


def cmd_synth(args) -> int:
    data_mod.generate_dataset(args.out, args.videos, args.frames, args.seed,
                              size=args.size, occluder_prob=args.occluder_prob)
    print(f"wrote {args.videos} sequences of {args.frames} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.data:
        cfg["data.dir"] = args.data
    sequences = _load_sequences(cfg["data.dir"], in_memory=True)
    if args.resume:
        model, ckpt_cfg = load_model(args.resume)
        for key in ckpt_cfg:  # model shape always comes from the checkpoint
            if key == "data.dir":
                continue
            if key.split(".")[0] in ("vit", "vocab", "refiner", "iounet") or key.startswith("data."):
                cfg[key] = ckpt_cfg[key]
    else:
        if args.stage != 1:
            raise ValueError(f"stage {args.stage} needs --resume with the previous checkpoint")
        model = build_model(cfg)
    stage_fn = {1: trainer_mod.train_stage1, 2: trainer_mod.train_stage2,
                3: trainer_mod.train_stage3}[args.stage]
    stage_fn(model, cfg, sequences)
    save_checkpoint(args.out, model, cfg, extra={"stage": args.stage})
    print(f"stage {args.stage} finished; checkpoint written to {args.out}")
    return 0


def _write_sequence_outputs(out_dir: str, name: str, result) -> None:
    os.makedirs(out_dir, exist_ok=True)
    data_mod.write_predictions(os.path.join(out_dir, f"{name}.txt"), result.boxes)
    data_mod.write_confidences(os.path.join(out_dir, f"{name}_confidence.txt"), result.s2)


def cmd_track(args) -> int:
    model, cfg = load_model(args.ckpt)
    config_mod.apply_overrides(cfg, args.overrides)
    tcfg = tracker_mod.TrackerConfig.from_flat(cfg, multi_pass=args.multi_pass,
                                               update_mode=args.update_mode)
    for seq_dir in data_mod.list_sequences(args.seq):
        seq = data_mod.load_sequence(seq_dir)
        result = tracker_mod.run_sequence(model, seq, tcfg)
        _write_sequence_outputs(args.out, seq.name, result)
        if args.overlay:
            overlay_dir = os.path.join(args.overlay, seq.name)
            os.makedirs(overlay_dir, exist_ok=True)
            for t in range(len(seq)):
                x, y, w, h = result.boxes[t]
                pred = data_mod.PixelBox(x, y, w, h, *seq.frame_size[::-1])
                img = tracker_mod.draw_overlay(seq.frame(t), pred, seq.pixel_box(t))
                img.save(os.path.join(overlay_dir, "%08d.png" % t))
        print(f"tracked {seq.name}: {len(seq)} frames")
    return 0


def cmd_eval(args) -> int:
    gt_dirs = data_mod.list_sequences(args.gt)
    named_preds, named_gts, absents = {}, {}, {}
    for seq_dir in gt_dirs:
        name = os.path.basename(os.path.normpath(seq_dir))
        pred_path = os.path.join(args.pred, f"{name}.txt")
        if not os.path.exists(pred_path):
            raise ValueError(f"missing prediction file {pred_path}")
        named_preds[name] = data_mod.read_annotations(pred_path)
        named_gts[name] = data_mod.read_annotations(os.path.join(seq_dir, data_mod.ANNOTATION_NAME))
        absence_path = os.path.join(seq_dir, data_mod.ABSENCE_NAME)
        if os.path.exists(absence_path):
            with open(absence_path, "r", encoding="ascii") as fh:
                absents[name] = np.array([bool(int(l.strip())) for l in fh if l.strip()])
    report = metrics_mod.compute_report(named_preds, named_gts,
                                        absents=absents or None,
                                        absent_policy=args.absent_policy)
    csv_text = metrics_mod.report_to_csv(report, protocol=args.protocol)
    with open(args.report, "w", encoding="ascii") as fh:
        fh.write(csv_text)
    print(csv_text.splitlines()[1])
    return 0


def cmd_ablate_steps(args) -> int:
    model, cfg = load_model(args.ckpt)
    sequences = _load_sequences(args.data)
    tcfg = tracker_mod.TrackerConfig.from_flat(cfg, inject_noise_t=args.inject_noise_t)
    table = metrics_mod.step_ablation(model, sequences, tcfg)
    csv_text = metrics_mod.step_ablation_csv(table)
    with open(args.out, "w", encoding="ascii") as fh:
        fh.write(csv_text)
    print(csv_text, end="")
    return 0


def _parse_list(text: str, typ):
    return [typ(v) for v in text.split(",") if v]


def cmd_ablate_memory(args) -> int:
    model, cfg = load_model(args.ckpt)
    sequences = _load_sequences(args.data, in_memory=True)
    grid = itertools.product(_parse_list(args.visual_len, int),
                             _parse_list(args.traj_len, int),
                             _parse_list(args.sigma1, float),
                             _parse_list(args.sigma2, float))
    lines = ["visual_len,traj_len,sigma1,sigma2,auc"]
    for visual_len, traj_len, sigma1, sigma2 in grid:
        run_cfg = dict(cfg)
        run_cfg.update({"memory.visual_len": visual_len, "memory.traj_len": traj_len,
                        "memory.sigma1": sigma1, "memory.sigma2": sigma2})
        config_mod.validate_config(run_cfg)
        tcfg = tracker_mod.TrackerConfig.from_flat(run_cfg)
        preds, gts = [], []
        for seq in sequences:
            preds.append(tracker_mod.run_sequence(model, seq, tcfg).boxes)
            gts.append(seq.boxes)
        auc = metrics_mod.success_auc(preds, gts)
        lines.append(f"{visual_len},{traj_len},{sigma1},{sigma2},%.6f" % auc)
    text = "\n".join(lines) + "\n"
    with open(args.out, "w", encoding="ascii") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def cmd_info(args) -> int:
    cfg, params, _, extra = load_checkpoint(args.ckpt)
    model = build_model(cfg)
    model.load_state_arrays(params)
    print(config_mod.render_config(cfg), end="")
    if extra:
        print(f"stage: {extra.get('stage', '?')}")
    print(f"parameters: {model.param_count()}")
    macs = flops_estimate(cfg)
    print("forward multiply-accumulates: %.2fG (with %d templates, %d trajectory boxes)"
          % (macs / 1e9, cfg["memory.visual_len"], cfg["memory.traj_len"]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detrack",
                                     description="denoising-ViT box tracker")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic tracking dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--occluder-prob", type=float, default=0.0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    _add_config_args(p)
    p.add_argument("--data", default=None, help="dataset directory (else data.dir)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("track", help="track sequences with a checkpoint")
    p.add_argument("--seq", required=True, help="sequence dir or dataset dir")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--multi-pass", type=int, default=1)
    p.add_argument("--update-mode", choices=("gated", "direct"), default=None)
    p.add_argument("--overlay", default=None, help="write per-frame overlay images here")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_track)

    p = sub.add_parser("eval", help="score prediction files against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--protocol", choices=("got10k", "lasot"), default="got10k")
    p.add_argument("--report", required=True)
    p.add_argument("--absent-policy", choices=("zero", "exclude"), default="zero")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate-steps", help="per-denoising-block metric table")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--inject-noise-t", type=int, default=0)
    p.set_defaults(fn=cmd_ablate_steps)

    p = sub.add_parser("ablate-memory", help="sweep memory lengths and thresholds")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--visual-len", default="3")
    p.add_argument("--traj-len", default="7")
    p.add_argument("--sigma1", default="0.75")
    p.add_argument("--sigma2", default="0.9")
    p.set_defaults(fn=cmd_ablate_memory)

    p = sub.add_parser("info", help="describe a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=cmd_info)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # single-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
