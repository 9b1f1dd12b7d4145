"""Command-line entry point: generate | train | ablate | bench | invert | metrics.

Heavy imports happen inside the command handlers so that the CONDVID_THREADS
cap can be applied to the BLAS thread pools before numpy is first loaded.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import RunConfig


class CliError(RuntimeError):
    pass


def _apply_thread_cap():
    cap = os.environ.get("CONDVID_THREADS")
    if cap is None:
        return
    try:
        n = int(cap)
    except ValueError:
        raise CliError(f"CONDVID_THREADS must be an integer, got {cap!r}")
    n = 1 if n == 0 else n  # 0 = deterministic single-thread mode
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise CliError(f"--config {path}: file not found")
    try:
        return RunConfig.load(path)
    except (ValueError, TypeError) as e:
        raise CliError(f"--config {path}: {e}")


def _write_manifest(out_dir, command, cfg: RunConfig, extra: dict):
    manifest = {"command": command, "config": cfg.to_dict(), "config_hash": cfg.hash(),
                "argv": sys.argv[1:]}
    manifest.update(extra)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def _model_config(cfg: RunConfig):
    from .network import ModelConfig
    d = dict(cfg.model.__dict__)
    d["channels"] = tuple(d["channels"])
    return ModelConfig(**d)


def _schedule(cfg: RunConfig):
    from .schedule import make_linear_schedule
    return make_linear_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)


def _load_models(ckpt_dir, cfg: RunConfig):
    from .network import (ControlBranch, ImageModel, LatentCodec, ModelConfig,
                          load_checkpoint)
    from .sampler import ModelSet
    manifest, states = load_checkpoint(ckpt_dir)
    model_cfg = ModelConfig.from_dict(manifest["config"]["model"])
    unet = ImageModel(model_cfg, seed=0)
    unet.load_state(states["unet"])
    branch = ControlBranch(model_cfg, seed=1)
    branch.load_state(states["control"])
    codec = LatentCodec(model_cfg.patch, model_cfg.latent_channels)
    return ModelSet(unet=unet, branch=branch, codec=codec), model_cfg


def _synthetic_condition(cfg: RunConfig, model_cfg, frames, seed):
    from .lab import SceneConfig, gen_moving_shapes
    from .numerics import SeededRng
    scene_cfg = SceneConfig(size=model_cfg.image_size, frames=frames)
    return gen_moving_shapes(1, scene_cfg, SeededRng(seed))[0]


def cmd_train(args) -> int:
    from .lab import (SceneConfig, TrainConfig, gen_moving_shapes, load_scenes,
                      save_scenes, train_control_branch, train_image_denoiser)
    from .network import save_checkpoint
    from .numerics import SeededRng

    cfg = _load_config(args.config)
    model_cfg = _model_config(cfg)
    sched = _schedule(cfg)
    if args.data:
        scenes = load_scenes(args.data)
    else:
        scene_cfg = SceneConfig(size=cfg.data.size, frames=cfg.data.frames)
        scenes = gen_moving_shapes(cfg.data.scenes, scene_cfg, SeededRng(cfg.data.seed))
    if args.save_data:
        save_scenes(args.save_data, scenes)

    tci = TrainConfig(**cfg.train_image.__dict__)
    print(f"training 2D denoiser: {tci.steps} steps on {len(scenes)} scenes")
    unet, losses_i = train_image_denoiser(scenes, model_cfg, tci, sched,
                                          log_every=args.log_every)
    tcc = TrainConfig(**cfg.train_control.__dict__)
    print(f"training control branch: {tcc.steps} steps")
    branch, losses_c = train_control_branch(scenes, unet, tcc, sched,
                                            log_every=args.log_every)
    save_checkpoint(args.out, {"unet": unet, "control": branch}, cfg.to_dict())
    _write_manifest(args.out, "train", cfg, {
        "seeds": {"data": cfg.data.seed, "train_image": tci.seed, "train_control": tcc.seed},
        "final_loss_image": losses_i[-1], "final_loss_control": losses_c[-1]})
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_generate(args) -> int:
    import numpy as np

    from .fileio import read_frames, read_masks, write_frames
    from .metrics import condition_accuracy_iou, frame_consistency
    from .numerics import save_cvt1
    from .sampler import GenerationRequest, generate

    cfg = _load_config(args.config)
    s = cfg.sampling
    for name in ("seed_b", "seed_c", "steps", "text", "gap"):
        v = getattr(args, name)
        if v is not None:
            setattr(s, name, v)
    if args.guidance is not None:
        s.guidance_scale = args.guidance
    if args.background is not None:
        s.background = args.background
    if args.attention is not None:
        s.attention_mode = args.attention
    if args.control is not None:
        s.control = args.control

    models, model_cfg = _load_models(args.ckpt, cfg)

    masks_known = None
    if args.condition:
        masks = read_masks(args.condition)
        masks_known = masks > 127
        condition = (masks > 127).astype(np.float32)[..., None]
    else:
        scene = _synthetic_condition(cfg, model_cfg, s.frames, s.condition_seed)
        masks_known = scene.masks.astype(bool)
        condition = scene.masks[..., None].astype(np.float32)

    reference = None
    if s.background == "inverted":
        if not args.video:
            raise CliError("generate: --background inverted requires --video VIDEO_DIR")
        if not os.path.isdir(args.video):
            raise CliError(f"generate: --video {args.video}: directory not found")
        reference = read_frames(args.video).astype(np.float32) / 255.0

    req = GenerationRequest(
        condition=condition, text=s.text, reference_video=reference,
        seed_b=s.seed_b, seed_c=s.seed_c, steps=s.steps,
        guidance_scale=s.guidance_scale, attention_mode=s.attention_mode,
        gap=s.gap, background_mode=s.background, control_mode=s.control,
        eps_c_scale=s.eps_c_scale, invert_with_text=s.invert_with_text)
    res = generate(req, models, _schedule(cfg))

    paths = write_frames(args.out, res.frames)
    side = {"frame_consistency": frame_consistency(res.frames),
            "background_provenance": res.background.provenance}
    if masks_known is not None and masks_known.any():
        side["condition_iou"] = condition_accuracy_iou(res.frames, masks_known)
    with open(os.path.join(args.out, "metrics.json"), "w") as f:
        json.dump(side, f, indent=1, sort_keys=True)
    if args.dump_latents:
        save_cvt1(os.path.join(args.out, "latents.cvt1"), res.latents)
    _write_manifest(args.out, "generate", cfg, {
        "seeds": {"seed_b": s.seed_b, "seed_c": s.seed_c, "condition": s.condition_seed},
        "frames_written": len(paths)})
    print(f"wrote {len(paths)} frames to {args.out} "
          f"(FC {side['frame_consistency']:.4f})")
    return 0


def cmd_invert(args) -> int:
    import numpy as np

    from .attention import FrameSamplingPlan
    from .fileio import read_frames
    from .numerics import save_cvt1
    from .sampler import invert_reference
    from .schedule import make_step_plan

    cfg = _load_config(args.config)
    if not os.path.isdir(args.video):
        raise CliError(f"invert: video directory {args.video} not found")
    frames = read_frames(args.video).astype(np.float32) / 255.0
    models, model_cfg = _load_models(args.ckpt, cfg)
    sched = _schedule(cfg)
    steps = args.steps or cfg.sampling.steps
    plan = FrameSamplingPlan(mode=cfg.sampling.attention_mode, frames=frames.shape[0],
                             gap=cfg.sampling.gap)
    z_inv = invert_reference(frames, models, sched, make_step_plan(sched.T, steps), plan)
    os.makedirs(args.out, exist_ok=True)
    save_cvt1(os.path.join(args.out, "z_inv.cvt1"), z_inv)
    _write_manifest(args.out, "invert", cfg, {"video": args.video, "steps": steps})
    print(f"inverted latent written to {os.path.join(args.out, 'z_inv.cvt1')}")
    return 0


def cmd_bench(args) -> int:
    from .attention import MODES, run_cost_benchmark, write_benchmark_csv

    modes = MODES if args.modes == "all" else tuple(args.modes.split(","))
    for m in modes:
        if m not in MODES:
            raise CliError(f"bench: unknown mode {m!r} (choose from {', '.join(MODES)})")
    rows = run_cost_benchmark(modes=modes, F=args.frames, S=args.tokens, d=args.dim,
                              gap=args.gap, seed=args.seed, repeats=args.repeats)
    rows.sort(key=lambda r: r.kv_frames)
    write_benchmark_csv(args.out, rows)
    for r in rows:
        print(f"{r.mode:>14}: kv_frames={r.kv_frames:3d} flops={r.score_flops:.3e} "
              f"wall={r.wall_time_s:.3f}s")
    return 0


def cmd_ablate(args) -> int:
    from .lab import SceneConfig, gen_moving_shapes
    from .metrics import ablation_csv, ablation_table, run_ablation
    from .numerics import SeededRng

    cfg = _load_config(args.config)
    models, model_cfg = _load_models(args.ckpt, cfg)
    ab = cfg.ablation
    scene_cfg = SceneConfig(size=model_cfg.image_size, frames=cfg.sampling.frames)
    conditions = gen_moving_shapes(ab.conditions, scene_cfg, SeededRng(ab.condition_seed))
    progress = None
    if args.verbose:
        progress = lambda m, c, s, fc, iou: print(
            f"  {m}/{c} seed={s}: FC={fc:.4f} IoU={iou:.4f}")
    reports = run_ablation(models, _schedule(cfg), conditions, ab.seeds,
                           tuple(ab.attention_modes), tuple(ab.control_modes),
                           steps=ab.steps, guidance=ab.guidance,
                           gap=cfg.sampling.gap, progress=progress)
    os.makedirs(args.out, exist_ok=True)
    ablation_csv(os.path.join(args.out, "ablation.csv"), reports)
    table = ablation_table(reports)
    with open(os.path.join(args.out, "ablation.txt"), "w") as f:
        f.write(table + "\n")
    _write_manifest(args.out, "ablate", cfg, {"seeds": list(ab.seeds)})
    print(table)
    return 0


def cmd_metrics(args) -> int:
    from .fileio import read_frames, read_masks
    from .metrics import condition_accuracy_iou, frame_consistency

    frames = read_frames(args.frames)
    out = {"frame_consistency": frame_consistency(frames)}
    if args.masks:
        masks = read_masks(args.masks) > 127
        out["condition_iou"] = condition_accuracy_iou(frames, masks, args.threshold)
    for k, v in out.items():
        print(f"{k}: {v:.6f}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(out, f, indent=1, sort_keys=True)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="condvid",
                                description="desk-scale conditional video generation")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the toy 2D denoiser and control branch")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="load scenes from this directory instead of generating")
    t.add_argument("--save-data", help="also write the generated dataset here")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    g = sub.add_parser("generate", help="run the sampling pipeline")
    g.add_argument("--config")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--condition", help="directory of mask_*.pgm condition frames")
    g.add_argument("--video", help="reference video directory (frame_*.ppm)")
    g.add_argument("--background", choices=["noise", "inverted"])
    g.add_argument("--attention", choices=["self", "sparse_causal", "sbist", "dense"])
    g.add_argument("--control", choices=["2d", "3d", "off"])
    g.add_argument("--seed-b", dest="seed_b", type=int)
    g.add_argument("--seed-c", dest="seed_c", type=int)
    g.add_argument("--steps", type=int)
    g.add_argument("--gap", type=int)
    g.add_argument("--guidance", type=float)
    g.add_argument("--text")
    g.add_argument("--dump-latents", action="store_true")
    g.set_defaults(fn=cmd_generate)

    i = sub.add_parser("invert", help="DDIM-invert a reference video to a latent code")
    i.add_argument("video")
    i.add_argument("--config")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--steps", type=int)
    i.set_defaults(fn=cmd_invert)

    b = sub.add_parser("bench", help="benchmark attention variants")
    b.add_argument("--frames", type=int, default=24)
    b.add_argument("--tokens", type=int, default=4096)
    b.add_argument("--dim", type=int, default=4)
    b.add_argument("--gap", type=int, default=3)
    b.add_argument("--modes", default="all")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--repeats", type=int, default=1)
    b.add_argument("--out", default="bench.csv")
    b.set_defaults(fn=cmd_bench)

    a = sub.add_parser("ablate", help="run the ablation grid")
    a.add_argument("--config")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--verbose", action="store_true")
    a.set_defaults(fn=cmd_ablate)

    m = sub.add_parser("metrics", help="compute metrics for a frame directory")
    m.add_argument("--frames", required=True)
    m.add_argument("--masks")
    m.add_argument("--threshold", type=float, default=0.25)
    m.add_argument("--out")
    m.set_defaults(fn=cmd_metrics)
    return p


def main(argv=None) -> int:
    try:
        _apply_thread_cap()
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
