"""``vp2p`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error (bad flags, bad config), 2 runtime
failure.  The seed comes from ``--seed``, else ``$VP2P_SEED``, else the
config file.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .denoiser import load_model, save_model
from .inversion import save_nulls
from .metrics import masked_psnr, osv_proxy, psnr
from .pipeline import (ABLATION_ARMS, RunConfig, baseline_edit, build_report, edit_loop,
                       finetune_t2s, prepare_source, run_ablation)
from .scenegen import RegionMask, SceneSpec, reference_scene, render_scene
from .text import embed_prompt, tokenize

SEED_ENV = "VP2P_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# -- shared helpers ------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    """Config file, then ``$VP2P_SEED``, then ``--seed``; later wins."""
    config = RunConfig()
    if getattr(args, "config", None):
        config = io.load_config(args.config, RunConfig)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            config = replace(config, seed=int(env))
        except ValueError:
            raise io.ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config


def _load_inputs(args):
    """``(video, object_mask or None, source prompt)``; the reference scene by default."""
    if args.video is None:
        video, mask, prompt = reference_scene()
        return video, mask, args.src or prompt.raw
    video = io.read_tensor(args.video)
    mask = RegionMask(io.read_tensor(args.mask) > 0.5) if args.mask else None
    if not args.src:
        raise UsageError("--src is required when --video is given")
    return video, mask, args.src


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _add_inputs(p, dst: bool = False):
    p.add_argument("--video", help="input clip (tensor file); default: the reference scene")
    p.add_argument("--mask", help="object mask tensor for masked metrics")
    p.add_argument("--src", help="source prompt")
    if dst:
        p.add_argument("--dst", required=True, help="target prompt")
    p.add_argument("--config", help="key=value run config")
    p.add_argument("--seed", type=int, help=f"overrides ${SEED_ENV} and the config")
    p.add_argument("--out", required=True, help="output directory")


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SceneSpec(shape=args.shape, color=args.color, background=args.background,
                     velocity=tuple(args.velocity), frames=args.frames)
    video, mask, prompt = render_scene(spec, args.seed)
    out = _out_dir(args.out)
    io.write_tensor(out / "video.vp2p", video)
    io.write_tensor(out / "mask.vp2p", mask.masks.astype(np.float64))
    (out / "prompt.txt").write_text(prompt.raw + "\n")
    io.write_clip_images(out / "frames", video, "frame")
    print(f"wrote {out} ({prompt.raw!r})")
    return 0


def cmd_finetune(args) -> int:
    config = resolve_config(args)
    video, _, src = _load_inputs(args)
    sched = config.schedule()
    cond = embed_prompt(tokenize(src), config.text_seed())
    model, losses = finetune_t2s(config.initial_model(), video, cond, config.finetune_steps,
                                 config.finetune_lr, sched, config.seed)
    out = _out_dir(args.out)
    save_model(out / "model.vp2m", model)
    _write_json(out / "finetune.json", {"losses": losses, "artifacts": {"model": "model.vp2m"}})
    print(f"fine-tuned {config.finetune_steps} steps, final loss {losses[-1] if losses else float('nan'):.5f}")
    return 0


def _prepare(args, config, video, src):
    if getattr(args, "model", None):
        model = load_model(args.model)
        return prepare_source(video, src, replace(config, finetune_steps=0), model=model)
    return prepare_source(video, src, config)


def cmd_invert(args) -> int:
    config = resolve_config(args)
    video, mask, src = _load_inputs(args)
    prep = _prepare(args, config, video, src)
    out = _out_dir(args.out)
    artifacts = {"latent_T": "latent_T.vp2p", "reconstruction": "reconstruction.vp2p",
                 "nulls": "nulls.vp2n", "video": "video.vp2p"}
    io.write_tensor(out / artifacts["latent_T"], prep.trajectory[prep.sched.T])
    io.write_tensor(out / artifacts["reconstruction"], prep.reconstruction)
    io.write_tensor(out / artifacts["video"], prep.video)
    save_nulls(out / artifacts["nulls"], prep.nulls)
    report = build_report(prep, prep.config, "", prep.timings)
    report["artifacts"] = artifacts
    _write_json(out / "report.json", report)
    print(f"reconstruction PSNR {report['metrics']['reconstruction_psnr']:.4f} dB")
    return 0


def cmd_edit(args) -> int:
    config = resolve_config(args)
    video, mask, src = _load_inputs(args)
    prep = _prepare(args, config, video, src)
    result = edit_loop(prep, args.dst, config)
    timings = dict(prep.timings)
    out = _out_dir(args.out)
    artifacts = {"reconstruction": "reconstruction.vp2p", "edited": "edited.vp2p",
                 "final_mask": "final_mask.vp2p"}
    io.write_tensor(out / artifacts["reconstruction"], result.reconstruction)
    io.write_tensor(out / artifacts["edited"], result.edited)
    io.write_tensor(out / artifacts["final_mask"], result.masks[-1].astype(np.float64))
    frames = io.write_clip_images(out / "frames", result.reconstruction, "reconstruction")
    frames += io.write_clip_images(out / "frames", result.edited, "edited")
    artifacts.update({f"frame_{name[:-4]}": f"frames/{name}" for name in frames})
    report = build_report(prep, config, args.dst, timings, result, mask)
    report["artifacts"] = artifacts
    _write_json(out / "report.json", report)
    print(f"edited {src!r} -> {args.dst!r}; report at {out / 'report.json'}")
    return 0


def cmd_baseline(args) -> int:
    config = resolve_config(args)
    video, mask, src = _load_inputs(args)
    edited = baseline_edit(video, src, args.dst, config)
    out = _out_dir(args.out)
    io.write_tensor(out / "baseline.vp2p", edited)
    names = io.write_clip_images(out / "frames", edited, "baseline")
    report = {"prompts": {"source": src, "target": args.dst},
              "artifacts": {"baseline": "baseline.vp2p", **{n[:-4]: f"frames/{n}" for n in names}}}
    if mask is not None:
        report["masked_psnr_edit"] = masked_psnr(edited, video, mask)
    _write_json(out / "report.json", report)
    return 0


def cmd_metrics(args) -> int:
    a, b = io.read_tensor(args.a), io.read_tensor(args.b)
    result = {"psnr": psnr(a, b, peak=args.peak)}
    if args.mask:
        mask = RegionMask(io.read_tensor(args.mask) > 0.5)
        result["masked_psnr"] = masked_psnr(a, b, mask, peak=args.peak)
        result["osv_proxy_a"] = osv_proxy(a, mask)
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_ablate(args) -> int:
    config = resolve_config(args)
    video, mask, src = _load_inputs(args)
    arms = args.arms.split(",") if args.arms else list(ABLATION_ARMS)
    unknown = [a for a in arms if a not in ABLATION_ARMS]
    if unknown:
        raise UsageError(f"unknown arms {unknown}; choose from {', '.join(ABLATION_ARMS)}")
    rows = run_ablation(video, src, args.dst, config, mask, arms=arms, jobs=args.jobs)
    out = _out_dir(args.out)
    _write_json(out / "ablation.json", {"config": {k: getattr(config, k) for k in RunConfig.field_types()},
                                        "rows": rows})
    lines = [f"{'arm':<18}{'recon PSNR':>12}{'masked PSNR':>13}{'null params':>13}"]
    for row in rows:
        mp = row.get("masked_psnr_edit")
        lines.append(f"{row['arm']:<18}{row['reconstruction_psnr']:>12.3f}"
                     f"{'-' if mp is None else f'{mp:.3f}':>13}{row['null_embeddings']:>13}")
    table = "\n".join(lines)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_export_attn(args) -> int:
    config = resolve_config(args)
    video, _, src = _load_inputs(args)
    prep = _prepare(args, config, video, src)
    result = edit_loop(prep, args.dst, config)
    out = _out_dir(args.out)
    src_index = io.export_attention(out / "source", result.src_store, list(prep.src.words))
    dst_index = io.export_attention(out / "target", result.dst_store, list(tokenize(args.dst).words))
    print(f"wrote {src_index} and {dst_index}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vp2p", description="Toy video prompt-to-prompt editing.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic scene")
    p.add_argument("--shape", default="square")
    p.add_argument("--color", default="red")
    p.add_argument("--background", default="grass")
    p.add_argument("--velocity", type=int, nargs=2, default=(1, 0), metavar=("DX", "DY"))
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("finetune", help="fine-tune the video model on one clip")
    _add_inputs(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("invert", help="fine-tune, invert and fit unconditional embeddings")
    _add_inputs(p)
    p.add_argument("--model", help="already fine-tuned model checkpoint")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("edit", help="full attention-controlled edit")
    _add_inputs(p, dst=True)
    p.add_argument("--model", help="already fine-tuned model checkpoint")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("baseline", help="inversion plus plain guided denoising")
    _add_inputs(p, dst=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("metrics", help="PSNR and masked metrics between two tensors")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--mask")
    p.add_argument("--peak", type=float, default=2.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("ablate", help="ablation arms side by side")
    _add_inputs(p, dst=True)
    p.add_argument("--arms", help=f"comma list out of {','.join(ABLATION_ARMS)}")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-attn", help="dump cross-attention maps as images")
    _add_inputs(p, dst=True)
    p.add_argument("--model", help="already fine-tuned model checkpoint")
    p.set_defaults(func=cmd_export_attn)
    return parser


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except io.ConfigError as exc:
        print(f"vp2p: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure of a stage
        print(f"vp2p: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
