"""Command-line entry point: ``refvsr <command> [options]``.

Commands: gen-data, pretrain, adapt, infer, eval, selftest.  Training
commands read a ``key=value`` config file (``--config``) with ``--set
key=value`` overrides; the effective config is written next to every
checkpoint.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("refvsr")


def _config(args):
    from .config import load_config
    overrides = list(args.set or [])
    for key in ("data_dir", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    return load_config(args.config, overrides)


def cmd_gen_data(args) -> int:
    from .data import gen_dataset
    cfg = _config(args)
    if args.size:
        h, _, w = args.size.lower().partition("x")
        cfg = cfg.replace(height=int(h), width_px=int(w))
    clips = args.clips if args.clips is not None else cfg.clips
    frames = args.frames if args.frames is not None else cfg.frames
    motion = args.motion if args.motion is not None else cfg.motion
    out = Path(args.out or cfg.data_dir)
    try:
        paths = gen_dataset(out, clips, frames, (cfg.height, cfg.width_px), motion, cfg.seed)
    except OSError as exc:
        raise SystemExit(f"gen-data: cannot write to {out}: {exc}")
    print(f"wrote {len(paths)} clips of {frames} frames ({cfg.height}x{cfg.width_px}) to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from .train import train_stage
    cfg = _config(args)
    out = Path(args.out or cfg.out_dir)
    res = train_stage(cfg, "pretrain", out, resume=args.resume, steps=args.steps)
    print(f"pretrain: {len(res.losses)} steps logged, final loss {res.losses[-1]:.5f}; "
          f"checkpoint {res.checkpoint}")
    return 0


def cmd_adapt(args) -> int:
    from .train import train_stage
    cfg = _config(args)
    out = Path(args.out or cfg.out_dir)
    if args.resume is None and args.checkpoint is None:
        raise SystemExit("adapt: --checkpoint (pre-trained weights) or --resume is required")
    res = train_stage(cfg, "adapt", out, init_checkpoint=args.checkpoint, resume=args.resume,
                      steps=args.steps)
    print(f"adapt: {len(res.losses)} steps logged, final loss {res.losses[-1]:.5f}; "
          f"checkpoint {res.checkpoint}")
    return 0


def cmd_infer(args) -> int:
    from .data import full_frame_inputs, load_sequence, write_frames
    from .train import load_model, super_resolve
    net, _, _, _ = load_model(args.checkpoint)
    tri = load_sequence(args.clip)
    lr, ref = full_frame_inputs(tri, "pretrain" if args.scale == "pretrain" else "adapt")
    sr = super_resolve(net, lr, ref)
    paths = write_frames(args.out, [np.clip(f[0], 0, 1) for f in sr])
    if args.save_raw:
        np.save(Path(args.out) / "sr.npy", np.stack([f[0] for f in sr]))
    h, w = sr[0].shape[2:]
    print(f"wrote {len(paths)} SR frames ({h}x{w}) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .data import read_frames
    from .metrics import DEFAULT_BANDS, banded_report, parse_bands
    bands = parse_bands(args.bands) if args.bands else DEFAULT_BANDS
    sr = read_frames(args.sr)
    gt = read_frames(args.gt)
    report = banded_report(list(sr), list(gt), bands)
    print(report.to_text(), end="")
    if args.out:
        paths = report.write(args.out, figure=not args.no_figure)
        print("report files: " + ", ".join(str(p) for p in paths.values()))
    return 0


def cmd_selftest(args) -> int:
    from . import matching, selftest
    if args.fault == "tie-rule":
        matching.set_tie_rule("last")
    try:
        ok = selftest.run_all(seed=args.seed)
    finally:
        matching.set_tie_rule("first")
    print("selftest: " + ("all suites passed" if ok else "FAILED"))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refvsr", description="Reference-based video super-resolution toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--data-dir", dest="data_dir")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        return sp

    g = with_config(sub.add_parser("gen-data", help="write synthetic triplet clips"))
    g.add_argument("--clips", type=int)
    g.add_argument("--frames", type=int)
    g.add_argument("--size", help="HxW of every camera frame, e.g. 64x96")
    g.add_argument("--motion", type=float, help="camera motion amplitude (ultra-wide pixels)")
    g.set_defaults(func=cmd_gen_data)

    t = with_config(sub.add_parser("pretrain", help="pre-training on 4x-downscaled triplets"))
    t.add_argument("--resume", help="checkpoint of an interrupted run")
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_pretrain)

    a = with_config(sub.add_parser("adapt", help="adaptation at native scale"))
    a.add_argument("--checkpoint", help="pre-trained checkpoint")
    a.add_argument("--resume", help="checkpoint of an interrupted adaptation run")
    a.add_argument("--steps", type=int)
    a.set_defaults(func=cmd_adapt)

    i = sub.add_parser("infer", help="super-resolve a clip")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--clip", required=True, help="clip directory with uw/ and wide/")
    i.add_argument("--out", required=True)
    i.add_argument("--scale", choices=("native", "pretrain"), default="native",
                   help="native frames, or 4x-downscaled frames as in pre-training")
    i.add_argument("--save-raw", action="store_true", help="also store float outputs as sr.npy")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="FoV-banded PSNR/SSIM report")
    e.add_argument("--sr", required=True, help="folder of SR frames")
    e.add_argument("--gt", required=True, help="folder of ground-truth frames")
    e.add_argument("--bands", help="comma list of inner:outer fractions")
    e.add_argument("--out", help="write report.txt, report.kv and report.png here")
    e.add_argument("--no-figure", action="store_true")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="run the oracle suites")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fault", choices=("tie-rule",), help="inject a fault (test hook)")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"refvsr {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
