"""Command line entry point: ``limbvton {preprocess,train,infer,evaluate,synth}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import MODULES, default_config, dump_config, load_config

log = logging.getLogger("limbvton")


def _cmd_preprocess(args):
    from .dataio import VitonDataset, save_rgb

    root = Path(args.data_dir)
    lists = [args.pairs] if args.pairs else [p.name for p in sorted(root.glob("*pairs*.txt"))]
    if not lists:
        raise SystemExit(f"{root}: no pairs file found")
    out = root / "agnostic"
    out.mkdir(exist_ok=True)
    seen = set()
    for pairs in lists:
        ds = VitonDataset(root, pairs)
        for i in range(len(ds)):
            sample = ds[i]
            if sample.name in seen:
                continue
            seen.add(sample.name)
            save_rgb(sample.occluded_person, out / f"{sample.name}.png")
        print(f"{pairs}: {len(ds)} pairs ok")
    print(f"wrote {len(seen)} agnostic images to {out}")


def _cmd_train(args):
    from .dataio import VitonDataset
    from .pipeline import train

    cfg = load_config(args.config, args.module) if args.config else default_config(args.module)
    overrides = {k: v for k, v in (("data_root", args.data), ("out_dir", args.out), ("steps", args.steps)) if v}
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    if not cfg.data_root:
        raise SystemExit("no dataset: set data_root in the config or pass --data")
    dataset = VitonDataset(cfg.data_root, cfg.pairs, size=(cfg.height, cfg.width))
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.out_dir) / f"{args.module}.cfg").write_text(dump_config(cfg))
    est = train(args.module, dataset, cfg)
    print(f"{args.module}: {est.n_steps_} steps, checkpoint {Path(cfg.out_dir) / (args.module + '.ckpt')}")


def _cmd_infer(args):
    from .pipeline import TryOnPipeline, infer, sample_from_files

    pipe = TryOnPipeline.from_directory(args.checkpoints)
    sample = sample_from_files(args.person, args.cloth, parse=args.parse, pose=args.pose, cloth_mask=args.cloth_mask)
    infer(sample, pipe, args.out, intermediates=args.intermediates)
    print(f"wrote {'six images' if args.intermediates else 'ltf_fine.png'} to {args.out}")


def _cmd_evaluate(args):
    from .dataio import VitonDataset
    from .pipeline import TryOnPipeline, evaluate

    pairs = Path(args.pairs)
    root = Path(args.data) if args.data else pairs.parent
    pipe = TryOnPipeline.from_directory(args.checkpoints)
    report = evaluate(VitonDataset(root, pairs.resolve()), pipe, args.out, image_dir=args.images,
                      features_dir=args.features)
    for k, v in report.summary().items():
        print(f"{k} = {v}")


def _cmd_fid(args):
    from .metrics import fid, load_features

    print(f"fid = {fid(load_features(args.a), load_features(args.b)):.6f}")


def _cmd_synth(args):
    from .synthetic import write_dataset

    root = write_dataset(args.out, n=args.n, seed=args.seed)
    print(f"wrote {args.n} synthetic pairs to {root}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="limbvton", description="Limb-aware virtual try-on: train, infer, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="validate a dataset and write occluded person images")
    s.add_argument("data_dir")
    s.add_argument("--pairs", help="pairs file name (default: every *pairs*.txt)")
    s.set_defaults(func=_cmd_preprocess)

    s = sub.add_parser("train", help="train one stage")
    s.add_argument("--module", required=True, choices=MODULES)
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--data", help="dataset root (overrides data_root)")
    s.add_argument("--out", help="output directory (overrides out_dir)")
    s.add_argument("--steps", type=int, help="override the step count")
    s.set_defaults(func=_cmd_train)

    for name, helptext in (("infer", "try one garment on one person"), ("evaluate", "score a pairs list")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoints", default="runs", help="directory holding pcw/ppe/ltf .ckpt files")
        s.add_argument("--out", required=True)
        if name == "infer":
            s.add_argument("--person", required=True)
            s.add_argument("--cloth", required=True)
            s.add_argument("--parse", help="person label PNG (default: ../image-parse/<stem>.png)")
            s.add_argument("--pose", help="pose JSON (default: ../pose/<stem>.json)")
            s.add_argument("--cloth-mask", help="garment mask (default: ../cloth-mask/<stem>.png)")
            s.add_argument("--intermediates", action="store_true", help="also write the five stage images")
            s.set_defaults(func=_cmd_infer)
        else:
            s.add_argument("--pairs", required=True)
            s.add_argument("--data", help="dataset root (default: the pairs file's folder)")
            s.add_argument("--images", help="also write each try-on result under this folder")
            s.add_argument("--features", help="write N x d float32 FID embeddings (.npy) here")
            s.set_defaults(func=_cmd_evaluate)

    s = sub.add_parser("fid", help="FID between two N x d feature files")
    s.add_argument("a")
    s.add_argument("b")
    s.set_defaults(func=_cmd_fid)

    s = sub.add_parser("synth", help="write a procedural dataset for smoke tests")
    s.add_argument("out")
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
