"""Command line interface: ``shadowrecast <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import apply_variant, load_config
from .imaging import load_dataset, load_image, load_mask, match_stems, save_dataset, save_image, synth_dataset
from .metrics import REPORT_COLUMNS, aggregate, region_report, write_jsonl, write_table

log = logging.getLogger("shadowrecast")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", action="append", default=[], help="ablation name (a-d, ours, multiply, cat-i, cat-f, sa, igtr-g, igtr-l, full)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("-v", "--verbose", action="store_true")


def _config(args):
    overrides = dict(kv.split("=", 1) for kv in args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg = load_config(args.config, args.preset, overrides)
    for v in args.variant:
        cfg = apply_variant(cfg, v)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    n = args.count or cfg.train.n_samples
    size = args.size or cfg.train.resolution
    save_dataset(args.out, synth_dataset(n, size=size, seed=cfg.train.seed))
    print(f"wrote {n} synthetic triplets to {args.out}")
    return 0


def cmd_train_decomp(args) -> int:
    from .training import train_decomposition

    cfg = _config(args)
    res = train_decomposition(cfg, load_dataset(args.data), args.out, resume=args.resume)
    print(f"decomposition: {res.steps} steps, loss {res.initial_loss:.5f} -> {res.final_loss:.5f}; {res.checkpoint}")
    return 0


def cmd_train_diffusion(args) -> int:
    from .training import train_diffusion

    cfg = _config(args)
    res = train_diffusion(cfg, load_dataset(args.data), args.decomp, args.out, resume=args.resume)
    print(f"diffusion: {res.steps} steps, loss {res.initial_loss:.5f} -> {res.final_loss:.5f}; {res.checkpoint}")
    return 0


def cmd_train_restore(args) -> int:
    from .training import train_restore

    cfg = _config(args)
    res = train_restore(cfg, load_dataset(args.data), args.decomp, args.diffusion, args.out, resume=args.resume)
    print(f"restoration: {res.steps} steps, loss {res.initial_loss:.5f} -> {res.final_loss:.5f}; {res.checkpoint}")
    return 0


def cmd_infer(args) -> int:
    from .pipeline import ShadowRemover

    seed = args.seed if args.seed is not None else 0
    remover = ShadowRemover.from_checkpoints(args.decomp, args.diffusion, args.restore)
    if args.data:
        jobs = [
            (Path(args.data) / "shadow" / f"{s}.png", Path(args.data) / "mask" / f"{s}.png", Path(args.out) / f"{s}.png")
            for s in match_stems(Path(args.data) / "shadow", Path(args.data) / "mask")[0]
        ]
    else:
        if not (args.image and args.mask):
            raise SystemExit("infer needs --image and --mask, or --data")
        jobs = [(args.image, args.mask, Path(args.out))]
    for image, mask, out in jobs:
        res = remover(load_image(image), load_mask(mask), seed=seed, intermediates=bool(args.dump_intermediates))
        save_image(out, res.image)
        if args.dump_intermediates:
            for name, arr in res.intermediates().items():
                save_image(Path(args.dump_intermediates) / f"{Path(out).stem}_{name}.png", arr)
        log.info("wrote %s", out)
    print(f"restored {len(jobs)} image(s)")
    return 0


def cmd_eval(args) -> int:
    stems, unmatched = match_stems(args.pred, args.gt, args.mask)
    for d, names in unmatched.items():
        print(f"unmatched in {d}: {', '.join(names)}", file=sys.stderr)
    named = []
    for s in stems:
        rep = region_report(
            load_image(Path(args.pred) / f"{s}.png"), load_image(Path(args.gt) / f"{s}.png"), load_mask(Path(args.mask) / f"{s}.png")
        )
        named.append((s, rep))
    if not named:
        print("no matched images to evaluate", file=sys.stderr)
        return 2
    named.append(("mean", aggregate([r for _, r in named])))
    write_jsonl(args.jsonl or sys.stdout, named)
    if args.table:
        write_table(args.table, named)
    mean = named[-1][1]
    print("  ".join(f"{c}={v:.4f}" for c, v in zip(REPORT_COLUMNS, mean.row())), file=sys.stderr)
    return 1 if unmatched else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shadowrecast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic shadow dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-decomp", help="train the decomposition networks")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    p.set_defaults(func=cmd_train_decomp)

    p = sub.add_parser("train-diffusion", help="train the local lighting correction noise network")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--decomp", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("train-restore", help="train the bilateral correction network")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--decomp", type=Path, required=True)
    p.add_argument("--diffusion", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    p.set_defaults(func=cmd_train_restore)

    p = sub.add_parser("infer", help="remove shadows with trained checkpoints")
    _common(p)
    p.add_argument("--image", type=Path)
    p.add_argument("--mask", type=Path)
    p.add_argument("--data", type=Path, help="dataset root; restores every shadow/*.png")
    p.add_argument("--decomp", type=Path, required=True)
    p.add_argument("--diffusion", type=Path, required=True)
    p.add_argument("--restore", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output PNG, or directory with --data")
    p.add_argument("--dump-intermediates", type=Path, metavar="DIR")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="region metrics over matched prediction / ground-truth / mask directories")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--table", type=Path, help="CSV output")
    p.add_argument("--jsonl", type=Path, help="line-delimited JSON output (default stdout)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
