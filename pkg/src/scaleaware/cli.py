"""Command-line entry point: gen-data, gradcheck, train, eval, ablate, export-maps.

Every command writes its outputs plus a ``manifest.json`` under ``--out``.
Settings may come from a ``key = value`` file given with ``--config``; command
line flags override it. Defaults are desk-scale (64x64 tiles, batch 4,
30 epochs, narrow channels); the full-scale values are reachable by flags.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import data as D
from . import gradcheck as G
from . import network as N
from . import train as T
from .imageio import read_ppm
from .tensor import Rng

log = logging.getLogger("scaleaware")

DESK_CHANNELS = "8,16,32,32,64"
FULL_CHANNELS = "64,128,256,512,512"


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config

def read_config(path) -> list[str]:
    """Turn a ``key = value`` file into ``--key value`` tokens."""
    tokens = []
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "yes", "on"):
            tokens.append(flag)  # switch
        elif value.lower() not in ("false", "no", "off"):
            tokens += [flag, value]
    return tokens


def git_hash(blob: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


class Run:
    """Collects artifacts and writes the manifest for one command."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "command")}
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []
        self.started = _now()

    def add(self, path) -> Path:
        path = Path(path)
        self.artifacts.append(str(path.relative_to(self.out) if path.is_relative_to(self.out) else path))
        return path

    def finish(self, exit_code: int = 0) -> Path:
        blob = json.dumps(self.config, sort_keys=True).encode()
        manifest = {
            "command": self.command,
            "config": self.config,
            "seed": self.config.get("seed"),
            "artifacts": self.artifacts,
            "started": self.started,
            "finished": _now(),
            "config_hash": git_hash(blob),
            "exit_code": exit_code,
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in str(text).replace("x", ",").split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _size(text: str) -> tuple[int, int]:
    v = _ints(text)
    if len(v) == 1:
        v = v * 2
    if len(v) != 2 or min(v) < 1:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}")
    return v


# -------------------------------------------------------------------- data

def _scenes(args, split: str):
    if args.data:
        d = Path(args.data) / split
        if not d.is_dir():
            raise UsageError(f"no split {split!r} under {args.data}")
        return D.load_split(d)
    counts = {"train": args.scenes, "val": args.val_scenes}
    if split not in counts:
        raise UsageError(f"unknown split {split!r} without --data")
    spec = D.benchmark_spec(args.canvas)
    return D.generate_splits(spec, counts, args.data_seed)[split]


def _validated(make, *a, **kw):
    try:
        return make(*a, **kw)
    except ValueError as e:
        raise UsageError(str(e)) from e


def _net_config(args, variant: str) -> N.NetworkConfig:
    return _validated(N.NetworkConfig, variant=variant, stage_channels=args.channels, input_size=args.tile,
                      norm=not args.no_norm)


def _train_config(args, seed: int) -> T.TrainConfig:
    return _validated(T.TrainConfig, epochs=args.epochs, batch_size=args.batch, base_lr=args.lr,
                      weight_decay=args.weight_decay, decoupled_weight_decay=not args.coupled_decay,
                      augment=not args.no_augment, seed=seed)


def _tiles(args, size=None) -> D.TileSpec:
    return _validated(D.TileSpec, tuple(size or args.tile), args.overlap)


def _print_row(columns, row) -> None:
    print(",".join(columns))
    print(",".join(f"{100 * v:.2f}" for v in row))


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, run: Run) -> int:
    spec = D.benchmark_spec(args.canvas)
    dirs = D.write_dataset(run.out, spec, {"train": args.scenes, "val": args.val_scenes}, args.seed)
    for d in dirs.values():
        run.add(d)
    print(f"wrote {args.scenes} train and {args.val_scenes} val scenes to {run.out}")
    return 0


def cmd_gradcheck(args, run: Run) -> int:
    results = G.run_scope(args.scope, args.seed, args.trials)
    lines = [r.line() for r in results]
    ok = all(r.passed for r in results)
    lines.append(f"{'ALL PASS' if ok else 'FAILURES'}: {sum(r.passed for r in results)}/{len(results)}")
    print("\n".join(lines))
    run.add(run.out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    return 0 if ok else 1


def cmd_train(args, run: Run) -> int:
    scenes = _scenes(args, "train")
    tiles = T.make_tiles(scenes, _tiles(args))
    cfg, tcfg = _net_config(args, args.variant), _train_config(args, args.seed)
    res = T.train(N.build(cfg, Rng(args.seed)), tiles, tcfg, out_dir=run.out)
    run.add(res.checkpoint)
    run.add(run.out / "log.csv")
    last = res.log[-1]
    print(f"{args.variant}: {len(res.log)} epochs, final loss {last['loss']:.4f}, "
          f"train mean IoU {100 * last['mean_iou']:.2f}")
    return 0


def cmd_eval(args, run: Run) -> int:
    net, _ = N.load_checkpoint(args.checkpoint)
    scenes = _scenes(args, args.split)
    cm = T.evaluate(net, scenes, _tiles(args, net.config.input_size))
    columns, row = T.report_columns(len(cm)), T.report_row(cm)
    _print_row(columns, row)
    path = run.add(run.out / "metrics.csv")
    path.write_text(",".join(columns) + "\n" + ",".join(repr(float(v)) for v in row) + "\n")
    np.savetxt(run.add(run.out / "confusion.txt"), cm, fmt="%d")
    return 0


def cmd_ablate(args, run: Run) -> int:
    train_scenes, val_scenes = _scenes(args, "train"), _scenes(args, "val")
    for v in args.variants:
        if v not in N.VARIANTS:
            raise UsageError(f"unknown variant {v!r}")
    res = T.run_ablation(train_scenes, val_scenes, _net_config(args, "baseline"), _train_config(args, 0),
                         variants=args.variants, seeds=args.seeds, tspec=_tiles(args),
                         out_dir=run.out)
    print(res.format())
    run.add(run.out / "ablation.csv")
    per_seed = run.add(run.out / "per_seed.csv")
    with open(per_seed, "w") as f:
        f.write("variant,seed," + ",".join(res.columns) + "\n")
        for (v, s), row in res.per_seed.items():
            f.write(f"{v},{s}," + ",".join(repr(float(x)) for x in row) + "\n")
    return 0


def cmd_export_maps(args, run: Run) -> int:
    net, _ = N.load_checkpoint(args.checkpoint)
    th, tw = net.config.input_size
    if args.image:
        img = read_ppm(args.image).transpose(2, 0, 1) / 255.0
    else:
        img = _scenes(args, args.split)[args.index][0]
    if img.shape[1] < th or img.shape[2] < tw:
        raise UsageError(f"image {img.shape[1:]} smaller than network input {(th, tw)}")
    crop = T.prepare_input(img[None, :, :th, :tw])
    N.export_score_maps(net, crop, run.out)
    for k in range(net.config.num_classes):
        run.add(run.out / f"class_{k}.pgm")
    print(f"wrote {net.config.num_classes} score maps to {run.out}")
    return 0


# ------------------------------------------------------------------ parser

def _common(p: argparse.ArgumentParser, out: str) -> None:
    p.add_argument("--config", help="key = value file; flags given on the command line win")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=out, help="output directory (default: %(default)s)")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS threads")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory from gen-data; omitted = regenerate in memory")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--canvas", type=_size, default=(128, 128))
    p.add_argument("--scenes", type=int, default=20, help="train scenes when regenerating")
    p.add_argument("--val-scenes", type=int, default=6)
    p.add_argument("--overlap", type=float, default=0.5)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--weight-decay", type=float, default=2e-4)
    p.add_argument("--coupled-decay", action="store_true", help="L2 term inside the Adam gradient")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--tile", type=_size, default=(64, 64))
    p.add_argument("--channels", type=_ints, default=_ints(DESK_CHANNELS),
                   help=f"stage widths (desk default; full width is {FULL_CHANNELS})")
    p.add_argument("--no-norm", action="store_true", help="drop GroupNorm from the backbone")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scaleaware", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic multi-scale dataset")
    _common(p, "runs/data")
    p.add_argument("--canvas", type=_size, default=(128, 128))
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--val-scenes", type=int, default=6)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    _common(p, "runs/gradcheck")
    p.add_argument("--scope", choices=["layer", "sam", "network", "all"], default="all")
    p.add_argument("--trials", type=int, default=1)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train one variant")
    _common(p, "runs/train")
    p.add_argument("--variant", choices=N.VARIANTS, default="sam_multi")
    _data_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    _common(p, "runs/eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    _data_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the five ablation variants")
    _common(p, "runs/ablate")
    p.add_argument("--seeds", type=_ints, default=(0, 1, 2))
    p.add_argument("--variants", type=lambda s: tuple(s.split(",")), default=tuple(T.ABLATION_LABELS))
    _data_flags(p)
    _train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-maps", help="write per-class score maps as PGM")
    _common(p, "runs/maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", help="PPM image; otherwise a scene from --split")
    p.add_argument("--split", default="val")
    p.add_argument("--index", type=int, default=0)
    _data_flags(p)
    p.set_defaults(func=cmd_export_maps)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            extra = read_config(known.config)
        except (OSError, UsageError) as e:
            parser.error(str(e))
        # config tokens go right after the subcommand so later flags override them
        cmd = next((i for i, a in enumerate(argv) if not a.startswith("-")), None)
        if cmd is not None:
            argv = argv[:cmd + 1] + extra + argv[cmd + 1:]
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    run = Run(args.command, args)
    code = 1
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(args.threads):
                code = args.func(args, run)
        else:
            code = args.func(args, run)
    except UsageError as e:
        print(f"scaleaware {args.command}: error: {e}", file=sys.stderr)
        code = 2
    except Exception as e:  # noqa: BLE001 - any runtime failure maps to exit 1
        print(f"scaleaware {args.command}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        code = 1
    finally:
        run.finish(code)
    return code


if __name__ == "__main__":
    sys.exit(main())
