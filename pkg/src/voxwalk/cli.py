"""Command-line pipeline driver.

Subcommands: synth, train, infer, select, refine, dice, report.  Machine
readable results go only to the declared output files (or stdout for
`dice`); progress logs go to stderr.  Exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""

import argparse
import sys

import numpy as np

from . import metrics, network, volio, walker
from .config import PipelineConfig
from .selection import node_energies, select


def _log(msg):
    print(msg, file=sys.stderr)


def _load_config(args):
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    return cfg.replace(
        alpha=getattr(args, "alpha", None),
        theta=getattr(args, "theta", None),
        beta=getattr(args, "beta", None),
        learning_rate=getattr(args, "learning_rate", None),
        solver_tol=getattr(args, "tol", None),
    )


def _cmd_synth(args):
    intensity, label = volio.synth(args.seed, args.dims, args.n_blobs, args.noise_sigma)
    volio.write_volume(args.out_intensity, intensity, "intensity")
    volio.write_volume(args.out_label, label.astype(np.float64), "label")
    _log(f"synth: wrote {args.out_intensity} and {args.out_label} "
         f"({args.dims[0]}x{args.dims[1]}x{args.dims[2]}, {args.n_blobs} blobs)")
    return 0


def _cmd_train(args):
    cfg = _load_config(args)
    if len(args.volume) != len(args.label):
        raise ValueError("--volume and --label must be given the same number of times")
    dataset = []
    for vpath, lpath in zip(args.volume, args.label):
        vol, _ = volio.read_volume(vpath, expect_kind="intensity")
        lab, _ = volio.read_volume(lpath, expect_kind="label")
        dataset.append((vol, lab))
    widths = tuple(int(w) for w in args.widths.split(","))
    spec = network.NetworkSpec(
        unit_type=args.unit,
        depth=args.depth,
        widths=widths,
        kernel=args.kernel,
        temporal_kernel=args.temporal_kernel,
        alpha=cfg.alpha,
        rng_seed=args.seed if args.seed is not None else cfg.seeds.get("network", 0),
    )
    tc = network.TrainConfig(
        learning_rate=cfg.learning_rate, epochs=args.epochs, batch_size=args.batch_size)
    net, history = network.train_toy(spec, tc, dataset)
    network.save_checkpoint(args.out, net)
    _log(f"train: {args.unit} depth={args.depth} widths={widths} "
         f"loss {history[0]:.6f} -> {history[-1]:.6f}, saved {args.out}")
    return 0


def _cmd_infer(args):
    net = network.load_checkpoint(args.checkpoint)
    vol, _ = volio.read_volume(args.volume, expect_kind="intensity")
    prob = network.infer(net, vol, mode=args.mode)
    volio.write_volume(args.out, prob, "prob")
    _log(f"infer: {args.checkpoint} on {args.volume} -> {args.out} (mode={args.mode})")
    return 0


def _read_prob_maps(paths):
    maps = []
    for path in paths:
        data, _ = volio.read_volume(path, expect_kind="prob")
        maps.append(data)
    return np.stack(maps)


def _cmd_select(args):
    cfg = _load_config(args)
    maps = _read_prob_maps(args.probs)
    energies = node_energies(maps)
    volio.write_volume(args.out_energy, energies, "intensity")
    if args.out_confident:
        sel = select(maps, cfg.theta)
        conf = np.zeros(int(np.prod(sel.dims)))
        conf[sel.confident_idx] = 1.0
        volio.write_volume(args.out_confident, conf.reshape(sel.dims), "label")
    _log(f"select: K={len(args.probs)} theta={cfg.theta} -> {args.out_energy}")
    return 0


def _cmd_refine(args):
    cfg = _load_config(args)
    maps = _read_prob_maps(args.probs)
    intensity, _ = volio.read_volume(args.intensity, expect_kind="intensity")
    result = walker.refine(
        maps, intensity, cfg.theta, cfg.beta, tol=cfg.solver_tol,
        include_dirichlet=not args.no_dirichlet)
    volio.write_volume(args.out, result.labels.astype(np.float64), "label")
    if args.out_x:
        volio.write_volume(args.out_x, result.x, "prob")
    _log(f"refine: K={len(args.probs)} theta={cfg.theta} beta={cfg.beta} -> {args.out}")
    return 0


def _cmd_dice(args):
    a, _ = volio.read_volume(args.a, expect_kind="label")
    b, _ = volio.read_volume(args.b, expect_kind="label")
    print(f"{metrics.dice(a, b):.6f}")
    return 0


def _cmd_report(args):
    truth, _ = volio.read_volume(args.truth, expect_kind="label")
    stages = []
    for item in args.stage:
        name, _, path = item.partition("=")
        if not path:
            raise ValueError(f"--stage expects name=path, got {item!r}")
        data, _ = volio.read_volume(path, expect_kind="label")
        stages.append((name, data))
    rows = metrics.stage_report(truth, stages)
    text = metrics.report_csv(rows)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(text)
    _log(f"report: {len(rows)} stage(s) -> {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="voxwalk",
        description="Randomized-connection segmentation with random-walker refinement")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic intensity/label pair")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, nargs=3, required=True, metavar=("D", "H", "W"))
    p.add_argument("--n-blobs", type=int, default=3)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--out-intensity", required=True)
    p.add_argument("--out-label", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a toy network on volume/label pairs")
    p.add_argument("--config")
    p.add_argument("--unit", choices=network.UNIT_TYPES, required=True)
    p.add_argument("--volume", action="append", required=True)
    p.add_argument("--label", action="append", required=True)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--widths", default="8,16,32")
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--temporal-kernel", type=int, default=3)
    p.add_argument("--alpha", type=float)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint on an intensity volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--mode", choices=("expectation", "all-true"), default="expectation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("select", help="dump selection energies (diagnostic)")
    p.add_argument("--config")
    p.add_argument("--probs", nargs="+", required=True)
    p.add_argument("--theta", type=float)
    p.add_argument("--out-energy", required=True)
    p.add_argument("--out-confident")
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("refine", help="fuse probability maps into labels")
    p.add_argument("--config")
    p.add_argument("--probs", nargs="+", required=True)
    p.add_argument("--intensity", required=True)
    p.add_argument("--theta", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--no-dirichlet", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--out-x")
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("dice", help="print the Dice overlap of two label volumes")
    p.add_argument("a")
    p.add_argument("b")
    p.set_defaults(func=_cmd_dice)

    p = sub.add_parser("report", help="CSV of per-stage Dice vs ground truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--stage", action="append", default=[], metavar="NAME=PATH")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"voxwalk: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
