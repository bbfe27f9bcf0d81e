"""Command-line interface.

Exit codes: 0 success, 1 verification failure, 2 usage/config/input error,
3 numerical halt during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import geom
from .metrics import naive_interpolate
from .model import CheckpointError, ModelConfig, load_checkpoint, unroll
from .train import (NumericalHalt, TrainConfig, evaluate, make_pairs, prepare_shape, train)

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_HALT = 0, 1, 2, 3

# CLI flag dest -> config key
MODEL_FLAGS = {
    "steps": "steps", "latent_dim": "latent_dim", "encoder_widths": "encoder_widths",
    "post_widths": "post_widths", "step_widths": "step_widths", "activation": "activation",
    "share_weights": "share_weights",
}
TRAIN_FLAGS = {
    "lr": "learning_rate", "iterations": "iterations", "points": "points", "lam": "lam",
    "neighbors": "neighbors", "knn_k": "knn_k", "topo_form": "topo_form",
    "checkpoint_every": "checkpoint_every", "log_every": "log_every",
    "beta1": "beta1", "beta2": "beta2", "eps": "eps",
}


class UsageError(Exception):
    pass


def read_config_file(path) -> dict:
    """``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    known = ({f.name for f in fields(ModelConfig)} | {f.name for f in fields(TrainConfig)}
             | {"mode"})
    unknown = sorted(set(out) - known)
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}")
    return out


def resolve_seed(args, file_cfg: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    if "seed" in file_cfg:
        return int(file_cfg["seed"])
    env = os.environ.get("PCMORPH_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"PCMORPH_SEED must be an integer, got {env!r}") from None
    return 0


def build_configs(args) -> tuple[ModelConfig, TrainConfig, dict]:
    kv = read_config_file(args.config) if args.config else {}
    seed = resolve_seed(args, kv)
    for dest, key in {**MODEL_FLAGS, **TRAIN_FLAGS}.items():
        val = getattr(args, dest, None)
        if val is not None:
            kv[key] = val
    kv["seed"] = seed
    try:
        mc = ModelConfig.from_mapping(kv)
        tc = TrainConfig.from_mapping(kv)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return mc, tc, kv


def _load_ckpt(path):
    try:
        return load_checkpoint(Path(path).read_bytes())
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint: {exc}") from None
    except CheckpointError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _shape(path, points, seed, neighbors=None, k=6):
    try:
        return prepare_shape(path, points, seed, neighbors, k)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _transform_json(**tfs) -> str:
    return json.dumps({name: {"translation": tf.translation.tolist(), "scale": tf.scale}
                       for name, tf in tfs.items()}, indent=2) + "\n"


def _alpha(t: int, T: int) -> float:
    return 1.0 - t / T if T else 1.0


# --------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    mc, tc, kv = build_configs(args)
    try:
        if args.pair:
            pairs = make_pairs(pair=args.pair, seed=tc.seed, config=tc)
        else:
            mode = args.mode or kv.get("mode", "random-pairs")
            pairs = make_pairs(args.data, mode=mode, seed=tc.seed, config=tc)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(
        mc.to_text() + "".join(f"{f.name}={getattr(tc, f.name)}\n" for f in fields(tc)
                               if f.name != "seed"))
    try:
        _, history = train(pairs, mc, tc, out)
    except NumericalHalt as exc:
        print(f"numerical halt: {exc}; last good checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_HALT
    it, lb = history[-1]
    print(f"iter {it}\tchamfer {lb.chamfer!r}\ttopology {lb.topology!r}\ttotal {lb.total!r}")
    if args.figures:
        from .report import plot_training_curve, read_metrics
        plot_training_curve(read_metrics(out / "metrics.tsv"), out / "loss.png")
    return EXIT_OK


def cmd_interp(args) -> int:
    params, mc = _load_ckpt(args.ckpt)
    seed = resolve_seed(args, {})
    src = _shape(args.source, None, seed)
    tgt = _shape(args.target, args.points, seed)
    traj = unroll(params, mc, src.cloud, tgt.cloud)
    out = Path(args.frames_out)
    out.mkdir(parents=True, exist_ok=True)
    T = len(traj) - 1
    for t, frame in enumerate(traj.frames):
        comment = f"frame {t} of {T} alpha={_alpha(t, T):.6f}"
        (out / f"frame_{t:03d}.ply").write_bytes(geom.write_ply_points(frame, comment))
    (out / "transform.json").write_text(_transform_json(source=src.transform,
                                                        target=tgt.transform))
    if args.figure:
        from .report import plot_trajectory
        plot_trajectory(traj.frames, args.figure,
                        [f"t={t}" for t in range(T + 1)])
    print(f"wrote {T + 1} frames to {out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    if args.alpha is not None and not 0.0 <= args.alpha <= 1.0:
        raise UsageError(f"--alpha must lie in [0, 1], got {args.alpha}")
    if args.frames is not None and args.frames < 2:
        raise UsageError("--frames must be >= 2")
    seed = resolve_seed(args, {})
    src = _shape(args.source, args.resample, seed)
    tgt = _shape(args.target, args.resample, seed)
    if len(src.cloud) != len(tgt.cloud):
        raise UsageError(f"point counts differ ({len(src.cloud)} vs {len(tgt.cloud)}); "
                         f"pass --resample N")
    if args.alpha is not None:
        alphas = [args.alpha]
    else:
        k = args.frames
        alphas = [1.0 - t / (k - 1) for t in range(k)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = []
    for t, a in enumerate(alphas):
        cloud = naive_interpolate(src.cloud, tgt.cloud, a)
        frames.append(cloud)
        (out / f"frame_{t:03d}.ply").write_bytes(
            geom.write_ply_points(cloud, f"naive alpha={a:.6f}"))
    (out / "transform.json").write_text(_transform_json(source=src.transform,
                                                        target=tgt.transform))
    if args.figure:
        from .report import plot_trajectory
        plot_trajectory(frames, args.figure, [f"alpha={a:.2f}" for a in alphas])
    print(f"wrote {len(alphas)} frames to {out}")
    return EXIT_OK


def cmd_export_mesh(args) -> int:
    params, mc = _load_ckpt(args.ckpt)
    if not 0 <= args.frame <= mc.steps:
        raise UsageError(f"--frame must lie in [0, {mc.steps}], got {args.frame}")
    seed = resolve_seed(args, {})
    src = _shape(args.source_mesh, None, seed)
    tgt = _shape(args.target, args.points, seed)
    traj = unroll(params, mc, src.cloud, tgt.cloud)
    mesh = geom.TriMesh(traj.frames[args.frame].points, src.mesh.faces)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    comment = f"frame {args.frame} of {mc.steps} alpha={_alpha(args.frame, mc.steps):.6f}"
    out.write_bytes(geom.write_obj(mesh, comment))
    out.with_name(out.name + ".transform.json").write_text(
        _transform_json(source=src.transform, target=tgt.transform))
    print(f"wrote {out} ({len(mesh.vertices)} vertices, {len(mesh.faces)} faces)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import TOLERANCE, run_suite
    seed = resolve_seed(args, {})
    results = run_suite(seed=seed, probes=args.probes, epsilon=args.eps)
    failed = []
    for name, err in results:
        ok = err <= TOLERANCE
        print(f"{name}\t{err:.3e}\t{'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_eval(args) -> int:
    params, mc = _load_ckpt(args.ckpt)
    seed = resolve_seed(args, {})
    src = _shape(args.pair[0], args.points, seed, args.neighbors, args.knn_k)
    tgt = _shape(args.pair[1], args.points, seed)
    report = evaluate(params, mc, src, tgt, args.topo_form)
    if args.tsv:
        if args.header:
            print(report.tsv_header())
        print(report.tsv())
    else:
        print("\n".join(report.lines()))
    if args.figure:
        from .report import plot_frame_chamfer
        plot_frame_chamfer(report.frame_to_source, report.frame_to_target, args.figure)
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser


def _widths(text: str) -> str:
    try:
        [int(w) for w in text.split(",") if w]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcmorph",
                                description="Learned point-cloud interpolation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def seed_flag(sp):
        sp.add_argument("--seed", type=int, help="seed (fallback: $PCMORPH_SEED, then 0)")

    t = sub.add_parser("train", help="train on a fixed pair or a mesh directory")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="directory of .off/.obj meshes")
    src.add_argument("--pair", nargs=2, metavar=("SOURCE", "TARGET"))
    t.add_argument("--mode", choices=("fixed-pair", "random-pairs"))
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--config", help="key=value config file (flags override it)")
    seed_flag(t)
    t.add_argument("--steps", type=int)
    t.add_argument("--latent-dim", type=int)
    t.add_argument("--encoder-widths", type=_widths)
    t.add_argument("--post-widths", type=_widths)
    t.add_argument("--step-widths", type=_widths)
    t.add_argument("--activation", choices=("tanh", "relu"))
    t.add_argument("--share-weights", action="store_const", const="true")
    t.add_argument("--lr", type=float)
    t.add_argument("--beta1", type=float)
    t.add_argument("--beta2", type=float)
    t.add_argument("--eps", type=float)
    t.add_argument("--iterations", type=int)
    t.add_argument("--points", type=int)
    t.add_argument("--lam", "--lambda", dest="lam", type=float)
    t.add_argument("--neighbors", choices=("knn", "mesh"))
    t.add_argument("--knn-k", type=int)
    t.add_argument("--topo-form", choices=("squared", "raw"))
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--log-every", type=int)
    t.add_argument("--figures", action="store_true", help="also write loss.png")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("interp", help="write the learned trajectory as PLY frames")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--source", required=True)
    i.add_argument("--target", required=True)
    i.add_argument("--frames-out", required=True)
    i.add_argument("--points", type=int, default=1024, help="target sample count")
    i.add_argument("--figure", help="PNG path for a trajectory figure")
    seed_flag(i)
    i.set_defaults(func=cmd_interp)

    b = sub.add_parser("baseline", help="naive index-paired interpolation frames")
    b.add_argument("--source", required=True)
    b.add_argument("--target", required=True)
    mode = b.add_mutually_exclusive_group(required=True)
    mode.add_argument("--alpha", type=float)
    mode.add_argument("--frames", type=int)
    b.add_argument("--resample", type=int, help="sample both shapes to N points")
    b.add_argument("--out", required=True)
    b.add_argument("--figure", help="PNG path for a frame figure")
    seed_flag(b)
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("export-mesh", help="write a trajectory frame as an OBJ mesh")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--source-mesh", required=True)
    e.add_argument("--target", required=True)
    e.add_argument("--frame", type=int, required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--points", type=int, default=1024, help="target sample count")
    seed_flag(e)
    e.set_defaults(func=cmd_export_mesh)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    seed_flag(g)
    g.add_argument("--probes", type=int, default=100)
    g.add_argument("--eps", type=float, default=1e-5)
    g.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("eval", help="report losses for a checkpoint on a pair")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--pair", nargs=2, required=True, metavar=("SOURCE", "TARGET"))
    v.add_argument("--points", type=int, default=1024)
    v.add_argument("--neighbors", choices=("knn", "mesh"), default="knn")
    v.add_argument("--knn-k", type=int, default=6)
    v.add_argument("--topo-form", choices=("squared", "raw"), default="squared")
    v.add_argument("--tsv", action="store_true")
    v.add_argument("--header", action="store_true", help="with --tsv, print column names first")
    v.add_argument("--figure", help="PNG path for per-frame Chamfer")
    seed_flag(v)
    v.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pcmorph {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
