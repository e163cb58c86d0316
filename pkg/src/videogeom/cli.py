"""Command-line entry point: ``videogeom <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input or flags, 2 runtime/numerical failure.

CSV schemas
  bench      mode,N,C,window,ms_per_frame,peak_cache_frames
  train-toy  step,total,points,normal,points_normal
  eval       sequence,rel,delta1,rel_p,delta_p_025,n_mean_deg,n_med_deg,delta_1125,valid_count
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import tensors
from .io_formats import (
    TensorFormatError,
    load_checkpoint,
    read_kv,
    read_tensor,
    save_checkpoint,
    write_csv,
    write_kv,
    write_tensor,
)

log = logging.getLogger("videogeom")


class UsageError(Exception):
    """Bad flags or inputs; exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# helpers

def _res(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"resolution must look like 16x16, got {text!r}")
    if h < 3 or w < 3:
        raise UsageError("resolution must be at least 3x3")
    return h, w


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}")
    if not vals or any(v < 1 for v in vals):
        raise UsageError(f"expected positive integers, got {text!r}")
    return vals


def _frame_files(directory: Path, prefix: str) -> list[Path]:
    return sorted(directory.glob(f"{prefix}_[0-9][0-9][0-9][0-9].vgeo"))


def _sequences(root: Path, prefix: str) -> dict[str, Path]:
    """Sequence name -> directory; ``root`` itself counts if it holds frame files."""
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    if _frame_files(root, prefix):
        return {".": root}
    seqs = {p.name: p for p in sorted(root.iterdir()) if p.is_dir() and _frame_files(p, prefix)}
    if not seqs:
        raise UsageError(f"no {prefix}_NNNN.vgeo files under {root}")
    return seqs


def _stack(directory: Path, prefix: str) -> np.ndarray:
    files = _frame_files(directory, prefix)
    if not files:
        raise UsageError(f"no {prefix}_NNNN.vgeo files in {directory}")
    try:
        return np.stack([read_tensor(f) for f in files])
    except TensorFormatError as e:
        raise UsageError(f"{directory}: {e}")
    except ValueError as e:
        raise UsageError(f"{directory}/{prefix}: frames differ in shape ({e})")


def _write_frames(directory: Path, prefix: str, arrays) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, a in enumerate(arrays):
        write_tensor(directory / f"{prefix}_{i:04d}.vgeo", a)


def _prepare_out(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_geometry_model(path: Path):
    from .model import GeometryModel, ModelConfig

    if not (path / "manifest.txt").is_file():
        raise UsageError(f"{path} is not a checkpoint directory")
    params, cfg = load_checkpoint(path)
    if cfg.get("kind") != "'geometry'":
        raise UsageError(f"{path} is not a geometry-model checkpoint")
    model = GeometryModel(ModelConfig.from_kv(cfg))
    model.load_tensors(params)
    model.eval()
    return model


def _load_teacher(path: Path):
    from .model import ModelConfig
    from .teacher import TeacherModel

    if not (path / "manifest.txt").is_file():
        raise UsageError(f"{path} is not a checkpoint directory")
    params, cfg = load_checkpoint(path)
    if cfg.get("kind") != "'teacher'":
        raise UsageError(f"{path} is not a teacher checkpoint")
    model = TeacherModel(ModelConfig.from_kv(cfg))
    model.load_tensors(params)
    model.eval()
    return model


def _model_config(args):
    from .model import ModelConfig

    try:
        return ModelConfig(width=args.width, heads=args.heads, n_backbone_layers=args.layers,
                           chunk_attn_ratio=args.chunk_ratio, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e))


# --------------------------------------------------------------------------
# subcommands

def cmd_attn_verify(args) -> int:
    from .verify import verify_attention

    if args.frames < 1 or args.dim < 1 or args.heads < 1 or args.trials < 1:
        raise UsageError("frames, dim, heads and trials must be positive")
    if args.dim % args.heads:
        raise UsageError("--dim must be divisible by --heads")
    report = verify_attention(args.frames, args.dim, args.heads, args.trials, seed=args.seed,
                              break_mask=args.break_mask)
    for name, dev in report.items():
        print(f"{name:<28s} max|diff| = {dev:.3e}  {'PASS' if dev <= 1e-5 else 'FAIL'}")
    ok = all(v <= 1e-5 for v in report.values())
    print("PASS" if ok else "FAIL")
    return 0 if ok else 2


def cmd_bench(args) -> int:
    from .bench import BENCH_COLUMNS, bench
    from .model import init_model

    chunks = _int_list(args.chunk_sizes)
    h, w = _res(args.res)
    lengths = _int_list(args.lengths) if args.lengths else None
    if args.max_frames < 1:
        raise UsageError("--max-frames must be positive")
    if lengths is None:
        lengths, n = [], 16
        while n <= args.max_frames:
            lengths.append(n)
            n *= 2
        lengths = lengths or [args.max_frames]
    config = _model_config(args)
    out = _prepare_out(Path(args.out))
    rows = bench(init_model(config), lengths, chunks, args.window, h, w, args.repeats, args.seed)
    write_csv(out / "bench.csv", BENCH_COLUMNS, (r.row() for r in rows))
    if args.plot:
        from .plotting import plot_bench

        plot_bench(rows, out / "bench.png")
    for r in rows:
        print(",".join("" if v is None else str(v) for v in r.row()))
    return 0


def cmd_synth(args) -> int:
    from .geometry import SceneSpec, synth_scene
    from .refine import corrupt_depth, synthetic_mono

    h, w = _res(args.res)
    if args.frames < 1 or args.sequences < 1:
        raise UsageError("--frames and --sequences must be positive")
    try:
        spec = SceneSpec(kind=args.scene, height=h, width=w, n_frames=args.frames, motion=args.motion)
    except ValueError as e:
        raise UsageError(str(e))
    out = _prepare_out(Path(args.out))
    for k in range(args.sequences):
        seed = args.seed + k
        scene = synth_scene(spec, seed=seed)
        d = out / f"seq_{k:03d}"
        _write_frames(d, "rgb", scene.rgb)
        _write_frames(d, "depth", scene.depth.astype(np.float32))
        _write_frames(d, "points", scene.points.astype(np.float32))
        _write_frames(d, "normals", scene.normals.astype(np.float32))
        _write_frames(d, "valid", scene.valid.astype(np.uint8))
        write_kv(d / "scene.txt", spec.to_kv())
        write_kv(d / "meta.txt", {"seed": seed})
        if args.corrupt:
            rng = np.random.default_rng(seed)
            raw = [corrupt_depth(dep, v, rng, args.holes, args.outliers) for dep, v in zip(scene.depth, scene.valid)]
            _write_frames(d / "raw", "rgb", scene.rgb)
            _write_frames(d / "raw", "depth", [r.masked.astype(np.float32) for r in raw])
            _write_frames(d / "raw", "valid", [r.valid.astype(np.uint8) for r in raw])
            _write_frames(d / "mono", "depth", [synthetic_mono(dep, rng).astype(np.float32) for dep in scene.depth])
    print(f"wrote {args.sequences} sequence(s) to {out}")
    return 0


def cmd_train_toy(args) -> int:
    from .losses import LossWeights
    from .training import DataConfig, train_toy

    try:
        lp, ln = (float(v) for v in args.weights.split(","))
        weights = LossWeights(lp, ln)
    except ValueError as e:
        raise UsageError(f"--weights expects 'points_normal,normal': {e}")
    h, w = _res(args.res)
    if args.steps < 0 or args.lr <= 0:
        raise UsageError("--steps must be >= 0 and --lr positive")
    kinds = tuple(args.scenes.split(","))
    if not set(kinds) <= {"plane", "sphere", "boxes"}:
        raise UsageError(f"unknown scene kinds in {args.scenes!r}")
    config = _model_config(args)
    data = DataConfig(kinds=kinds, n_frames=args.frames, height=h, width=w,
                      batch_size=args.batch, seed=args.seed)
    out = _prepare_out(Path(args.out))
    model, history = train_toy(config, data, args.steps, args.lr, weights)
    save_checkpoint(out / "checkpoint", model.tensors(), {"kind": "'geometry'", **config.to_kv()})
    history.to_csv(out / "train_log.csv")
    if args.plot and history.rows:
        from .plotting import plot_training

        plot_training(history, out / "train_log.png")
    if history.rows:
        print(f"final total loss {history.rows[-1][1]:.4f}")
    return 0


def cmd_train_teacher(args) -> int:
    from .teacher import train_toy_teacher
    from .training import DataConfig

    h, w = _res(args.res)
    if args.steps < 0 or args.lr <= 0:
        raise UsageError("--steps must be >= 0 and --lr positive")
    config = _model_config(args)
    data = DataConfig(kinds=("plane", "sphere", "boxes"), n_frames=args.frames, height=h, width=w,
                      batch_size=args.batch, seed=args.seed)
    out = _prepare_out(Path(args.out))
    model, history = train_toy_teacher(config, data, args.steps, args.lr)
    save_checkpoint(out / "teacher", model.tensors(), {"kind": "'teacher'", **config.to_kv()})
    write_csv(out / "teacher_log.csv", ("step", "loss"), enumerate(history))
    return 0


def cmd_infer(args) -> int:
    from .chunk_attention import InferenceMode

    try:
        mode = InferenceMode.parse(args.mode, args.chunk)
    except ValueError as e:
        raise UsageError(str(e))
    model = _load_geometry_model(Path(args.checkpoint))
    seqs = {name: _stack(d, "rgb") for name, d in _sequences(Path(args.input), "rgb").items()}
    for name, rgb in seqs.items():
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise UsageError(f"{name}: rgb frames must be [3, H, W]")
    out = _prepare_out(Path(args.out))
    with torch.no_grad():
        for name, rgb in seqs.items():
            res = model.run(torch.from_numpy(rgb.astype(np.float32)), mode, window=args.window)
            d = out if name == "." else out / name
            arr = res.numpy()
            _write_frames(d, "points", arr["points"])
            _write_frames(d, "depth", arr["depth"])
            _write_frames(d, "normals", arr["normals"])
            _write_frames(d, "valid", np.ones(arr["depth"].shape, np.uint8))
    print(f"inferred {len(seqs)} sequence(s) in mode {mode}")
    return 0


def cmd_refine(args) -> int:
    from .refine import PoissonConfig, RefineConfig, SparseDepth, refine_pipeline

    if args.window < 3 or args.window % 2 == 0:
        raise UsageError("--window must be odd and >= 3")
    if args.tau <= 0 or args.lam <= 0:
        raise UsageError("--tau and --lambda must be positive")
    raw_root, mono_root = Path(args.raw), Path(args.mono)
    jobs = {}
    for name, rd in _sequences(raw_root, "depth").items():
        md = mono_root if name == "." else mono_root / name
        values, valid = _stack(rd, "depth"), _stack(rd, "valid").astype(bool)
        mono = _stack(md, "depth")
        rgb = _stack(rd, "rgb") if _frame_files(rd, "rgb") else None
        if values.shape != mono.shape or values.shape != valid.shape:
            raise UsageError(f"{name}: raw, valid and mono shapes differ")
        try:
            raw = [SparseDepth(v, m) for v, m in zip(values, valid)]
        except ValueError as e:
            raise UsageError(f"{name}: {e}")
        jobs[name] = (raw, mono, rgb)
    if args.teacher == "toy":
        if not args.teacher_checkpoint:
            raise UsageError("--teacher toy needs --teacher-checkpoint")
        from .teacher import ToyTeacher

        teacher = ToyTeacher(_load_teacher(Path(args.teacher_checkpoint)))
        if any(rgb is None for _, _, rgb in jobs.values()):
            raise UsageError("the toy teacher needs rgb_NNNN.vgeo frames next to the raw depth")
    else:
        teacher = None
    config = RefineConfig(args.window, args.tau, PoissonConfig(args.lam, args.cg_tol))
    out = _prepare_out(Path(args.out))
    for name, (raw, mono, rgb) in jobs.items():
        res = refine_pipeline(raw, mono, rgb, config, teacher)
        d = out if name == "." else out / name
        _write_frames(d, "depth", res.pseudo.astype(np.float32))
        _write_frames(d, "valid", np.ones(res.pseudo.shape, np.uint8))
    print(f"refined {len(jobs)} sequence(s)")
    return 0


def cmd_eval(args) -> int:
    from .metrics import CSV_COLUMNS, evaluate_sequence

    crop = None
    if args.crop:
        crop = tuple(_int_list(args.crop.replace(" ", ""))) if args.crop != "0,0,0,0" else None
        if crop is not None and len(crop) != 4:
            raise UsageError("--crop expects top,bottom,left,right")
    gt_seqs = _sequences(Path(args.gt), "depth")
    pred_root = Path(args.pred)
    pairs = {}
    for name, gd in gt_seqs.items():
        pd = pred_root if name == "." else pred_root / name
        gt = {"depth": _stack(gd, "depth")}
        gt["valid"] = _stack(gd, "valid").astype(bool) if _frame_files(gd, "valid") else gt["depth"] > 0
        pred = {}
        for key in ("depth", "points", "normals"):
            if _frame_files(gd, key) and _frame_files(pd, key):
                if key != "depth":
                    gt[key] = _stack(gd, key)
                pred[key] = _stack(pd, key)
        if "depth" not in pred:
            raise UsageError(f"{pd}: no predicted depth frames")
        if pred["depth"].shape != gt["depth"].shape:
            raise UsageError(f"{name}: prediction shape {pred['depth'].shape} != gt {gt['depth'].shape}")
        pairs[name] = (pred, gt)
    out = _prepare_out(Path(args.out))
    rows, reports = [], []
    for name, (pred, gt) in pairs.items():
        rep = evaluate_sequence(pred, gt, args.align, args.max_depth, crop)
        reports.append(rep)
        rows.append([name, *rep.row()])
    total = sum(r.valid_count for r in reports)
    agg = ["all"]
    for i, col in enumerate(CSV_COLUMNS[:-1]):
        vals = [(r.row()[i], r.valid_count) for r in reports if r.row()[i] is not None]
        if not vals:
            agg.append(None)
        elif col == "n_med_deg":
            agg.append(float(np.median([v for v, _ in vals])))
        else:
            agg.append(float(sum(v * c for v, c in vals) / sum(c for _, c in vals)))
    agg.append(total)
    rows.append(agg)
    write_csv(out / "metrics.csv", ("sequence", *CSV_COLUMNS), rows)
    if args.plot:
        from .plotting import plot_depth_errors

        name, (pred, gt) = next(iter(pairs.items()))
        plot_depth_errors(pred["depth"] * reports[0].alignment.get("s", 1.0), gt["depth"], gt["valid"],
                          out / "depth_errors.png")
    for r in rows:
        print(",".join("" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v)) for v in r))
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    common.add_argument("--out", default="out")
    common.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True,
                        help="render figures next to the CSV reports")
    common.add_argument("-v", "--verbose", action="store_true")

    model_flags = _Parser(add_help=False)
    model_flags.add_argument("--width", type=int, default=64)
    model_flags.add_argument("--heads", type=int, default=4)
    model_flags.add_argument("--layers", type=int, default=6)
    model_flags.add_argument("--chunk-ratio", type=float, default=1 / 3)

    p = _Parser(prog="videogeom", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, text, *parents):
        return sub.add_parser(name, parents=list(parents), help=text, description=text)

    s = add("attn-verify", "check mode equivalence and causality", common)
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--trials", type=int, default=20)
    s.add_argument("--break-mask", action="store_true", help="inject a mask fault (negative control)")
    s.set_defaults(func=cmd_attn_verify)

    s = add("bench", "time and cache footprint of offline vs chunked inference "
                "(bench.csv: mode,N,C,window,ms_per_frame,peak_cache_frames)", common, model_flags)
    s.add_argument("--max-frames", type=int, default=512)
    s.add_argument("--lengths", default=None, help="explicit comma-separated sequence lengths")
    s.add_argument("--chunk-sizes", default="16")
    s.add_argument("--window", type=int, default=None)
    s.add_argument("--res", default="16x16")
    s.add_argument("--repeats", type=int, default=2)
    s.set_defaults(func=cmd_bench)

    s = add("synth", "render synthetic sequences", common)
    s.add_argument("--scene", choices=("plane", "sphere", "boxes"), default="plane")
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--res", default="16x16")
    s.add_argument("--sequences", type=int, default=1)
    s.add_argument("--motion", type=float, default=0.08)
    s.add_argument("--corrupt", action="store_true", help="also write raw/ and mono/ inputs for refine")
    s.add_argument("--holes", type=float, default=0.3)
    s.add_argument("--outliers", type=float, default=0.05)
    s.set_defaults(func=cmd_synth)

    s = add("train-toy", "train the toy model (train_log.csv: step,total,points,normal,points_normal)",
            common, model_flags)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--lr", type=float, default=3e-4)
    s.add_argument("--weights", default="1.0,1.0", help="lambda_points_normal,lambda_normal")
    s.add_argument("--frames", type=int, default=4)
    s.add_argument("--res", default="16x16")
    s.add_argument("--batch", type=int, default=2)
    s.add_argument("--scenes", default="plane,sphere")
    s.set_defaults(func=cmd_train_toy)

    s = add("train-toy-teacher", "train the toy completion teacher on synthetic corruption "
                "(teacher_log.csv: step,loss)", common, model_flags)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--lr", type=float, default=3e-4)
    s.add_argument("--frames", type=int, default=4)
    s.add_argument("--res", default="16x16")
    s.add_argument("--batch", type=int, default=2)
    s.set_defaults(func=cmd_train_teacher)

    s = add("infer", "run a checkpoint on rgb frames", common)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--mode", default="offline", choices=("offline", "streaming", "chunked"))
    s.add_argument("--chunk", type=int, default=None)
    s.add_argument("--window", type=int, default=None)
    s.add_argument("--input", required=True)
    s.set_defaults(func=cmd_infer)

    s = add("refine", "turn raw sparse depth into dense pseudo-labels", common)
    s.add_argument("--raw", required=True)
    s.add_argument("--mono", required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=10.0)
    s.add_argument("--tau", type=float, default=0.15)
    s.add_argument("--window", type=int, default=7)
    s.add_argument("--cg-tol", type=float, default=1e-6)
    s.add_argument("--teacher", choices=("identity", "toy"), default="identity")
    s.add_argument("--teacher-checkpoint", default=None)
    s.set_defaults(func=cmd_refine)

    s = add("eval", "metrics.csv: sequence,rel,delta1,rel_p,delta_p_025,n_mean_deg,n_med_deg,"
            "delta_1125,valid_count (one row per sequence, then 'all')", common)
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--align", choices=("scale-seq", "affine", "none"), default="scale-seq")
    s.add_argument("--max-depth", type=float, default=None)
    s.add_argument("--crop", default=None, help="top,bottom,left,right pixels to drop")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    tensors.set_deterministic(args.deterministic)
    torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (RuntimeError, ArithmeticError, ValueError) as e:
        print(f"failed: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
