"""Command-line entry point: ``blursplat {synth,densify,train,render,eval}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .blurnet import BlurNetConfig, load_blurnet, render_blurred
from .densify import DensifyConfig, densify_cloud
from .losses import LossWeights
from .posekit import PoseOptions, Trajectory
from .rasterizer import RenderOptions, render
from .scene import CameraIntrinsics, CameraPose, atomic_write_bytes, load_ply, save_ply, write_pfm, write_png
from .synthbench import BlurSpec, SceneSpec, evaluate_run, generate_scene, write_dataset
from .trainer import TrainConfig, load_dataset, save_run, train_progressive

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

# config sections: key prefix -> dataclass
TRAIN_SECTIONS = {
    "train": TrainConfig,
    "densify": DensifyConfig,
    "loss": LossWeights,
    "blurnet": BlurNetConfig,
    "pose": PoseOptions,
    "render": RenderOptions,
}
SYNTH_SECTIONS = {"scene": SceneSpec, "blur": BlurSpec}
NESTED = {"render"}  # PoseOptions.render is filled from the render section


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# key = value configuration


def _coerce(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            rows = [r for r in text.split(";") if r.strip()]
            if default and isinstance(default[0], tuple):
                return tuple(tuple(float(v) for v in r.split(",")) for r in rows)
            return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def _fields(cls) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in dataclasses.fields(cls) if f.name not in NESTED}


def parse_config_text(text: str, sections: dict) -> dict[str, dict]:
    """Parse ``section.key = value`` lines into per-section override dicts."""
    out: dict[str, dict] = {name: {} for name in sections}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        _apply(out, sections, key, value)
    return out


def _apply(out: dict, sections: dict, key: str, value: str) -> None:
    section, _, name = key.partition(".")
    if section not in sections or not name:
        raise UsageError(f"unknown config key {key!r}; keys look like <section>.<field> with "
                         f"section in {sorted(sections)}")
    defaults = _fields(sections[section])
    if name not in defaults:
        raise UsageError(f"unknown config key {key!r}")
    out[section][name] = _coerce(value, defaults[name], key)


def build_configs(sections: dict, config_file: str | None, overrides: list[str]) -> dict:
    values = {name: {} for name in sections}
    if config_file:
        try:
            text = Path(config_file).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        values = parse_config_text(text, sections)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _apply(values, sections, key.strip(), value)
    try:
        built = {name: cls(**values[name]) for name, cls in sections.items() if name not in NESTED}
        if "render" in sections:
            built["render"] = RenderOptions(**values["render"])
            built["pose"] = dataclasses.replace(built["pose"], render=built["render"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return built


def config_help(sections: dict) -> str:
    lines = ["configuration keys (config file 'key = value' lines or --set key=value):"]
    for name, cls in sections.items():
        for key, default in _fields(cls).items():
            lines.append(f"  {name}.{key} = {default}")
    return "\n".join(lines)


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [_jsonable(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# manifest, logging, threads


def _versions() -> dict:
    import numba
    import scipy

    return {"blursplat": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def write_manifest(path: Path, command: str, argv: list[str], config: dict, seed: int | None) -> None:
    cfg = _jsonable(config)
    blob = json.dumps(cfg, sort_keys=True).encode()
    manifest = {
        "command": command,
        "argv": argv,
        "config": cfg,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
        "versions": _versions(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    atomic_write_bytes(path, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())


class JsonlLog:
    def __init__(self, path: Path | None, quiet: bool = False):
        self.fh = open(path, "a") if path is not None else None
        self.quiet = quiet

    def __call__(self, rec: dict) -> None:
        if self.fh is not None:
            self.fh.write(json.dumps({"time": round(time.time(), 3), **rec}, sort_keys=True) + "\n")
            self.fh.flush()
        if not self.quiet:
            msg = " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items())
            print(msg, file=sys.stderr)

    def close(self):
        if self.fh is not None:
            self.fh.close()


def apply_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get("BLURSPLAT_THREADS")
        if not env:
            return
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"BLURSPLAT_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = build_configs(SYNTH_SECTIONS, args.spec, args.set)
    scene_spec = cfg["scene"]
    if args.seed is not None:
        scene_spec = dataclasses.replace(scene_spec, seed=args.seed)
    out = Path(args.out)
    write_dataset(generate_scene(scene_spec), cfg["blur"], out, with_sparse=not args.no_sparse)
    write_manifest(out / "manifest.json", "synth", args.argv, {"scene": scene_spec, "blur": cfg["blur"]},
                   scene_spec.seed)
    print(f"wrote dataset to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_densify(args) -> int:
    cfg = DensifyConfig(n_new=args.n_new, k=args.k, dist_threshold=args.dist_threshold, seed=args.seed)
    sparse = load_ply(args.inp)
    dense = densify_cloud(sparse, cfg)
    save_ply(dense, args.out)
    write_manifest(Path(str(args.out) + ".manifest.json"), "densify", args.argv, cfg, cfg.seed)
    print(f"{len(sparse)} -> {len(dense)} Gaussians", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_configs(TRAIN_SECTIONS, args.config, args.set)
    if args.seed is not None:
        cfg["train"] = dataclasses.replace(cfg["train"], seed=args.seed)
        cfg["densify"] = dataclasses.replace(cfg["densify"], seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(args.dataset)
    log = JsonlLog(Path(args.log_file) if args.log_file else out / "log.jsonl", quiet=args.quiet)
    try:
        result = train_progressive(data, None, cfg["train"], cfg["loss"], cfg["densify"], cfg["blurnet"],
                                   cfg["render"], cfg["pose"], log_fn=log, dump_dir=out)
    finally:
        log.close()
    save_run(result, out)
    write_manifest(out / "manifest.json", "train", args.argv, cfg, cfg["train"].seed)
    if result.pose_failures:
        print(f"pose estimation diverged on frames {result.pose_failures}", file=sys.stderr)
    return EXIT_OK


def cmd_render(args) -> int:
    if (args.pose is None) == (args.traj is None):
        raise UsageError("render: give exactly one of --pose or --traj")
    cloud = load_ply(args.cloud)
    intr = CameraIntrinsics.from_dict(json.loads(Path(args.intr).read_text()))
    net = load_blurnet(args.blurnet) if args.blurnet else None

    def draw(pose):
        return render_blurred(cloud, net, pose, intr) if net is not None else render(cloud, pose, intr)

    out = Path(args.out)
    if args.pose is not None:
        # single view: --out is the PNG path, --depth the PFM path
        r = draw(CameraPose.from_dict(json.loads(Path(args.pose).read_text())))
        out.parent.mkdir(parents=True, exist_ok=True)
        write_png(out, r.color)
        if args.depth == "":
            raise UsageError("render: --depth needs a PFM path together with --pose")
        if args.depth is not None:
            write_pfm(args.depth, r.depth)
        return EXIT_OK
    traj = Trajectory.load(args.traj)
    frames = [args.frame] if args.frame is not None else traj.frame_ids
    index = {f: i for i, f in enumerate(traj.frame_ids)}
    out.mkdir(parents=True, exist_ok=True)
    for f in frames:
        if f not in index:
            raise KeyError(f"frame {f} not in trajectory")
        r = draw(traj.poses[index[f]])
        write_png(out / f"{f:05d}.png", r.color)
        if args.depth is not None:
            write_pfm(out / f"{f:05d}.pfm", r.depth)
    write_manifest(out / "manifest.json", "render", args.argv, {"frames": frames, "blurred": net is not None},
                   None)
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate_run(args.run, args.gt)
    out = Path(args.out) if args.out else Path(args.run) / "report.json"
    atomic_write_bytes(out, (json.dumps(report, indent=1, sort_keys=True) + "\n").encode())
    summary = {k: report[k] for k in ("psnr_sharp_mean", "psnr_blurry_mean", "ate", "rpe_t", "rpe_r")}
    print(json.dumps(summary), file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="blursplat", description="Deblurring Gaussian splatting with SfM-free camera tracking.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="cap on worker threads (fallback: BLURSPLAT_THREADS)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic blurry dataset",
                       epilog=config_help(SYNTH_SECTIONS), formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--spec", help="key = value scene/blur spec file")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one spec key")
    s.add_argument("--no-sparse", action="store_true", help="omit sparse.ply (trainer bootstraps from depth)")
    s.set_defaults(func=cmd_synth)

    d = sub.add_parser("densify", help="densify a sparse PLY cloud")
    d.add_argument("--in", dest="inp", required=True, help="sparse input PLY")
    d.add_argument("--out", required=True, help="dense output PLY")
    d.add_argument("--n-new", type=int, default=DensifyConfig.n_new, help="candidates per point (default %(default)s)")
    d.add_argument("--k", type=int, default=DensifyConfig.k, help="neighbours per box (default %(default)s)")
    d.add_argument("--t-d", "--dist-threshold", dest="dist_threshold", type=float, default=DensifyConfig.dist_threshold,
                   help="rejection distance (default %(default)s)")
    d.add_argument("--seed", type=int, default=DensifyConfig.seed)
    d.set_defaults(func=cmd_densify)

    t = sub.add_parser("train", help="progressive deblurring and tracking",
                       epilog=config_help(TRAIN_SECTIONS), formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--dataset", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--seed", type=int, default=None, help="overrides train.seed and densify.seed")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--log-file", help="JSON-lines log (default: <out>/log.jsonl)")
    t.add_argument("--quiet", action="store_true", help="no progress on stderr")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a cloud along a trajectory")
    r.add_argument("--cloud", required=True)
    r.add_argument("--pose", help="single pose JSON (then --out is a PNG path)")
    r.add_argument("--traj", help="trajectory JSONL (then --out is a directory)")
    r.add_argument("--intr", required=True, help="intrinsics JSON")
    r.add_argument("--out", required=True, help="PNG path or output directory")
    r.add_argument("--frame", type=int, default=None, help="render only this frame id of --traj")
    r.add_argument("--blurnet", help="render the blurred image with this checkpoint")
    r.add_argument("--depth", nargs="?", const="", default=None, metavar="PFM",
                   help="also write depth: a PFM path with --pose, per-frame files with --traj")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score a run against ground truth")
    e.add_argument("--run", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", help="report path (default: <run>/report.json)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("blursplat: a subcommand is required")
        apply_threads(args.threads)
        args.argv = argv
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to one exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
