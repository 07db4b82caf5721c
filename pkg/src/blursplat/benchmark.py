"""The desk-scale deblurring benchmark: synthesize, train, evaluate.

``run_benchmark`` writes a dataset and a run directory under ``workdir`` and
returns the evaluation report plus wall time, iteration count and arc length.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .blurnet import BlurNetConfig
from .densify import DensifyConfig
from .posekit import PoseOptions
from .synthbench import BlurSpec, SceneSpec, evaluate_run, generate_scene, write_dataset
from .trainer import TrainConfig, load_dataset, save_run, train_progressive


def benchmark_train_config() -> TrainConfig:
    return TrainConfig(
        frame0_iters=300,
        window_iters=200,
        global_iters=100,
        final_iters=600,
        densify_start_iter=500,
        densify_stop_iter=2000,
        init_scale_factor=0.3,
        constant_velocity_init=True,
        log_every=50,
    )


@dataclass(frozen=True)
class BenchmarkConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    blur: BlurSpec = field(default_factory=BlurSpec)
    sparse_fraction: float = 1.0
    densify: DensifyConfig = field(default_factory=lambda: DensifyConfig(n_new=0))
    train: TrainConfig = field(default_factory=benchmark_train_config)
    net: BlurNetConfig = field(default_factory=BlurNetConfig)
    pose: PoseOptions = field(default_factory=PoseOptions)


def run_benchmark(cfg: BenchmarkConfig, workdir, log_fn: Callable[[dict], None] | None = None) -> dict:
    work = Path(workdir)
    t0 = time.perf_counter()
    scene = generate_scene(cfg.scene)
    write_dataset(scene, cfg.blur, work / "data", sparse_fraction=cfg.sparse_fraction)
    result = train_progressive(load_dataset(work / "data"), cfg=cfg.train, densify_cfg=cfg.densify,
                               net_cfg=cfg.net, pose_opts=cfg.pose, log_fn=log_fn)
    save_run(result, work / "run")
    report = evaluate_run(work / "run", work / "data")
    report["seconds"] = time.perf_counter() - t0
    report["iterations"] = result.iterations
    report["pose_failures"] = result.pose_failures
    report["psnr_gain"] = report["psnr_sharp_mean"] - report["psnr_blurry_mean"]
    report["ate_fraction"] = report["ate"] / report["arc_length"]
    return report
