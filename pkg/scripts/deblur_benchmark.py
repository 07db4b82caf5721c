"""Run the synthetic deblur + tracking benchmark and print its report.

    python scripts/deblur_benchmark.py --workdir /tmp/bench
    python scripts/deblur_benchmark.py --magnitude 0.05 --l-pos 10 --json report.json
"""
import argparse
import json
from dataclasses import replace

from blursplat.benchmark import BenchmarkConfig, run_benchmark


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--workdir", default="bench_out")
    ap.add_argument("--magnitude", type=float, default=0.1, help="exposure path length in world units")
    ap.add_argument("--l-pos", type=int, default=None, help="position encoding frequencies of the blur model")
    ap.add_argument("--seed", type=int, default=0, help="training seed")
    ap.add_argument("--straight", action="store_true", help="use a nearly straight camera path instead of the arc")
    ap.add_argument("--json", help="write the report here")
    args = ap.parse_args()

    cfg = BenchmarkConfig()
    cfg = replace(cfg, blur=replace(cfg.blur, magnitude=args.magnitude), train=replace(cfg.train, seed=args.seed))
    if args.l_pos is not None:
        cfg = replace(cfg, net=replace(cfg.net, l_pos=args.l_pos))
    if args.straight:
        cfg = replace(cfg, scene=replace(cfg.scene, waypoints=((-0.45, 0.0, -2.0), (0.0, 0.03, -2.0), (0.45, 0.0, -2.0))))

    def log(rec):
        if rec["iter"] % 250 == 0:
            print(f"iter {rec['iter']:5d} frame {rec['frame']} {rec['phase']:7s} "
                  f"loss {rec['loss']:.4f} psnr {rec['psnr']:.2f} n {rec['n_gaussians']}", flush=True)

    rep = run_benchmark(cfg, args.workdir, log)
    print(f"sharp render PSNR {rep['psnr_sharp_mean']:.2f} dB, blurry input {rep['psnr_blurry_mean']:.2f} dB "
          f"(gain {rep['psnr_gain']:+.2f})")
    print(f"ATE {rep['ate']:.4f} ({100 * rep['ate_fraction']:.2f}% of arc), RPE_t {rep['rpe_t']:.4f}, "
          f"RPE_r {rep['rpe_r']:.3f} deg")
    print(f"{rep['iterations']} iterations in {rep['seconds']:.0f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rep, fh, indent=1)


if __name__ == "__main__":
    main()
