"""Time the compiled and numpy compositing kernels on the same scenes.

    python benchmarks/bench_kernels.py [--gaussians 2000 5000] [--size 64 128] [--repeat 3]

Reports the median forward and backward wall time per backend and the maximum
absolute difference between their outputs.
"""
import argparse
import statistics
import time

import numpy as np

from gausssurf import splat_render as sr
from gausssurf._backend import get_kernels
from gausssurf.scene_io import SyntheticSpec, make_synthetic_scene


def timed(fn, repeat):
    times, out = [], None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def available_backends():
    names = ["python"]
    try:
        get_kernels("cython")
        names.insert(0, "cython")
    except ImportError:
        print("compiled kernels not built; timing the numpy fallback only")
    return names


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gaussians", type=int, nargs="+", default=[2000, 5000])
    ap.add_argument("--size", type=int, nargs="+", default=[64, 128])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)

    backends = available_backends()
    print(f"{'gaussians':>9} {'size':>5} {'backend':>8} {'forward s':>10} {'backward s':>11} {'max |diff|':>11}")
    for n in args.gaussians:
        for size in args.size:
            scene, cams, _ = make_synthetic_scene(SyntheticSpec("sphere", {"radius": 1.0}, n_gaussians=n,
                                                                image_size=size, n_cameras=1))
            cam = cams[0]
            grad = np.random.default_rng(0).normal(size=(size, size, 3))
            ref = None
            for name in backends:
                st = sr.RenderSettings(backend=name, threads=args.threads)
                fwd, img = timed(lambda: sr.render_image(scene, cam, st), args.repeat)
                bwd, _ = timed(lambda: sr.backward_render(scene, cam, grad, st), args.repeat)
                diff = 0.0 if ref is None else float(np.abs(img - ref).max())
                ref = img if ref is None else ref
                print(f"{n:>9} {size:>5} {name:>8} {fwd:>10.4f} {bwd:>11.4f} {diff:>11.2e}")


if __name__ == "__main__":
    main()
