"""Compare the compiled and numpy triangle rasterizers on synthetic renders.

    python benchmarks/bench_raster.py [--repeat N]
"""

import argparse
import time

import numpy as np

from mvpose import _kernels
from mvpose._raster_py import rasterize_screen_triangles as python_kernel
from mvpose.render import screen_triangles
from mvpose.shapes import instrument_mesh, sphere_mesh
from mvpose.synth import SceneSpec, generate_synthetic_scene


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    scene = generate_synthetic_scene(SceneSpec(seed=0, with_features=False))
    cam = scene.cameras[0]
    pose = scene.gt_poses[0]
    cases = {
        f"instrument, {len(instrument_mesh().triangles)} tris": instrument_mesh(),
        "sphere r=50, 1280 tris": sphere_mesh(50.0, 3),
        "sphere r=50, 5120 tris": sphere_mesh(50.0, 4),
    }
    print(f"compiled backend available: {_kernels.BACKEND == 'cython'}")
    print(f"{'case':40s} {'python ms':>10s} {'compiled ms':>12s} {'speedup':>8s}  identical")
    for name, mesh in cases.items():
        tris = np.ascontiguousarray(screen_triangles(mesh, cam, pose))
        tp, ref = best_of(lambda: python_kernel(tris, cam.width, cam.height), args.repeat)
        if _kernels.BACKEND == "cython":
            tc, out = best_of(lambda: _kernels.rasterize_screen_triangles(tris, cam.width, cam.height), args.repeat)
            same = np.array_equal(out, ref)
            print(f"{name:40s} {tp * 1e3:10.2f} {tc * 1e3:12.3f} {tp / tc:8.1f}  {same}")
        else:
            print(f"{name:40s} {tp * 1e3:10.2f} {'n/a':>12s} {'n/a':>8s}  n/a")


if __name__ == "__main__":
    main()
