"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on inputs of the size a fit actually sees (24 joints,
~1.5k surface samples, ~100 LiDAR returns, a 60x90 LiDAR ray grid). The
end-to-end row times one energy+gradient evaluation in a subprocess per
backend, since the backend is chosen at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from pedfit import _kernels_py as py
from pedfit.body_model import (BodyParams, _rest_offsets, capsules, default_template, forward_kinematics,
                               shape_skeleton)
from pedfit.stereo import StereoRig
from pedfit.synth import simulate_lidar

try:
    from pedfit import _kernels as cy
except ImportError:
    cy = None

E2E = """
import timeit, numpy as np
from pedfit import kernels, synth, energies, body_model, stereo
T = body_model.default_template(64)
rig = stereo.StereoRig.default()
s = synth.make_scene(synth.SceneSpec(n_frames=1), T, seed=0)
p = s.gt[0].copy(); p.pose += 0.01
w = energies.EnergyWeights()
f = lambda: energies.e_total(p, s.frames[0], rig, None, w, T)
print(kernels.BACKEND, min(timeit.repeat(f, number=20, repeat={repeat})) / 20)
"""


def inputs():
    rng = np.random.default_rng(0)
    T = default_template(64)
    p = BodyParams.zeros(T.n_shape)
    p.pose = rng.normal(0, 0.2, 72)
    p.translation = np.array([0.0, 0.0, 20.0])
    body = forward_kinematics(T, p)
    joints, _ = shape_skeleton(T, p.shape)
    offs = _rest_offsets(T, joints)
    origin = StereoRig.default().lidar_origin
    cloud = simulate_lidar(p, T, origin).points
    a, b, r = capsules(T, p, body)
    az = np.radians(np.linspace(-3, 3, 90))
    el = np.radians(np.linspace(-8, 2, 60))
    AZ, EL = np.meshgrid(az, el, indexing="ij")
    dirs = np.stack([np.cos(EL) * np.sin(AZ), np.sin(EL), np.cos(EL) * np.cos(AZ)], -1).reshape(-1, 3)
    attach = T._surface["attach"]
    g = rng.normal(size=body.surface_points.shape)
    return {
        "posed_chain": (p.pose.reshape(24, 3), offs, T.parents, p.translation),
        "chain_gradient": (attach, body.surface_points, g, body.joint_positions, body.axes, T.parents),
        "nearest_facing": (cloud, body.surface_points, body.surface_normals, origin, True),
        "ray_capsules": (origin, dirs, a, b, r),
    }


def bench(fn, args, repeat):
    number = 5
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':<16}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, a in inputs().items():
        tp = bench(getattr(py, name), a, args.repeat)
        if cy is None:
            print(f"{name:<16}{tp * 1e3:>12.3f}{'n/a':>12}{'':>10}")
            continue
        tc = bench(getattr(cy, name), a, args.repeat)
        print(f"{name:<16}{tp * 1e3:>12.3f}{tc * 1e3:>12.3f}{tp / tc:>9.1f}x")
    times = {}
    for env in ({"PEDFIT_PURE_PYTHON": "1"}, {"PEDFIT_PURE_PYTHON": ""}):
        out = subprocess.run([sys.executable, "-c", E2E.format(repeat=args.repeat)], capture_output=True,
                             text=True, env={**os.environ, **env}, check=True).stdout.split()
        times[out[0]] = float(out[1])
    line = f"{'e_total':<16}{times['python'] * 1e3:>12.3f}"
    if "cython" in times:
        line += f"{times['cython'] * 1e3:>12.3f}{times['python'] / times['cython']:>9.1f}x"
    print(line)


if __name__ == "__main__":
    main()
