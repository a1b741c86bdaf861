"""Time the numba kernels against the pure-numpy fallback.

Each backend runs in its own interpreter because the backend is fixed at
import time by OPHTHMAE_DISABLE_NUMBA. Outputs are compared for agreement.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys
import tempfile
import time

import numpy as np

CASES = ("gelu_forward", "gelu_grad", "resize_512_to_256", "resize_256_to_224", "vit_desk_step")


def _inputs():
    rng = np.random.default_rng(0)
    return {
        "act": rng.standard_normal((32, 65, 256)).astype(np.float32),
        "img512": rng.uniform(0, 255, (3, 512, 512)),
        "img256": rng.uniform(0, 255, (3, 256, 256)),
        "batch": rng.standard_normal((8, 3, 64, 64)).astype(np.float32),
    }


def _best(fn, repeat):
    fn()  # warm-up (includes JIT compilation on the numba path)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def worker(repeat, out_path):
    from ophthmae import _accel, kernels
    from ophthmae.classify import Classifier
    from ophthmae.vit import ViTConfig

    _accel.set_num_threads(1)
    x = _inputs()
    model = Classifier(ViTConfig.desk(), 2, "single_label", np.random.default_rng(0))
    targets = np.eye(2)[np.arange(8) % 2]

    def step():
        model.zero_grad()
        loss = model.loss(x["batch"], targets)
        loss.backward()
        return np.array([float(loss.data)])

    fns = {
        "gelu_forward": lambda: kernels.gelu_forward(x["act"]),
        "gelu_grad": lambda: kernels.gelu_grad(x["act"]),
        "resize_512_to_256": lambda: kernels.resize_cubic_float(x["img512"], 256, 256),
        "resize_256_to_224": lambda: kernels.resize_cubic_float(x["img256"], 224, 224),
        "vit_desk_step": step,
    }
    timings, outputs = {}, {}
    for name in CASES:
        timings[name], outputs[name] = _best(fns[name], repeat)
    np.savez(out_path, **outputs)
    print(json.dumps({"backend": _accel.backend_name(), "timings": timings}))


def run_backend(disable, repeat, out_path):
    env = dict(os.environ)
    env["OPHTHMAE_DISABLE_NUMBA"] = "1" if disable else "0"
    proc = subprocess.run([sys.executable, __file__, "--worker", out_path, "--repeat", str(repeat)],
                          env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--worker")
    args = ap.parse_args()
    if args.worker:
        worker(args.repeat, args.worker)
        return
    with tempfile.TemporaryDirectory() as tmp:
        paths = {b: os.path.join(tmp, f"{b}.npz") for b in ("numba", "numpy")}
        res = {"numba": run_backend(False, args.repeat, paths["numba"]),
               "numpy": run_backend(True, args.repeat, paths["numpy"])}
        if res["numba"]["backend"] != "numba":
            print("numba is not importable; both runs used the numpy path")
        a, b = np.load(paths["numba"]), np.load(paths["numpy"])
        print(f"{'case':<20}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}{'max |diff|':>14}")
        for name in CASES:
            tn, tp = res["numba"]["timings"][name], res["numpy"]["timings"][name]
            diff = float(np.max(np.abs(a[name].astype(np.float64) - b[name].astype(np.float64))))
            print(f"{name:<20}{tn * 1e3:>12.2f}{tp * 1e3:>12.2f}{tp / tn:>10.2f}{diff:>14.3e}")


if __name__ == "__main__":
    main()
