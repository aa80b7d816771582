"""Time the numpy and numba kernel paths at desk-scale shapes.

    python benchmarks/bench_kernels.py [--repeat 7] [--steps 200]

Per-kernel timings call both implementations in-process. The end-to-end
row runs ``--steps`` training steps in a subprocess per backend, since the
backend is fixed at import time by ``SPARSECL_DISABLE_NUMBA``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from sparsecl import _kernels
from sparsecl.rng import SeededRng
from sparsecl.trainer import TrainConfig

STEP_SNIPPET = """
import time
from sparsecl.trainer import Problem, ScheduleState, STAGE_I, TrainConfig, sgd_step
from sparsecl.network import InitConfig, init_params
from sparsecl.rng import SeededRng
cfg = TrainConfig(total_steps={steps})
problem = Problem.from_config(cfg)
params = init_params(cfg.m, cfg.d1, InitConfig(cfg.sigma0_sq), SeededRng(0, 1))
sched = ScheduleState(step=0, stage=STAGE_I, prev_norm=params.row_norms())
sgd_step(params, cfg, sched, problem)  # warm-up and JIT
t0 = time.perf_counter()
while sched.step < cfg.total_steps:
    sgd_step(params, cfg, sched, problem)
print((time.perf_counter() - t0) / (cfg.total_steps - 1))
"""


def kernel_inputs(cfg):
    r = SeededRng(0, 0)
    k, s, m = cfg.k_batches, cfg.n_negatives, cfg.m
    # one step draws K (1 + S) inputs of d1 normals, i.e. this many words
    raw = r.raw(cfg.k_batches * (1 + cfg.n_negatives) * cfg.d1)
    u = r.normal((k * (s + 2), m))
    b = np.abs(r.normal((m,))) * 0.1
    fp, active = _kernels.numpy_kernels["soft_threshold"](u[:k], b)
    fpp = u[k : 2 * k]
    fn = u[2 * k :].reshape(k, s, m)
    return {
        "box_muller": (raw,),
        "soft_threshold": (u, b),
        "contrastive_terms": (fp, fpp, fn, active, cfg.tau),
    }


def best_of(fn, args, repeat):
    fn(*args)
    number = max(1, int(0.05 / max(timeit.timeit(lambda: fn(*args), number=1), 1e-7)))
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def step_time(disable, steps):
    env = dict(os.environ, SPARSECL_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args(argv)
    cfg = TrainConfig()
    inputs = kernel_inputs(cfg)
    print(f"shapes: d={cfg.d} d1={cfg.d1} m={cfg.m} K={cfg.k_batches} S={cfg.n_negatives}")
    print(f"{'kernel':<20}{'numpy (us)':>12}{'numba (us)':>12}{'speedup':>9}")
    have_nb = bool(_kernels.numba_kernels)
    for name, fn_args in inputs.items():
        t_np = best_of(_kernels.numpy_kernels[name], fn_args, args.repeat)
        if have_nb:
            t_nb = best_of(_kernels.numba_kernels[name], fn_args, args.repeat)
            print(f"{name:<20}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.2f}")
        else:
            print(f"{name:<20}{t_np * 1e6:>12.1f}{'n/a':>12}{'':>9}")
    t_np = step_time(True, args.steps)
    row = f"{'sgd_step':<20}{t_np * 1e6:>12.1f}"
    if have_nb:
        t_nb = step_time(False, args.steps)
        row += f"{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.2f}"
    print(row)


if __name__ == "__main__":
    main()
