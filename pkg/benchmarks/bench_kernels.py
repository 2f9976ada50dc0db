"""Time the compiled kernels against the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--repeat 5]

Reports the best-of-``repeat`` wall time for each kernel on a few problem
sizes, then the end-to-end cost of p-value tables plus inference on
generated scenes under each backend.
"""

import argparse
import time
import warnings

import numpy as np

from confidence_energy import _kernels
from confidence_energy._kernels import _fallback
from confidence_energy.conformal import instance_p_tables
from confidence_energy.energy import EnergyParams
from confidence_energy.harness import GeneratorConfig, generate_split
from confidence_energy.inference import infer


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def count_case(rng, n_groups, group_size, n_queries):
    values = np.sort(rng.random((n_groups, group_size)), axis=1).ravel()
    offsets = np.arange(n_groups + 1, dtype=np.int64) * group_size
    groups = rng.integers(0, n_groups, n_queries).astype(np.int64)
    queries = rng.random(n_queries)
    return values, offsets, groups, queries


def argmin_case(rng, n_classes, n_rows, n_labels):
    w = rng.normal(size=(n_classes, n_labels))
    psi = rng.dirichlet(np.ones(n_labels), size=n_rows)
    nlp = -np.log(rng.uniform(1e-3, 1.0, (n_rows, n_classes, n_labels)))
    return w, psi, nlp, 1.0


def row(name, size, t_native, t_python):
    ratio = f"{t_python / t_native:6.1f}x" if t_native else "   n/a"
    native = f"{1e3 * t_native:10.3f}" if t_native else "       n/a"
    print(f"{name:<14}{size:<22}{native}{1e3 * t_python:12.3f}{ratio:>10}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    try:
        from confidence_energy._kernels import _ckernels as native
    except ImportError:
        native = None
    print(f"selected backend: {_kernels.BACKEND}")
    print(f"{'kernel':<14}{'size':<22}{'cython ms':>10}{'python ms':>12}{'speedup':>10}")

    for n_groups, size, n_q in [(24, 100, 200), (96, 1000, 5000), (96, 10000, 50000)]:
        case = count_case(rng, n_groups, size, n_q)
        t_n = best_time(lambda: native.count_geq(*case), args.repeat) if native else None
        t_p = best_time(lambda: _fallback.count_geq(*case), args.repeat)
        row("count_geq", f"{n_groups}x{size}, {n_q} q", t_n, t_p)

    for n_classes, n_rows, k in [(4, 8, 6), (8, 200, 10), (16, 5000, 32)]:
        case = argmin_case(rng, n_classes, n_rows, k)
        t_n = best_time(lambda: native.level_argmin(*case), args.repeat) if native else None
        t_p = best_time(lambda: _fallback.level_argmin(*case), args.repeat)
        row("level_argmin", f"C={n_classes}, {n_rows} rows, K={k}", t_n, t_p)

    config = GeneratorConfig(seed=0)
    evals, _, store = generate_split(config, 300, 500)
    params = EnergyParams(-3.0 * config.confusion_map, np.zeros((config.n_events, config.n_edge_labels)),
                          -3.0 * np.ones(config.n_events))

    def pipeline():
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for inst in evals:
                infer(inst, params, store, p_tables=instance_p_tables(store, inst))

    timings = {}
    for name, impl in (("cython", native), ("python", _fallback)):
        if impl is None:
            continue
        saved = _kernels.count_geq, _kernels.level_argmin
        _kernels.count_geq, _kernels.level_argmin = impl.count_geq, impl.level_argmin
        try:
            timings[name] = best_time(pipeline, args.repeat)
        finally:
            _kernels.count_geq, _kernels.level_argmin = saved
    row("end-to-end", "300 scenes", timings.get("cython"), timings["python"])


if __name__ == "__main__":
    main()
