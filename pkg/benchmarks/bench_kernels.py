"""Compare the compiled and numpy geometric kernels.

    python benchmarks/bench_kernels.py [--repeat 5] [--seed 0]

Inputs mimic one sampling generation: a few hundred scene points near the
body against a batch of candidate bodies (20 capsules each), and the
contact vertices of a body against a patch of scene points. Results of the
two backends are checked for exact agreement before timing.
"""

import argparse
import timeit

import numpy as np

from scenemocap._kernels import available_backends


def make_inputs(rng, n_points, n_bodies, n_queries, n_targets):
    pts = rng.uniform(-1.0, 1.0, (n_points, 3))
    a = rng.uniform(-0.8, 0.8, (n_bodies, 20, 3))
    b = a + rng.normal(scale=0.2, size=a.shape)
    r = rng.uniform(0.03, 0.12, (n_bodies, 20))
    q = rng.uniform(-1.0, 1.0, (n_queries, 3))
    t = rng.uniform(-1.0, 1.0, (n_targets, 3))
    return (pts, a, b, r), (q, t)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the numpy backend is available")
    rng = np.random.default_rng(args.seed)
    sizes = [
        ("capsule counts, 300 pts x 200 bodies", dict(n_points=300, n_bodies=200, n_queries=1, n_targets=1)),
        ("capsule counts, 1000 pts x 1000 bodies", dict(n_points=1000, n_bodies=1000, n_queries=1, n_targets=1)),
        ("nearest, 100 queries x 500 targets", dict(n_points=1, n_bodies=1, n_queries=100, n_targets=500)),
        ("nearest, 655 queries x 2000 targets", dict(n_points=1, n_bodies=1, n_queries=655, n_targets=2000)),
    ]
    print(f"{'case':42s}" + "".join(f"{name:>12s}" for name in sorted(backends)) + "     speedup")
    for label, kw in sizes:
        caps, near = make_inputs(rng, **kw)
        if label.startswith("capsule"):
            call = lambda k: k.capsule_inside_counts(*caps)  # noqa: E731
        else:
            call = lambda k: k.nearest_sq(*near)  # noqa: E731
        outs = {name: call(k) for name, k in backends.items()}
        ref = outs["python"]
        for name, out in outs.items():
            pairs = zip(ref, out) if isinstance(ref, tuple) else [(ref, out)]
            same = all(np.array_equal(x, y) for x, y in pairs)
            if not same:
                raise SystemExit(f"{name} disagrees with the numpy backend on {label!r}")
        times = {}
        for name, k in sorted(backends.items()):
            n = 3
            times[name] = min(timeit.repeat(lambda: call(k), number=n, repeat=args.repeat)) / n
        row = f"{label:42s}" + "".join(f"{1e3 * times[name]:10.2f}ms" for name in sorted(backends))
        if "cython" in times:
            row += f"  {times['python'] / times['cython']:9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
