#!/usr/bin/env python3
"""Wall-clock scaling of one token-mixer forward pass.

Times a warm, single-threaded ``mixer_forward`` at several feature-map sides
and reports the growth factor per doubling of the token count N:
    uv run python scripts/bench_mixer.py
    uv run python scripts/bench_mixer.py --sides 28,56,112 --check

With ``--check`` the script exits 1 when any growth factor exceeds
MAX_GROWTH. This is a benchmark, not part of the test suite.
"""

import argparse
import math
import os
import sys
import time

# must be set before vik reads it at import time
os.environ.setdefault("VIK_THREADS", "1")

CONFIG = os.environ.get("BENCH_CONFIG", "vik-small")
REPEATS = int(os.environ.get("BENCH_REPEATS", "3"))
MAX_GROWTH = 2.5


def main(argv: list[str] | None = None) -> int:
    import numpy as np

    from vik.config import load_config
    from vik.mixer import TokenMixer, mixer_forward

    parser = argparse.ArgumentParser(description="Time mixer_forward against the token count.")
    parser.add_argument("--sides", default="56,112,224")
    parser.add_argument("--stage", type=int, default=1)
    parser.add_argument("--check", action="store_true", help=f"fail if growth per 2x N exceeds {MAX_GROWTH}")
    args = parser.parse_args(argv)

    config = load_config(CONFIG).model
    cfg = config.mixer_config(args.stage - 1)
    sides = [int(s) for s in args.sides.split(",")]
    rng = np.random.default_rng(0)

    timings = []
    for side in sides:
        n = side * side
        mixer = TokenMixer(cfg, n, rng)
        x = rng.standard_normal((1, cfg.channels, side, side)).astype(np.float32)
        mixer_forward(x, mixer)  # warm-up
        best = math.inf
        for _ in range(REPEATS):
            start = time.perf_counter()
            mixer_forward(x, mixer)
            best = min(best, time.perf_counter() - start)
        timings.append((side, n, best))
        print(f"side {side:>4}  N {n:>6}  {best * 1e3:9.2f} ms")

    worst = 0.0
    for (_, n0, t0), (side, n1, t1) in zip(timings, timings[1:]):
        growth = (t1 / t0) ** (math.log(2) / math.log(n1 / n0))
        worst = max(worst, growth)
        print(f"growth per 2x N up to side {side}: {growth:.2f}")

    threads = os.environ["VIK_THREADS"]
    print(f"C={cfg.channels} p={cfg.patch} r={cfg.rank} threads={threads} worst growth {worst:.2f}")
    if args.check and worst > MAX_GROWTH:
        print(f"FAIL: growth {worst:.2f} exceeds {MAX_GROWTH}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
