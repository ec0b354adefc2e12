"""Time each hot kernel under the compiled and numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from bitrom_sim import kernels


def cases(rng):
    trits = rng.integers(-1, 2, 1_000_000).astype(np.int8)
    w = rng.integers(-1, 2, (256, 2048)).astype(np.int8)
    a = rng.integers(-8, 8, 2048).astype(np.int64)
    sw = rng.integers(-1, 2, (2048, 256)).astype(np.int8)
    sa = rng.integers(-7, 8, (2048, 256)).astype(np.int64)
    return {
        "pack_two_bit 1M": lambda k: k.pack_two_bit(trits),
        "pack_base243 1M": lambda k: k.pack_base243(trits),
        "unpack_two_bit 1M": lambda k, b=kernels.pack_two_bit(trits): k.unpack_two_bit(b, trits.size),
        "unpack_base243 1M": lambda k, b=kernels.pack_base243(trits): k.unpack_base243(b, trits.size),
        "trimla_matvec 2048x256": lambda k: k.trimla_matvec(w, a, 16, 8, False),
        "prefix_overflow 2048x256": lambda k: k.prefix_overflow(sw, sa, -128, 127),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {name: kernels.load_backend(name) for name in kernels.available_backends()}
    names = list(backends)
    print(f"{'kernel':<26}" + "".join(f"{n + ' ms':>14}" for n in names) + (f"{'speedup':>10}" if len(names) == 2 else ""))
    for label, fn in cases(np.random.default_rng(0)).items():
        ms = [min(timeit.repeat(lambda: fn(backends[n]), number=1, repeat=args.repeat)) * 1e3 for n in names]
        line = f"{label:<26}" + "".join(f"{t:>14.2f}" for t in ms)
        if len(ms) == 2:
            line += f"{ms[1] / ms[0]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
