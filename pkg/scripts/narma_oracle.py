"""Standalone scalar NARMA-10 recurrence; prints the first background values.

Used to freeze the reference numbers in tests/test_datagen.py. It shares
nothing with the package except the documented seeding convention
(channel d of seed s drives from default_rng(SeedSequence([s, d]))) and a
50-step burn-in.
"""
import sys

import numpy as np


def narma10(u):
    x = [0.0] * len(u)
    for t in range(9, len(u) - 1):
        acc = 0.0
        for i in range(10):
            acc += x[t - i]
        x[t + 1] = 0.3 * x[t] + 0.05 * x[t] * acc + 1.5 * u[t - 9] * u[t] + 0.1
    return x


def main(seed=42, T=200, burn_in=50, n=5):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    u = [float(v) for v in rng.uniform(0.0, 0.5, T + burn_in)]
    x = narma10(u)[burn_in:]
    for v in x[:n]:
        print(repr(v))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 42)
