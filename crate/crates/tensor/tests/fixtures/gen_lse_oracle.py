"""Regenerates lse_oracle.json: log-sum-exp at 50 significant digits.

Inputs are not stored. Both sides rebuild them from splitmix64, mapping each
draw to ((z >> 11) * 2**-53 * 2 - 1) * magnitude + shift, which is exact or
identically rounded in any IEEE-754 double arithmetic.
"""

import json
from pathlib import Path

import mpmath

mpmath.mp.dps = 50
MASK = (1 << 64) - 1


def splitmix64(state):
    while True:
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        yield z ^ (z >> 31)


def inputs(seed, n, magnitude, shift):
    gen = splitmix64(seed)
    return [((next(gen) >> 11) * 2.0**-53 * 2.0 - 1.0) * magnitude + shift for _ in range(n)]


def oracle(xs):
    return mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(x)) for x in xs))


cases = []
seed = 1
for n in [1, 2, 3, 10, 100, 1000, 10000]:
    for magnitude, shift in [(1.0, 5.0), (100.0, 0.0), (10000.0, 0.0), (1.0, 10000.0), (1.0, -10000.0), (0.0, 7.25)]:
        lse = oracle(inputs(seed, n, magnitude, shift))
        cases.append({"seed": seed, "n": n, "magnitude": magnitude, "shift": shift, "lse": mpmath.nstr(lse, 40)})
        seed += 1

out = Path(__file__).with_name("lse_oracle.json")
out.write_text(json.dumps({"digits": mpmath.mp.dps, "cases": cases}, indent=1) + "\n")
print(f"{len(cases)} cases -> {out}")
