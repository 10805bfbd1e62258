"""Scalar reference for the class-embedding hash/PRNG chain.

Pure-Python integers and ``math`` only, written without looking at the
vectorized implementation.  Run as a script to regenerate the golden file.
"""

import json
import math
import sys
from pathlib import Path

M64 = 2 ** 64


def fnv1a(data):
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) % M64
    return h


class Splitmix:
    def __init__(self, seed):
        self.x = seed % M64

    def next(self):
        self.x = (self.x + 0x9E3779B97F4A7C15) % M64
        z = self.x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % M64
        return z ^ (z >> 31)

    def unit(self):
        return (self.next() >> 11) / 2.0 ** 53


def embedding(name, d):
    gen = Splitmix(fnv1a(name.encode("utf-8")))
    values = []
    while len(values) < d:
        u1, u2 = gen.unit(), gen.unit()
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        values.append(r * math.cos(2.0 * math.pi * u2))
        values.append(r * math.sin(2.0 * math.pi * u2))
    values = values[:d]
    norm = math.sqrt(sum(v * v for v in values))
    return [v / norm for v in values]


if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parent.parent / "data" / "embedding_class_00_d4.json"
    payload = {"name": "class_00", "d": 4, "fnv1a": fnv1a(b"class_00"),
               "vector": [repr(v) for v in embedding("class_00", 4)]}
    out.write_text(json.dumps(payload, indent=2) + "\n")
    print(out.read_text())
