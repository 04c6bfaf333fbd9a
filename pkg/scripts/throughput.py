"""Time scoring of one large cloud against a prebuilt N=1000 dual bank.

    PCAD_THREADS=8 python scripts/throughput.py --points 90000 --repeats 3
"""

import argparse
import os
import tempfile
import time
from pathlib import Path

from pcad.config import RunConfig
from pcad.features import extract_features
from pcad.geom import load_cloud
from pcad.scoring import DualScorer, score_features
from pcad.support import build_supports, load_bank, save_bank
from pcad.synth import ShapeSpec, SplitCounts, gen_benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--points", type=int, default=90_000)
    p.add_argument("--primitive", default="sphere")
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        m = gen_benchmark([ShapeSpec(args.primitive, args.points, 0.05)], SplitCounts(2, 1, 0), ("convex",),
                          tmp / "bench", 10)
        save_bank(build_supports(m, RunConfig()), tmp / "bank.pcad")
        path = m.resolve(m.select(split="test")[0].cloud_path)
        print(f"{args.points} points, {os.cpu_count()} cores visible, PCAD_THREADS={os.environ.get('PCAD_THREADS', '')}")
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            ds = load_bank(tmp / "bank.pcad")
            cloud = load_cloud(path)
            t1 = time.perf_counter()
            fm = extract_features(cloud, ds.cfg)
            t2 = time.perf_counter()
            score_features(cloud, fm, DualScorer(ds), ds.cfg)
            t3 = time.perf_counter()
            print(f"total {t3 - t0:.2f}s  (load {t1 - t0:.2f}s, features {t2 - t1:.2f}s, scoring {t3 - t2:.2f}s)")


if __name__ == "__main__":
    main()
