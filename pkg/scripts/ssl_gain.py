"""Multi-seed test accuracy of ssl=none / pi / te on the synthetic task.

Every mode trains for the same number of optimizer steps; only the ssl mode differs.

    python scripts/ssl_gain.py --seeds 5 --out results/ssl_gain.json
"""

import argparse
import json
import time
from dataclasses import asdict, replace
from pathlib import Path

from layerparti.experiments import SSL_GAIN, compare


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--labeled", type=int, default=40)
    ap.add_argument("--unlabeled", type=int, default=2000)
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=SSL_GAIN.epochs)
    ap.add_argument("--peak-lr", type=float, default=SSL_GAIN.peak_lr)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    base = replace(SSL_GAIN, epochs=args.epochs, peak_lr=args.peak_lr)
    t0 = time.perf_counter()
    acc = compare(range(args.seeds), base=base, n_labeled=args.labeled,
                  n_unlabeled=args.unlabeled, n_test=args.test)
    baseline = acc["none"].mean()
    print(f"{'mode':<6}{'mean':>8}{'gain':>8}   per-seed")
    for mode, vals in acc.items():
        gain = 100 * (vals.mean() - baseline)
        print(f"{mode:<6}{vals.mean():>8.4f}{gain:>+8.1f}   " + " ".join(f"{v:.3f}" for v in vals))
    print(f"{time.perf_counter() - t0:.0f}s")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps({"config": asdict(base), "accuracy": {m: v.tolist() for m, v in acc.items()}},
                                       indent=2) + "\n")


if __name__ == "__main__":
    main()
