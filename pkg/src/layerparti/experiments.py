"""Multi-seed comparison of ssl modes on the synthetic task."""

from __future__ import annotations

import tempfile
from dataclasses import replace

import numpy as np

from .config import RunConfig
from .data import generate_synthetic
from .train import evaluate, train

# 2-layer / 64-dim desk model; the same iteration budget for every mode
DESK = RunConfig(n_layers=2, d_model=64, d_ff=128, n_heads=4, max_len=16)

# 40 labels give 3 optimizer steps per epoch; the default 8 epochs never revisit
# an unlabeled example, so TE would have no targets. This budget lets every
# unlabeled example be seen ~10 times. Every mode gets the same budget.
SSL_GAIN = replace(DESK, epochs=100, peak_lr=3e-3)


def run_mode(mode: str, seed: int, base: RunConfig = DESK, n_labeled: int = 40,
             n_unlabeled: int = 2000, n_test: int = 1000, data_seed: int | None = None) -> float:
    train_ds, test_ds = generate_synthetic(n_labeled, n_unlabeled, n_test,
                                           seed=seed if data_seed is None else data_seed)
    cfg = replace(base, ssl=mode, seed=seed)
    if mode == "none":
        cfg = replace(cfg, accumulation_steps=1)
    with tempfile.TemporaryDirectory() as out:
        res = train(cfg, train_ds, out)
        return evaluate(res.params, test_ds).accuracy


def compare(seeds=range(5), modes=("none", "pi", "te"), base: RunConfig = DESK, **kw) -> dict:
    return {m: np.array([run_mode(m, s, base, **kw) for s in seeds]) for m in modes}
