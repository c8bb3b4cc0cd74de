"""Acceptance suite: one test per criterion, each recorded for the terminal summary."""

import math
import tempfile
import time
from dataclasses import replace

import numpy as np
import pytest

from layerparti import tensor as T
from layerparti.data import generate_synthetic
from layerparti.experiments import DESK, SSL_GAIN, compare
from layerparti.model import ModelConfig, forward, forward_features, forward_head, init_model
from layerparti.optim import LrSchedule, lr_at
from layerparti.partition import frozen_parameter_digest
from layerparti.ssl import ConsistencySchedule, TemporalEnsemble, consistency_weight, te_target, te_update
from layerparti.tensor import Rng
from layerparti.train import Trainer, train

from conftest import gradcheck, record_acceptance
from test_data import batch_composition_violations
from test_model import SMALL, end_to_end_gradient_error, make_batch
from test_optim import accumulation_max_deviation
from test_tensor import weighted_sum


def _u(shape, seed):
    return np.random.default_rng(seed).uniform(-1, 1, shape)


OP_CASES = {
    "add": (lambda ts: weighted_sum(ts[0] + ts[1]), [(3, 4), (4,)]),
    "neg/sub": (lambda ts: weighted_sum(ts[0] - ts[1]), [(3, 4), (3, 4)]),
    "mul": (lambda ts: weighted_sum(ts[0] * ts[1]), [(3, 4), (3, 1)]),
    "scale": (lambda ts: weighted_sum(ts[0] * 0.37), [(3, 4)]),
    "matmul": (lambda ts: weighted_sum(ts[0] @ ts[1]), [(2, 3, 4), (4, 5)]),
    "batched matmul": (lambda ts: weighted_sum(ts[0] @ ts[1]), [(2, 3, 4), (2, 4, 5)]),
    "sum": (lambda ts: weighted_sum(ts[0].sum(axis=1)), [(3, 4, 2)]),
    "mean": (lambda ts: ts[0].mean() * 3.0, [(3, 4)]),
    "reshape/transpose": (lambda ts: weighted_sum(ts[0].transpose(1, 0, 2).reshape(4, 6)), [(2, 4, 3)]),
    "getitem": (lambda ts: weighted_sum(ts[0][:, 0]), [(3, 4, 2)]),
    "gelu": (lambda ts: weighted_sum(T.gelu(ts[0])), [(4, 5)]),
    "softmax": (lambda ts: weighted_sum(T.softmax(ts[0])), [(3, 5)]),
    "log_softmax": (lambda ts: weighted_sum(T.log_softmax(ts[0])), [(3, 5)]),
    "layer_norm": (lambda ts: weighted_sum(T.layer_norm(ts[0], ts[1], ts[2])), [(2, 3, 6), (6,), (6,)]),
    "embedding": (lambda ts: weighted_sum(T.embedding(ts[0], np.array([[0, 2], [2, 1]]))), [(4, 3)]),
    "dropout (fixed mask)": (lambda ts: weighted_sum(T.dropout(ts[0], 0.4, Rng(3), True)), [(4, 6)]),
    "cross_entropy": (lambda ts: T.cross_entropy(ts[0], [0, 2, 1, 2]), [(4, 3)]),
    "mse": (lambda ts: T.mse(ts[0], np.full((3, 4), 0.2)), [(3, 4)]),
}


def test_1_gradient_correctness():
    start = time.perf_counter()
    per_op = {name: gradcheck(fn, [_u(s, i) for i, s in enumerate(shapes)])
              for name, (fn, shapes) in OP_CASES.items()}
    worst_op = max(per_op, key=per_op.get)
    e2e = max(end_to_end_gradient_error(SMALL, seed=0),
              end_to_end_gradient_error(SMALL, seed=1, training=True))
    elapsed = time.perf_counter() - start
    ok = per_op[worst_op] < 1e-3 and e2e < 1e-2 and elapsed < 60
    record_acceptance(1, "gradient correctness", ok,
                      f"worst op {worst_op} {per_op[worst_op]:.2e} (<1e-3), end-to-end {e2e:.2e} (<1e-2), "
                      f"{elapsed:.1f}s")
    assert ok, per_op


def te_brute_force(zs, alpha):
    n = len(zs)
    return sum((1 - alpha) * alpha ** (n - j) / (1 - alpha ** n) * np.asarray(z, np.float64)
               for j, z in enumerate(zs, start=1))


def test_2_temporal_ensembling_oracle():
    r = np.random.default_rng(2024)
    worst = 0.0
    for case in range(200):
        length = 1 if case == 0 else int(r.integers(1, 21))
        k = int(r.integers(2, 7))
        alpha = [0.3, 0.6, 0.9][case % 3]
        zs = r.dirichlet(np.ones(k), size=length)
        te = TemporalEnsemble(1, k, alpha)
        for z in zs:
            te_update(te, 0, z)
        worst = max(worst, float(np.abs(te_target(te, 0) - te_brute_force(zs, alpha)).max()))
    te = TemporalEnsemble(1, 3, 0.6)
    z1 = np.array([0.2, 0.5, 0.3])
    te_update(te, 0, z1)
    identity = float(np.abs(te_target(te, 0) - z1).max())
    ok = worst < 1e-5 and identity < 1e-6
    record_acceptance(2, "temporal-ensembling oracle", ok,
                      f"max deviation {worst:.1e} over 200 sequences (<1e-5), T=1 identity {identity:.1e}")
    assert ok


def test_3_freeze_guarantee():
    data, _ = generate_synthetic(40, 2000, 0, seed=0)
    trainer = Trainer(replace(DESK, epochs=25), data, tempfile.mkdtemp())
    state = trainer.partition
    f_groups = [0, 1]
    assert state.frozen_groups == f_groups
    ref = frozen_parameter_digest(trainer.params, state, f_groups)
    digests = []
    trainer.run(on_step=lambda t, tr: digests.append(frozen_parameter_digest(tr.params, state, f_groups)))
    thr = state.unfreeze_from  # first step at which group 1 is released
    stable = sum(d == ref for d in digests[:thr + 1])
    changed_at = next((t for t in range(thr + 1, len(digests)) if digests[t] != ref), None)
    ok = thr + 1 >= 50 and stable == thr + 1 and changed_at is not None and changed_at - thr <= 5
    record_acceptance(3, "freeze guarantee", ok,
                      f"digest unchanged for {stable} steps (>=50), unfreeze at t={thr}, "
                      f"changed at t={changed_at}")
    assert ok


def w_oracle(t, n):
    t_up, t_down = 0.25 * n, 0.85 * n
    if t < t_up:
        return 10 * math.exp(-5 * (1 - t / t_up) ** 2)
    if t < t_down:
        return 10.0
    return 10 * math.exp(-12.5 * ((t - t_down) / (n - t_down)) ** 2)


def test_4_schedule_exactness():
    n = 10_000
    ts = np.random.default_rng(4).integers(0, n, 1000)
    ws, lrs = ConsistencySchedule(n), LrSchedule(1e-3, n)
    w_err = max(abs(consistency_weight(ws, int(t)) - w_oracle(int(t), n)) for t in ts)
    lr_err = max(abs(lr_at(lrs, int(t)) - (1e-3 * t / 1000 if t < 1000 else 1e-3 * (n - t) / 9000))
                 for t in ts)
    w0, w_up = consistency_weight(ws, 0), consistency_weight(ws, 2500)
    ok = w_err < 1e-6 and lr_err < 1e-6 and abs(w0 - 10 * math.exp(-5)) < 1e-6 and w_up == 10.0
    record_acceptance(4, "schedule exactness", ok,
                      f"w err {w_err:.1e}, lr err {lr_err:.1e} (<1e-6), w(0)={w0:.6f}, w(t_up)={w_up}")
    assert ok


def test_5_batch_composition():
    checked, bad = batch_composition_violations(1000)
    ok = bad == 0 and checked > 900
    record_acceptance(5, "batch composition 4 labeled + 12 unlabeled", ok,
                      f"{checked} non-boundary batches, {bad} violations")
    assert ok


def test_6_determinism(tmp_path):
    data, _ = generate_synthetic(40, 2000, 0, seed=0)
    cfg = replace(DESK, ssl="te", epochs=8)
    start = time.perf_counter()
    a = train(cfg, data, tmp_path / "a").metrics_path.read_bytes()
    b = train(cfg, data, tmp_path / "b").metrics_path.read_bytes()
    elapsed = time.perf_counter() - start
    ok = a == b and elapsed < 600
    record_acceptance(6, "determinism", ok,
                      f"metrics {'byte-identical' if a == b else 'DIFFER'} ({len(a)} bytes), {elapsed:.1f}s")
    assert ok


@pytest.mark.slow
def test_7_ssl_gain():
    start = time.perf_counter()
    acc = compare(seeds=range(5), base=SSL_GAIN)
    elapsed = time.perf_counter() - start
    mean = {m: float(v.mean()) for m, v in acc.items()}
    gain_te, gain_pi = mean["te"] - mean["none"], mean["pi"] - mean["none"]
    ok = gain_te >= 0.02 and gain_pi >= 0.02
    record_acceptance(7, "SSL gain over supervised baseline", ok,
                      f"none {mean['none']:.4f}, pi {mean['pi']:.4f} (+{100 * gain_pi:.1f}), "
                      f"te {mean['te']:.4f} (+{100 * gain_te:.1f}) points, {elapsed:.0f}s")
    assert ok, {m: v.tolist() for m, v in acc.items()}


def test_8_accumulation_equivalence():
    dev = accumulation_max_deviation(n_steps=20)
    ok = dev < 1e-5
    record_acceptance(8, "accumulation equivalence", ok, f"max parameter gap {dev:.1e} over 20 steps (<1e-5)")
    assert ok


def test_9_composition_identity():
    worst = 0.0
    configs = [SMALL, ModelConfig(**{**SMALL.to_dict(), "n_layers": 4})]
    for cfg in configs:
        params = init_model(cfg, Rng(9))
        batch = make_batch(seed=9, b=4)
        whole = forward(params, batch).data
        for level in (0, 1, cfg.n_layers):
            split = forward_head(params, forward_features(params, batch, level, Rng(0), False),
                                 level, Rng(0), False).data
            worst = max(worst, float(np.abs(split - whole).max()))
    ok = worst < 1e-6
    record_acceptance(9, "composition identity U(F(x)) == M(x)", ok,
                      f"max gap {worst:.1e} for l in {{0, 1, n_layers}} (<1e-6)")
    assert ok
