"""The layer-partitioned semi-supervised training loop, evaluation and schedule export."""

from __future__ import annotations

import json
import logging
import math
import shutil
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import BatchSampler, Dataset, Vocab, iter_batches, labeled_per_batch, load_tsv
from .errors import ConfigError, InvariantViolation, VocabMismatchError
from .model import ParameterStore, forward_features, forward_head, init_model, predict
from .optim import Accumulator, Adam, LrSchedule, lr_at
from .partition import (PartitionState, apply_partition, frozen_parameter_digest,
                        make_partition, step_unfreeze)
from .ssl import (ConsistencySchedule, TemporalEnsemble, combined_loss, consistency_weight,
                  pi_targets)
from .tensor import Rng

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "epoch", "lr", "w", "loss_ce", "loss_consist", "loss",
                  "frozen_groups")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


@dataclass
class Plan:
    """Iteration budget derived from the config and the data."""

    labeled_frac: float
    labeled_per_step: int
    steps_per_epoch: int
    max_iterations: int


def plan_iterations(cfg: RunConfig, n_labeled: int, has_unlabeled: bool) -> Plan:
    frac = cfg.labeled_frac if has_unlabeled else 1.0
    per_step = labeled_per_batch(cfg.batch_size, frac) * cfg.accumulation_steps
    spe = max(1, math.ceil(n_labeled / per_step))
    return Plan(frac, per_step, spe, cfg.epochs * spe)


def data_signature(ds: Dataset) -> dict:
    return {"n_examples": len(ds), "n_labeled": int(ds.labeled_indices.size),
            "n_classes": ds.n_classes, "vocab": ds.vocab.fingerprint()}


@dataclass
class TrainResult:
    params: ParameterStore
    partition: PartitionState
    config: RunConfig
    plan: Plan
    out_dir: Path
    metrics_path: Path
    checkpoint_path: Path


class Trainer:
    def __init__(self, config: RunConfig, train_data: Dataset, out_dir):
        cfg = self.cfg = config.resolved()
        ds = train_data if cfg.ssl != "none" else train_data.without_unlabeled()
        self.ds = ds
        n_lab = int(ds.labeled_indices.size)
        if n_lab == 0:
            raise ConfigError("training data has no labeled examples")
        self.plan = plan_iterations(cfg, n_lab, ds.unlabeled_indices.size > 0)
        n_iter = self.plan.max_iterations
        root = Rng(cfg.seed)
        self.model_rng = root.spawn(1)
        self.params = init_model(cfg.model_config(len(ds.vocab), ds.n_classes), root.spawn(0))
        self.partition = make_partition(self.params, cfg.split_level, n_iter, cfg.unfreeze_threshold)
        self.adam = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self.accum = Accumulator(cfg.accumulation_steps, cfg.clip)
        self.sampler = BatchSampler(ds, cfg.batch_size, self.plan.labeled_frac, root.spawn(2))
        self.lr_schedule = LrSchedule(cfg.peak_lr, n_iter, cfg.lr_warmup_frac)
        self.w_schedule = ConsistencySchedule(n_iter, cfg.w_max, cfg.warmup_frac, cfg.rampdown_frac,
                                              cfg.rampup_coef, cfg.rampdown_coef)
        self.te = None
        if cfg.ssl == "te":
            self.te = TemporalEnsemble(max(e.index for e in ds.examples) + 1, ds.n_classes, cfg.alpha)
        self.out_dir = Path(out_dir)
        self.start = 0

    # ------------------------------------------------------------ one micro-batch

    def micro_step(self, batch, w: float):
        cfg, params, level = self.cfg, self.params, self.cfg.split_level
        lab_rows = np.flatnonzero(batch.label_mask)
        cand = np.arange(len(batch)) if cfg.consistency_on_labeled else np.flatnonzero(~batch.label_mask)
        targets = None
        if cfg.ssl == "pi":
            logits, probs, z_tilde = pi_targets(params, batch.tokens, level, self.model_rng)
            targets = z_tilde.data
        else:
            hidden = forward_features(params, batch.tokens, level, self.model_rng, True)
            logits = forward_head(params, hidden, level, self.model_rng, True)
            probs = T.softmax(logits)
            if cfg.ssl == "te":
                targets, avail = self.te.targets(batch.indices)
                self.te.update(batch.indices, probs.data)
                cand = cand[avail[cand]]
            else:
                cand = cand[:0]
        return combined_loss(logits, probs, batch.labels, lab_rows, targets, cand, w)

    # ------------------------------------------------------------ main loop

    def run(self, on_step=None) -> TrainResult:
        """Train to ``max_iterations``; ``on_step(t, trainer)`` runs after every optimizer step."""
        cfg, plan = self.cfg, self.plan
        out = self.out_dir
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        timing_path = out / "timing.csv"
        if self.start == 0:
            metrics_path.write_text(",".join(METRIC_COLUMNS) + "\n")
            timing_path.write_text("iteration,wall_ms\n")
            self._write_manifest()
        k = cfg.accumulation_steps
        ref_digests = self._group_digests()
        ckpt_path = out / "final.lpt"
        with open(metrics_path, "a") as mf, open(timing_path, "a") as tf:
            for t in range(self.start, plan.max_iterations):
                t0 = time.perf_counter()
                lr = lr_at(self.lr_schedule, t)
                w = consistency_weight(self.w_schedule, t)
                sums = np.zeros(3)
                stepped = False
                for _ in range(k):
                    parts = self.micro_step(self.sampler.next_batch(), w)
                    if parts.total.requires_grad:
                        T.backward(parts.total * (1.0 / k))
                    else:
                        T.current_tape().clear()
                    sums += (parts.ce, parts.consist, parts.total.item())
                    stepped = self.accum(self.adam, self.params, lr)
                if not stepped:
                    raise InvariantViolation("accumulation cycle ended without an optimizer step")
                unfrozen = step_unfreeze(self.partition, self.params, t)
                if unfrozen is not None:
                    log.info("iteration %d: unfroze group %d", t, unfrozen)
                if on_step is not None:
                    on_step(t, self)
                ce, con, tot = sums / k
                row = (t, t // plan.steps_per_epoch, lr, w, ce, con, tot,
                       len(self.partition.frozen_groups))
                mf.write(",".join(_fmt(v) for v in row) + "\n")
                tf.write(f"{t},{(time.perf_counter() - t0) * 1e3:.3f}\n")
                if (t + 1) % plan.steps_per_epoch == 0 or t + 1 == plan.max_iterations:
                    self._check_frozen(ref_digests)
                    ref_digests = self._group_digests()
                    epoch = t // plan.steps_per_epoch
                    path = out / "checkpoints" / f"epoch_{epoch:03d}.lpt"
                    self.save(path, t)
                    shutil.copyfile(path, ckpt_path)
                    mf.flush()
                    log.info("epoch %d done (iteration %d, loss %.4f)", epoch, t, tot)
        return TrainResult(self.params, self.partition, cfg, plan, out, metrics_path, ckpt_path)

    def _group_digests(self) -> dict:
        return {g: frozen_parameter_digest(self.params, self.partition, [g])
                for g in self.partition.frozen_groups}

    def _check_frozen(self, ref: dict) -> None:
        for g in self.partition.frozen_groups:
            if g in ref and frozen_parameter_digest(self.params, self.partition, [g]) != ref[g]:
                raise InvariantViolation(f"frozen group {g} changed during training")

    def _write_manifest(self) -> None:
        manifest = {"config": self.cfg.to_dict(), "config_hash": self.cfg.hash(),
                    "seed": self.cfg.seed, "plan": asdict(self.plan),
                    "data": data_signature(self.ds), "data_meta": self.ds.meta,
                    "n_parameters": self.params.num_parameters()}
        (self.out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    # ------------------------------------------------------------ persistence

    def save(self, path, iteration: int) -> None:
        state = {
            "iteration": iteration,
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "data": data_signature(self.ds),
            "vocab": self.ds.vocab.tokens,
            "partition": {"split_level": self.partition.split_level,
                          "max_iterations": self.partition.max_iterations,
                          "unfreeze_threshold": self.partition.unfreeze_threshold},
            "model_rng": self.model_rng.get_state(),
            "sampler": self.sampler.state(),
            "accum_calls": self.accum.calls,
            "adam_steps": self.adam.steps,
        }
        buffers = {}
        for name in self.adam.m:
            buffers[f"adam.m.{name}"] = self.adam.m[name]
            buffers[f"adam.v.{name}"] = self.adam.v[name]
        if self.te is not None:
            state["te_alpha"] = self.te.alpha
            buffers["te.Z"] = self.te.Z
            buffers["te.T"] = self.te.T
        save_checkpoint(path, self.params, self.partition.frozen_groups, state, buffers)

    def restore(self, path) -> None:
        ck = load_checkpoint(path)
        st = ck.state
        if st.get("config_hash") != self.cfg.hash():
            diff = sorted(k for k, v in self.cfg.to_dict().items() if st.get("config", {}).get(k) != v)
            raise ConfigError(f"cannot resume from {path}: config differs in {diff or 'hash'}")
        if st.get("data") != data_signature(self.ds):
            raise ConfigError(f"cannot resume from {path}: training data differs")
        for name, t in ck.params.items():
            self.params[name].data = t.data.copy()
        self.partition.frozen_groups = list(ck.frozen_groups)
        apply_partition(self.params, self.partition)
        self.model_rng.set_state(st["model_rng"])
        self.sampler.load(st["sampler"])
        self.accum.calls = st["accum_calls"]
        self.adam.steps = dict(st["adam_steps"])
        for name in self.adam.steps:
            self.adam.m[name] = ck.buffers[f"adam.m.{name}"].astype(np.float32)
            self.adam.v[name] = ck.buffers[f"adam.v.{name}"].astype(np.float32)
        if self.te is not None:
            self.te.Z = ck.buffers["te.Z"].astype(np.float32)
            self.te.T = ck.buffers["te.T"].astype(np.int64)
        self.start = st["iteration"] + 1
        metrics = self.out_dir / "metrics.csv"
        if metrics.exists():
            lines = metrics.read_text().splitlines(keepends=True)
            kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < self.start]
            metrics.write_text("".join(kept))
        else:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            metrics.write_text(",".join(METRIC_COLUMNS) + "\n")
            (self.out_dir / "timing.csv").write_text("iteration,wall_ms\n")
            self._write_manifest()


def train(config: RunConfig, train_data: Dataset, out_dir, resume=None) -> TrainResult:
    trainer = Trainer(config, train_data, out_dir)
    if resume is not None:
        trainer.restore(resume)
    return trainer.run()


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_f1: float
    confusion: list[list[int]]
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def report_from_predictions(y_true, y_pred, n_classes: int) -> EvalReport:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(float)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    prec = np.divide(tp, pred_pos, out=np.zeros_like(tp), where=pred_pos > 0)
    rec = np.divide(tp, true_pos, out=np.zeros_like(tp), where=true_pos > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros_like(tp), where=denom > 0)
    n = int(y_true.size)
    acc = float(tp.sum() / n) if n else 0.0
    return EvalReport(acc, prec.tolist(), rec.tolist(), f1.tolist(), float(f1.mean()), cm.tolist(), n)


def evaluate(params: ParameterStore, dataset: Dataset, batch_size: int = 64) -> EvalReport:
    """Eval-mode accuracy and per-class precision/recall/F1 over examples with a known label."""
    examples = [e for e in dataset.examples if (e.label if e.label is not None else e.hidden_label) is not None]
    scored = Dataset(examples, dataset.vocab, dataset.n_classes)
    preds, truth = [], []
    for batch in iter_batches(scored, batch_size):
        preds.append(predict(params, batch.tokens))
    for e in examples:
        truth.append(e.label if e.label is not None else e.hidden_label)
    y_pred = np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)
    return report_from_predictions(truth, y_pred, params.config.n_classes)


def load_for_eval(path):
    """Return (params, vocab) from a checkpoint."""
    ck = load_checkpoint(path)
    vocab = Vocab(ck.state["vocab"]) if "vocab" in ck.state else None
    return ck.params, vocab


def evaluate_checkpoint(path, test) -> EvalReport:
    """``test`` is a TSV path (tokenized with the checkpoint vocabulary) or a Dataset."""
    params, vocab = load_for_eval(path)
    if isinstance(test, Dataset):
        if vocab is not None and test.vocab != vocab:
            raise VocabMismatchError(
                f"test vocabulary {test.vocab.fingerprint()} != checkpoint vocabulary {vocab.fingerprint()}")
        dataset = test
    else:
        if vocab is None:
            raise VocabMismatchError(f"{path} carries no vocabulary")
        dataset = load_tsv(test, vocab, params.config.max_len, n_classes=params.config.n_classes)
    return evaluate(params, dataset)


# ---------------------------------------------------------------- schedules


def schedule_table(config: RunConfig, total_iterations: int):
    cfg = config.resolved()
    lrs = LrSchedule(cfg.peak_lr, total_iterations, cfg.lr_warmup_frac)
    ws = ConsistencySchedule(total_iterations, cfg.w_max, cfg.warmup_frac, cfg.rampdown_frac,
                             cfg.rampup_coef, cfg.rampdown_coef)
    return [(t, lr_at(lrs, t), consistency_weight(ws, t)) for t in range(total_iterations)]


def export_schedules(config: RunConfig, total_iterations: int, out_path) -> Path:
    rows = schedule_table(config, total_iterations)
    lines = ["t lr w\n"] + [f"{t} {lr!r} {w!r}\n" for t, lr, w in rows]
    out_path = Path(out_path)
    out_path.write_text("".join(lines))
    return out_path
