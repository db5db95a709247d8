"""Adam with polynomial learning-rate decay, and the epoch loop around it."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .engine import cross_entropy, reshape
from .model import DAPNet, ModelConfig
from .pipeline import SAMPLE_SIZE, Block, sample_fixed

LR_INITIAL = 1e-3
LR_FINAL = 1e-5
LR_POWER = 0.7
BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 1e-4
BATCH_SIZE = 16
EPOCHS = 200

LOG_FIELDS = ("epoch", "lr", "loss", "train_oa")


@dataclass(frozen=True)
class Schedule:
    lr_initial: float = LR_INITIAL
    lr_final: float = LR_FINAL
    iterations: int = 1
    power: float = LR_POWER

    def __post_init__(self):
        if not self.lr_initial > self.lr_final > 0:
            raise ValueError(f"need lr_initial > lr_final > 0, got {self.lr_initial}, {self.lr_final}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


def poly_lr(sched: Schedule, i: float) -> float:
    """``(lr1 - lrI) * (1 - i/I) ** power + lrI`` for ``0 <= i <= I``.

    ``i = 0`` gives exactly ``lr1`` and ``i = I`` exactly ``lrI``.
    """
    if not 0 <= i <= sched.iterations:
        raise ValueError(f"iteration {i} outside [0, {sched.iterations}]")
    frac = 1.0 - i / sched.iterations
    return (sched.lr_initial - sched.lr_final) * frac ** sched.power + sched.lr_final


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = ADAM_EPS
    weight_decay: float = WEIGHT_DECAY


def adam_step(params: Sequence, opt: OptimState, lr: float, grads: Optional[Sequence] = None) -> OptimState:
    """One bias-corrected Adam update, in place.

    Weight decay is L2: ``weight_decay * w`` is added to the gradient before
    the moments are updated. ``grads`` defaults to each parameter's
    ``.grad``; a missing gradient counts as zero.
    """
    if grads is None:
        grads = [p.grad for p in params]
    # validate everything before touching any state
    prepared = []
    for p, g in zip(params, grads):
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(f"{p.name}: gradient shape {g.shape} vs parameter {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
        prepared.append(g)
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1, c2 = 1 - b1 ** opt.step, 1 - b2 ** opt.step
    for p, g in zip(params, prepared):
        g = g + opt.weight_decay * p.data
        m = opt.m.get(p.name, np.zeros_like(p.data))
        v = opt.v.get(p.name, np.zeros_like(p.data))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        opt.m[p.name], opt.v[p.name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return opt


@dataclass
class TrainResult:
    model: DAPNet
    log: list  # one dict per epoch with LOG_FIELDS keys
    best_epoch: Optional[int]
    best_state: dict
    optim: OptimState


def _batch_loss(model: DAPNet, feats: np.ndarray, labels: np.ndarray):
    out = model.forward(feats, training=True)
    b, n, c = out.shape
    scores = reshape(out, (b * n, c))
    loss = cross_entropy(scores, labels.reshape(-1))
    hits = int(np.sum(np.argmax(scores.data, axis=1) == labels.reshape(-1)))
    return loss, hits


def train_loop(
    blocks: Sequence[Block],
    cfg: ModelConfig,
    epochs: int = EPOCHS,
    batch_size: int = BATCH_SIZE,
    seed: int = 0,
    sample_size: int = SAMPLE_SIZE,
    lr_initial: float = LR_INITIAL,
    lr_final: float = LR_FINAL,
    weight_decay: float = WEIGHT_DECAY,
    run_dir=None,
    header: Optional[dict] = None,
    progress=None,
) -> TrainResult:
    """Train a fresh model on normalized, labelled blocks.

    Each epoch shuffles the blocks, cuts them into batches, draws a fixed
    size sample per block and takes one Adam step per batch. The schedule
    runs over ``epochs * ceil(len(blocks) / batch_size)`` iterations.
    With ``run_dir`` set, ``log.csv``, ``last.ckpt`` and ``best.ckpt``
    (lowest epoch loss) are written there.
    """
    if not blocks:
        raise ValueError("train_loop: no training blocks")
    if epochs < 0 or batch_size < 1:
        raise ValueError(f"need epochs >= 0 and batch_size >= 1, got {epochs}, {batch_size}")
    for k, b in enumerate(blocks):
        if b.features is None or b.labels is None:
            raise ValueError(f"block {k} is not normalized or has no labels")
        top = int(b.labels.max())
        if top >= cfg.num_classes:
            raise ValueError(f"block {k} has label {top} but the model has {cfg.num_classes} classes")
    model = DAPNet(cfg, seed=seed)
    params = model.parameters()
    opt = OptimState(weight_decay=weight_decay)
    per_epoch = math.ceil(len(blocks) / batch_size)
    sched = Schedule(lr_initial, lr_final, max(1, epochs * per_epoch))
    rng = np.random.default_rng(seed)
    header = dict(header or {})
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
        with open(run / "log.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_FIELDS)

    log = []
    best_loss, best_epoch, best_state = math.inf, None, model.state_dict()
    it = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(blocks))
        total_loss, hits, seen, lr = 0.0, 0, 0, poly_lr(sched, it)
        for start in range(0, len(order), batch_size):
            chosen = [blocks[k] for k in order[start:start + batch_size]]
            samples = [sample_fixed(b, sample_size, rng) for b in chosen]
            feats = np.stack([s.features for s in samples])
            labels = np.stack([s.labels for s in samples])
            model.zero_grad()
            loss, batch_hits = _batch_loss(model, feats, labels)
            loss.backward()
            lr = poly_lr(sched, it)
            adam_step(params, opt, lr)
            it += 1
            total_loss += loss.item() * labels.size
            hits += batch_hits
            seen += labels.size
        row = {"epoch": epoch, "lr": lr, "loss": total_loss / seen, "train_oa": hits / seen}
        log.append(row)
        if row["loss"] < best_loss:
            best_loss, best_epoch, best_state = row["loss"], epoch, model.state_dict()
            if run is not None:
                model.save(run / "best.ckpt", {**header, "epoch": epoch})
        if run is not None:
            with open(run / "log.csv", "a", newline="") as fh:
                csv.writer(fh).writerow([row[k] if k == "epoch" else repr(row[k]) for k in LOG_FIELDS])
            model.save(run / "last.ckpt", {**header, "epoch": epoch})
        if progress is not None:
            progress(row)
    if run is not None and epochs == 0:
        model.save(run / "last.ckpt", {**header, "epoch": 0})
        model.save(run / "best.ckpt", {**header, "epoch": 0})
    return TrainResult(model, log, best_epoch, best_state, opt)


def read_log(path) -> list:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "lr": float(r["lr"]), "loss": float(r["loss"]),
                 "train_oa": float(r["train_oa"])} for r in csv.DictReader(fh)]
