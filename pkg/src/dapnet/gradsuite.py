"""Finite-difference sweep over every engine op and the full network loss.

Each case builds a scalar function of a few tensors and hands it to
:func:`check_gradients`. Op cases probe every entry. The network cases
probe every parameter of the micro model and a seeded subset of entries of
each parameter of the desk model. ReLU and max decisions are recorded so
a probe that crosses a kink is repeated at ``h/10`` and ``h/100``; if it
still crosses one it is reported instead of compared.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .engine import (
    BatchNorm,
    GradCheckReport,
    Parameter,
    Tensor,
    add,
    batch_norm,
    check_gradients,
    concat,
    cross_entropy,
    gather,
    matmul,
    max_reduce,
    mul,
    pointwise_affine,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
    tsum,
    weighted_gather,
)
from .engine.gradcheck import DEFAULT_STEP
from .model import DAPNet, ModelConfig

TOLERANCE = 1e-4
MAX_KINK_FRACTION = 0.25  # beyond this a network sweep compares too few entries to mean much


@dataclass
class CaseResult:
    name: str
    report: GradCheckReport
    seconds: float
    tolerance: float

    @property
    def kink_fraction(self) -> float:
        return len(self.report.kinks) / max(self.report.probed, 1)

    @property
    def passed(self) -> bool:
        compared = self.report.probed - len(self.report.kinks)
        return (compared > 0 and self.report.max_error < self.tolerance
                and self.kink_fraction <= MAX_KINK_FRACTION)

    def line(self) -> str:
        r = self.report
        status = "PASS" if self.passed else "FAIL"
        text = (f"{status} {self.name}: max rel err {r.max_error:.2e} over "
                f"{r.probed - len(r.kinks)} entries")
        if r.refined:
            text += f", {len(r.refined)} re-probed at a smaller step near a kink"
        if r.kinks:
            text += f", {len(r.kinks)} kink crossings skipped"
        if not self.passed and r.worst is not None:
            text += f"; worst {r.worst[0]}[{r.worst[1]}] analytic {r.worst[2]:.6e} numeric {r.worst[3]:.6e}"
        return text + f" ({self.seconds:.2f}s)"


def _t(rng, *shape, name="x", lo=-1.0, hi=1.0) -> Parameter:
    return Parameter(rng.uniform(lo, hi, size=shape), name)


def _spaced(rng, *shape, name="x") -> Parameter:
    """Entries at least 0.05 apart and away from 0, so max and ReLU are smooth under ``h``."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2 + 0.5) * 0.1
    vals = np.where(np.abs(vals) < 0.05, 0.1, vals)
    return Parameter(rng.permutation(vals).reshape(shape), name)


def op_cases(seed: int = 0) -> dict:
    """Name -> (function, tensors) for every differentiable op."""
    rng = np.random.default_rng(seed)
    cases = {}

    def add_case(name, fn, tensors):
        # a fixed random linear functional turns any output into a scalar
        r = Tensor(rng.normal(size=fn().shape))
        cases[name] = (lambda: tsum(mul(fn(), r)), tensors)

    a, b = _t(rng, 2, 3, 4, name="a"), _t(rng, 2, 4, 5, name="b")
    add_case("matmul batched", lambda: matmul(a, b), [a, b])
    a2, w2 = _t(rng, 2, 3, 4, name="a"), _t(rng, 4, 2, name="w")
    add_case("matmul shared right", lambda: matmul(a2, w2), [a2, w2])
    x = _t(rng, 2, 3, 4, name="x")
    add_case("transpose", lambda: transpose(x), [x])
    add_case("reshape", lambda: reshape(x, (3, 8)), [x])
    xa, wa, ba = _t(rng, 2, 3, 2, 4, name="x"), _t(rng, 4, 3, name="w"), _t(rng, 3, name="b")
    add_case("pointwise_affine", lambda: pointwise_affine(xa, wa, ba), [xa, wa, ba])
    add_case("pointwise_affine no bias", lambda: pointwise_affine(xa, wa), [xa, wa])

    bn = BatchNorm(3, "bn")
    bn.scale.data = rng.uniform(0.5, 1.5, 3)
    bn.shift.data = rng.uniform(-0.5, 0.5, 3)
    xb = _t(rng, 2, 4, 3, name="x")
    add_case("batch_norm train", lambda: batch_norm(xb, bn, True, update_stats=False),
             [xb, bn.scale, bn.shift])
    bn_eval = BatchNorm(3, "bn_eval")
    bn_eval.running_mean = rng.normal(size=3)
    bn_eval.running_var = rng.uniform(0.5, 2.0, 3)
    add_case("batch_norm eval", lambda: batch_norm(xb, bn_eval, False),
             [xb, bn_eval.scale, bn_eval.shift])

    xr = _spaced(rng, 3, 4, name="x")
    add_case("relu", lambda: relu(xr), [xr])
    xm = _spaced(rng, 2, 3, 4, name="x")
    add_case("max_reduce", lambda: max_reduce(xm, axis=1), [xm])
    p, q = _t(rng, 3, 4, name="p"), _t(rng, 3, 4, name="q")
    add_case("add", lambda: add(p, q), [p, q])
    add_case("mul", lambda: mul(p, q), [p, q])
    alpha = _t(rng, 1, name="alpha")
    add_case("scale", lambda: scale(p, alpha), [p, alpha])
    xs = _t(rng, 2, 4, 4, name="x", lo=-2, hi=2)
    add_case("softmax row", lambda: softmax(xs, "row"), [xs])
    add_case("softmax global", lambda: softmax(xs, "global"), [xs])
    scores = _t(rng, 6, 4, name="scores", lo=-2, hi=2)
    labels = rng.integers(0, 4, size=6)
    cases["cross_entropy"] = (lambda: cross_entropy(scores, labels), [scores])
    c1, c2 = _t(rng, 2, 3, 2, name="c1"), _t(rng, 2, 3, 4, name="c2")
    add_case("concat", lambda: concat([c1, c2], axis=-1), [c1, c2])
    src = _t(rng, 2, 5, 3, name="x")
    idx = rng.integers(0, 5, size=(2, 4, 3))  # repeats exercise accumulation
    add_case("gather", lambda: gather(src, idx), [src])
    widx = rng.integers(0, 5, size=(2, 6, 3))
    w = rng.uniform(0.1, 1.0, size=(2, 6, 3))
    w /= w.sum(axis=-1, keepdims=True)
    add_case("weighted_gather", lambda: weighted_gather(src, widx, w), [src])
    xt = _t(rng, 3, 2, name="x")
    cases["tsum"] = (lambda: tsum(mul(xt, xt)), [xt])
    return cases


def _model_case(cfg: ModelConfig, seed: int, batch: int, n: int, gates: float):
    model = DAPNet(cfg, seed=seed)
    rng = np.random.default_rng([seed, 17])
    for key in ("pam.alpha", "gam.beta"):
        if key in model.params:
            # open the attention gates so their branches carry gradient
            model.params[key].data = np.full(1, gates)
    feats = np.concatenate(
        [rng.uniform(0, 1, (batch, n, 4)), rng.uniform(0, 1, (batch, n, 4)),
         rng.integers(1, 4, (batch, n, 1)).astype(np.float64)], axis=-1)
    feats[..., 3:6] = feats[..., :3]
    labels = rng.integers(0, cfg.num_classes, size=batch * n)

    def loss():
        out = model.forward(feats, training=True)
        return cross_entropy(reshape(out, (batch * n, cfg.num_classes)), labels)

    return model, loss


def model_case(cfg: ModelConfig, seed: int = 0, batch: int = 1, n: int = 64,
               per_tensor: Optional[int] = None, gates: float = 0.5):
    model, loss = _model_case(cfg, seed, batch, n, gates)
    params = model.parameters()
    indices = None
    if per_tensor is not None:
        rng = np.random.default_rng([seed, 23])
        indices = {id(p): rng.choice(p.data.size, size=min(per_tensor, p.data.size), replace=False)
                   for p in params}
    return loss, params, indices


def run(tolerance: float = TOLERANCE, h: float = DEFAULT_STEP, seed: int = 0,
        full: bool = True, echo: Optional[Callable[[str], None]] = None) -> list:
    """Run all cases; returns :class:`CaseResult` objects in order."""
    results = []

    def record(name, fn, tensors, indices=None, kinks=True):
        t0 = time.perf_counter()
        rep = check_gradients(fn, tensors, h, indices, detect_kinks=kinks,
                              refine_steps=(h / 10, h / 100))
        res = CaseResult(name, rep, time.perf_counter() - t0, tolerance)
        results.append(res)
        if echo:
            echo(res.line())

    for name, (fn, tensors) in op_cases(seed).items():
        record(f"op {name}", fn, tensors)
    loss, params, _ = model_case(ModelConfig.micro(), seed, batch=2, n=12)
    record("micro network loss (all parameters)", loss, params)
    if full:
        loss, params, idx = model_case(ModelConfig.desk(), seed, batch=1, n=64, per_tensor=4)
        record("desk network loss (4 entries per parameter)", loss, params, idx)
    return results
