"""Central finite-difference checking of backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .ops import record_decisions
from .tensor import Tensor

DEFAULT_STEP = 1e-5


def _scalar(out: Tensor) -> float:
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    val = float(out.data.reshape(-1)[0])
    if not np.isfinite(val):
        raise FloatingPointError(f"function value is not finite: {val}")
    return val


def relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _same(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _probe(f, flat: np.ndarray, i: int, step: float, base: Optional[list]):
    """``f`` at ``x[i] +/- step``, and whether both runs made ``base``'s decisions."""
    orig = flat[i]
    try:
        flat[i] = orig + step
        with record_decisions() as up:
            fp = _scalar(f())
        flat[i] = orig - step
        with record_decisions() as down:
            fm = _scalar(f())
    finally:
        flat[i] = orig
    smooth = base is None or (_same(base, up) and _same(base, down))
    return fp, fm, smooth


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference sweep.

    ``errors`` maps each tensor (by name, or position) to its largest
    relative error over the probed entries that count. With kink detection
    on, entries whose ReLU/max decisions change inside ``[x - h, x + h]``
    are not compared (central differences do not estimate a derivative
    across a kink); they are listed in ``kinks`` as ``(tensor, flat index)``.
    """

    max_error: float = 0.0
    errors: dict = field(default_factory=dict)
    probed: int = 0
    kinks: list = field(default_factory=list)
    refined: list = field(default_factory=list)
    worst: Optional[tuple] = None  # (tensor key, flat index, analytic, numeric)
    # (tensor key, flat index, analytic, numeric, max |f| of the two probes, step)
    entries: list = field(default_factory=list)


def check_gradients(
    f: Callable[[], Tensor],
    tensors: list,
    h: float = DEFAULT_STEP,
    indices: Optional[dict] = None,
    detect_kinks: bool = False,
    refine_steps: Sequence[float] = (),
) -> GradCheckReport:
    """Compare one ``backward()`` of ``f()`` against central differences.

    ``f`` must rebuild its graph on every call. ``indices`` maps
    ``id(tensor)`` to the flat positions to probe (all by default).
    """
    for t in tensors:
        t.grad = None
    with record_decisions() as base:
        out = f()
    _scalar(out)
    out.backward()
    rep = GradCheckReport()
    for k, t in enumerate(tensors):
        key = getattr(t, "name", k)
        analytic = np.zeros(t.data.size) if t.grad is None else t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        probe = range(flat.size)
        if indices and indices.get(id(t)) is not None:
            probe = indices[id(t)]
        err = 0.0
        for i in probe:
            rep.probed += 1
            for step in (h, *refine_steps) if detect_kinks else (h,):
                fp, fm, smooth = _probe(f, flat, int(i), step, base if detect_kinks else None)
                if smooth:
                    break
            if not smooth:
                rep.kinks.append((key, int(i)))
                continue
            if step != h:
                rep.refined.append((key, int(i)))
            numeric = (fp - fm) / (2 * step)
            rep.entries.append((key, int(i), float(analytic[i]), numeric, max(abs(fp), abs(fm)), step))
            e = float(relative_error(analytic[i], numeric))
            if e > rep.max_error or rep.worst is None:
                rep.worst = (key, int(i), float(analytic[i]), numeric)
            err = max(err, e)
            rep.max_error = max(rep.max_error, e)
        rep.errors[key] = err
    return rep


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = DEFAULT_STEP,
    indices: Optional[Iterable[int]] = None,
) -> float:
    """Max relative error between ``backward()`` and central differences of ``f`` at ``x``.

    The error of an entry is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    idx = {id(x): list(indices)} if indices is not None else None
    return check_gradients(lambda: f(x), [x], h, idx).max_error
