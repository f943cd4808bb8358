"""Central-difference verification of tape gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, kink_monitor, no_grad


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0
    n_skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def group_errors(self, group_of: Callable[[str], str]) -> dict[str, float]:
        out: dict[str, float] = {}
        for name, err in self.per_param.items():
            g = group_of(name)
            out[g] = max(out.get(g, 0.0), err)
        return out


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _same_kinks(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    n_samples: int = 3,
    rng: np.random.Generator | None = None,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of a scalar loss against central differences.

    ``n_samples`` scalar entries are drawn per parameter tensor among those
    whose analytic gradient is within a factor ``min_ratio`` (default 1e-3)
    of the tensor's largest. Entries whose +h or -h
    evaluation flips any relu/hinge sign relative to the base point are
    skipped: the finite difference straddles a kink there.
    """
    return grad_check_many(lambda: {"loss": loss_fn()}, params, h, tol, n_samples, rng, names)["loss"]


def grad_check_many(
    losses_fn: Callable[[], dict[str, Tensor]],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    n_samples: int = 3,
    rng: np.random.Generator | None = None,
    names: Sequence[str] | None = None,
    min_ratio: float = 1e-3,
    atol: float = 1e-9,
) -> dict[str, GradCheckReport]:
    """:func:`grad_check` for several scalar losses computed by one function.

    Each loss gets its own backward pass; the perturbed evaluations are
    shared, so the same entries are checked for every loss. Pairs where both
    the analytic and numeric values are below ``atol`` count as agreeing: that
    is finite-difference roundoff around a structurally zero gradient (for
    instance attention key biases, to which softmax is invariant).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]

    analytic: dict[str, list[np.ndarray]] = {}
    keys: list[str] = []
    with kink_monitor() as base_kinks:
        with no_grad():
            keys = list(losses_fn())
    for key in keys:
        for p in params:
            p.grad = None
        with Tape() as tape:
            loss = losses_fn()[key]
            if not np.isfinite(loss.data).all():
                raise GradCheckError(f"non-finite {key} at the base point")
            if loss.requires_grad:
                tape.backward(loss)
            else:
                tape.clear()
        analytic[key] = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    def evaluate() -> tuple[dict[str, float], list]:
        with no_grad(), kink_monitor() as kinks:
            vals = {k: float(v.data) for k, v in losses_fn().items()}
        return vals, kinks

    reports = {k: GradCheckReport(max_rel_error=0.0, tol=tol) for k in keys}
    for pi, (p, name) in enumerate(zip(params, names)):
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)  # a view: writes below perturb the parameter
        # entries far below the tensor's largest gradient are dominated by
        # finite-difference roundoff, so sample from the informative ones
        informative = np.zeros(flat.size, dtype=bool)
        for k in keys:
            g = np.abs(analytic[k][pi].reshape(-1))
            if g.max() > 0:
                informative |= g >= min_ratio * g.max()
        pool = np.flatnonzero(informative)
        if pool.size == 0:
            pool = np.arange(flat.size)
        picks = rng.choice(pool, size=min(n_samples, pool.size), replace=False)
        worst = dict.fromkeys(keys, 0.0)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + h
            fp, kp = evaluate()
            flat[j] = orig - h
            fm, km = evaluate()
            flat[j] = orig
            for k in keys:
                if not (math.isfinite(fp[k]) and math.isfinite(fm[k])):
                    raise GradCheckError(f"non-finite {k} while perturbing {name}[{j}]")
            if not (_same_kinks(kp, base_kinks) and _same_kinks(km, base_kinks)):
                for k in keys:
                    reports[k].n_skipped += 1
                continue
            for k in keys:
                numeric = (fp[k] - fm[k]) / (2 * h)
                a = float(analytic[k][pi].reshape(-1)[j])
                err = 0.0 if max(abs(a), abs(numeric)) < atol else relative_error(a, numeric)
                worst[k] = max(worst[k], err)
                reports[k].n_checked += 1
        for k in keys:
            reports[k].per_param[name] = worst[k]
            reports[k].max_rel_error = max(reports[k].max_rel_error, worst[k])
    return reports
