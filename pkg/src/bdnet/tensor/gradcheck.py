"""Central finite-difference checks for the reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Tensor, record_branches


@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.checked > 0 and self.max_rel_error <= tol


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    atol: float = 1e-6,
    max_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckResult:
    """Compare autodiff gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the graph from ``inputs`` on every call (it is
    re-evaluated for each probe).  Relative error per element is
    ``|a - n| / max(|a|, |n|, atol * max(1, |f|))``; the floor grows with the
    loss value ``f`` because central-difference roundoff does.  Probes whose +eps and -eps evaluations
    take different discrete branches (ReLU masks, point selections, sort
    orders) are skipped, since the derivative is undefined there.
    ``max_per_input`` limits the number of probed elements per input, chosen
    with ``rng``.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    loss = fn()
    floor = atol * max(1.0, abs(loss.item()))
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    checked = skipped = 0
    for t, grad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        if max_per_input is None or flat.size <= max_per_input:
            probe = np.arange(flat.size)
        else:
            probe = np.sort(rng.choice(flat.size, size=max_per_input, replace=False))
        for i in probe:
            orig = flat[i]
            flat[i] = orig + eps
            with record_branches() as plus_branches:
                fp = fn().item()
            flat[i] = orig - eps
            with record_branches() as minus_branches:
                fm = fn().item()
            flat[i] = orig
            if not _same_branches(plus_branches, minus_branches):
                skipped += 1
                continue
            num = (fp - fm) / (2 * eps)
            a = grad.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
            checked += 1
    return GradcheckResult(max_rel_error=float(worst), checked=checked, skipped_kinks=skipped)
