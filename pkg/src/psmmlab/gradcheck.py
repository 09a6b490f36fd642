"""Central finite-difference check of backprop gradients.

ReLU and max-pool make the loss piecewise smooth.  A central difference is
only a valid derivative estimate when ``theta - h`` and ``theta + h`` lie
on the same smooth piece as ``theta``, so every probe also compares the
branch signature (relu masks, pool argmaxes) of the three evaluations and
probes that straddle a kink are redrawn rather than scored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: tuple[str, tuple[int, ...], float, float]  # name, index, analytic, numeric

    def passed(self, tol: float = 1e-4) -> bool:
        return self.checked > 0 and self.max_rel_error < tol


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_model(
    model,
    inputs,
    label,
    n_params: int = 100,
    h: float = 1e-5,
    seed: int = 0,
    train: bool = True,
    max_draws: int | None = None,
) -> GradCheckResult:
    """Compare analytic and numeric d(loss)/d(theta) on randomly drawn scalar entries.

    A parameter tensor is drawn uniformly (so small tensors such as batch-norm
    scales and stems are covered), then an entry within it.  Batch-norm
    running buffers are restored afterwards.
    """
    store = model.store
    snap = store.snapshot_buffers()

    def evaluate():
        loss = model.loss(model.forward_inputs(inputs, train), label).total
        return loss.item(), T.branch_signature([loss])

    store.zero_grad()
    loss = model.loss(model.forward_inputs(inputs, train), label).total
    base_sig = T.branch_signature([loss])
    T.backward(loss)

    names = list(store.params)
    total = sum(p.size for p in store.params.values())
    target = min(n_params, total)
    max_draws = max_draws if max_draws is not None else 5 * target
    rng = np.random.default_rng(seed)
    seen: set[tuple[str, int]] = set()
    worst = ("", (), 0.0, 0.0)
    max_err, checked, skipped = 0.0, 0, 0
    while checked < target and len(seen) < max_draws:
        name = names[rng.integers(len(names))]
        flat_idx = int(rng.integers(store.params[name].size))
        if (name, flat_idx) in seen:
            continue
        seen.add((name, flat_idx))
        p = store.params[name]
        idx = np.unravel_index(flat_idx, p.shape)
        analytic = 0.0 if p.grad is None else float(p.grad[idx])
        orig = p.data[idx]
        p.data[idx] = orig + h
        up, sig_up = evaluate()
        p.data[idx] = orig - h
        down, sig_down = evaluate()
        p.data[idx] = orig
        if sig_up != base_sig or sig_down != base_sig:
            skipped += 1
            continue
        checked += 1
        numeric = (up - down) / (2 * h)
        err = relative_error(analytic, numeric)
        if err > max_err:
            max_err = err
            worst = (name, tuple(int(i) for i in idx), analytic, numeric)
    store.restore_buffers(snap)
    return GradCheckResult(max_err, checked, skipped, worst)
