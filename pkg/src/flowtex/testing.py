"""Shared verification oracles used by the test suite.

The finite-difference machinery lives here, independent of autograd: it
perturbs raw parameter storage and re-runs the full forward pass, so it
exercises exactly what a user-facing training step sees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class GradCheckEntry:
    name: str
    index: int
    backprop: float
    finite_diff: float
    rel_error: float


def central_difference(loss_fn, param, flat_index: int, eps: float) -> float:
    """Central finite difference of a scalar loss along one parameter entry."""
    with torch.no_grad():
        flat = param.view(-1)
        orig = flat[flat_index].item()
        flat[flat_index] = orig + eps
        plus = float(loss_fn().detach())
        flat[flat_index] = orig - eps
        minus = float(loss_fn().detach())
        flat[flat_index] = orig
    return (plus - minus) / (2.0 * eps)


def finite_difference_check(loss_fn, module, n_entries: int = 50, eps: float = 1e-5,
                            seed: int = 0, zero_floor: float = 1e-8,
                            kink_tol: float = 1e-3, max_resamples: int = 200):
    """Compare autograd gradients against central differences on random entries.

    Activations with kinks (ReLU family) make the loss piecewise smooth;
    an entry whose perturbation interval straddles a kink gives a finite
    difference that is not the derivative on either side. Such entries are
    detected by disagreement between step sizes eps and eps/4 and resampled,
    since backprop-vs-derivative only has meaning where the derivative
    exists. Entries where both values sit below ``zero_floor`` are recorded
    with rel_error 0 after an absolute comparison.

    Returns a list of :class:`GradCheckEntry`, one per checked entry.
    """
    from .networks import parameter_gradients

    loss = loss_fn()
    grads = parameter_gradients(loss, module)
    params = dict(module.named_parameters())
    names = sorted(params)
    rng = np.random.default_rng(seed)

    results = []
    resamples = 0
    while len(results) < n_entries:
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        idx = int(rng.integers(p.numel()))
        fd = central_difference(loss_fn, p, idx, eps)
        fd_small = central_difference(loss_fn, p, idx, eps / 4.0)
        scale = max(abs(fd), abs(fd_small), zero_floor)
        if abs(fd - fd_small) / scale > kink_tol:
            resamples += 1
            if resamples > max_resamples:
                raise RuntimeError(
                    f"gave up after {max_resamples} kink resamples; "
                    f"the loss surface looks non-smooth almost everywhere")
            continue
        bp = float(grads[name].view(-1)[idx])
        denom = max(abs(fd), abs(bp))
        if denom < zero_floor:
            assert abs(fd - bp) < zero_floor, (name, idx, bp, fd)
            rel = 0.0
        else:
            rel = abs(fd - bp) / denom
        results.append(GradCheckEntry(name=name, index=idx, backprop=bp,
                                      finite_diff=fd, rel_error=rel))
    return results


def worst_rel_error(entries) -> float:
    return max(e.rel_error for e in entries)
