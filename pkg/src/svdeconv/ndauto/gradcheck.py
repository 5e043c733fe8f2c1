from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Parameter, Tape, Tensor


def gradient_check(f: Callable[[], Tensor], p: Parameter, step: float = 1e-4, floor: float = 1e-6) -> float:
    """Max relative error between the tape gradient of ``f`` w.r.t. ``p`` and
    fourth-order central finite differences (stencil -2h, -h, h, 2h).

    ``f`` takes no arguments and must read ``p`` when called; it is
    re-evaluated at ``p + k * step * e_i`` (k = +-1, +-2) for every coordinate, so keep ``p``
    small. The relative error uses ``max(|analytic|, |numeric|, floor)`` as
    denominator so coordinates with a vanishing gradient are compared on an
    absolute scale instead of amplifying finite-difference round-off.
    """
    p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = np.array(p.grad, dtype=np.float64, copy=True)

    flat = p.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        vals = []
        for k in (2, 1, -1, -2):
            flat[i] = orig + k * step
            vals.append(float(f().data))
        flat[i] = orig
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError(f"non-finite objective probing coordinate {i} of {p.name}")
        f2, f1, m1, m2 = vals
        numeric[i] = (8.0 * (f1 - m1) - (f2 - m2)) / (12.0 * step)
    analytic = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
