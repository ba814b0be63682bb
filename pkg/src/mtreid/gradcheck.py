"""Central finite differences against analytic gradients."""

from __future__ import annotations

import math
from typing import Callable, Sequence, Union

import numpy as np

Arrays = Union[np.ndarray, Sequence[np.ndarray]]


def finite_difference_check(
    loss_fn: Callable[[Arrays], tuple[float, Arrays]],
    inputs: Arrays,
    epsilon: float = 1e-5,
) -> float:
    """Return the worst relative gradient error over every input coordinate.

    ``loss_fn`` maps the inputs (one array or a list of arrays) to
    ``(value, gradients)`` with gradients shaped like the inputs. The relative
    error of a coordinate is ``|a - n| / max(|a|, |n|, epsilon)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    single = isinstance(inputs, np.ndarray)
    arrays = [np.array(inputs, dtype=np.float64)] if single else [np.array(a, dtype=np.float64) for a in inputs]
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("inputs must be finite")

    def call(xs):
        return loss_fn(xs[0] if single else xs)

    _, analytic = call(arrays)
    analytic = [np.asarray(analytic, dtype=np.float64)] if single else [np.asarray(g, dtype=np.float64) for g in analytic]

    worst = 0.0
    for t, a in enumerate(arrays):
        flat = a.reshape(-1)
        g = analytic[t].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + epsilon
            up = float(call(arrays)[0])
            flat[i] = keep - epsilon
            down = float(call(arrays)[0])
            flat[i] = keep
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(f"non-finite loss when perturbing input {t}[{i}]")
            numeric = (up - down) / (2.0 * epsilon)
            err = abs(g[i] - numeric) / max(abs(g[i]), abs(numeric), epsilon)
            worst = max(worst, err)
    return worst
