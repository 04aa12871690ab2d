import numpy as np


def finite_difference_check(loss_fn, params, analytic_grads, h=1e-5, max_coords=None, rng=None):
    """Largest relative error between ``analytic_grads`` and central differences.

    ``loss_fn`` takes no arguments and reads ``params`` (perturbed in place and
    restored). When ``max_coords`` is set, only that many coordinates are
    sampled. The error for one coordinate is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    flat = params.reshape(-1)
    if not np.shares_memory(flat, params):
        raise ValueError("params must be a contiguous array so it can be perturbed in place")
    grads = np.asarray(analytic_grads).reshape(-1)
    idx = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = np.random.default_rng(0) if rng is None else rng
        idx = rng.choice(flat.size, size=max_coords, replace=False)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite loss while perturbing coordinate {i}")
        numeric = (up - down) / (2 * h)
        err = abs(grads[i] - numeric) / max(1e-8, abs(grads[i]) + abs(numeric))
        worst = max(worst, err)
    return worst
