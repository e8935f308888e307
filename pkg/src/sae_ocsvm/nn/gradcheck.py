import numpy as np

from .autodiff import backprop


def grad_check(loss_fn, params, step=1e-6, floor=1e-7, grads=None, max_entries=None, rng=None):
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar Tensor.  ``grads`` overrides the analytic gradients
    (used to check that the harness catches a corrupted gradient).
    ``max_entries`` limits the number of probed entries per parameter,
    chosen at random with ``rng``; by default every entry is probed.
    """
    if grads is None:
        grads = backprop(params, loss_fn())
    rng = np.random.default_rng(rng)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        analytic = grads[name].reshape(-1)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + step
            up = float(loss_fn().data)
            flat[k] = orig - step
            down = float(loss_fn().data)
            flat[k] = orig
            fd = (up - down) / (2 * step)
            a = float(analytic[k])
            err = abs(a - fd) / max(abs(a), abs(fd), floor)
            worst = max(worst, err)
    return worst
