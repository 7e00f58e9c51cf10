import numpy as np

H = 1e-5
REL_TOL = 1e-4
# below this magnitude a component counts as zero and is compared absolutely
ABS_FLOOR = 1e-6


def numeric_grad(fn, t, h=H):
    """Central differences of scalar ``fn()`` with respect to every entry of ``t``."""
    out = np.zeros_like(t.values)
    flat = t.values.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(fn().values)
        flat[i] = old - h
        down = float(fn().values)
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return out


def relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_FLOOR)
    return np.abs(analytic - numeric) / denom


def check_gradients(fn, tensors, rel_tol=REL_TOL):
    for t in tensors:
        t.zero_grad()
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.values) if t.grad is None else t.grad.copy()
        err = relative_error(analytic, numeric_grad(fn, t)).max()
        worst = max(worst, err)
        assert err < rel_tol, f"tensor {t.name or t.shape}: relative gradient error {err:.3e}"
    return worst
