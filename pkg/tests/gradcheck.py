"""Central finite-difference gradient checking for the autodiff ops."""
import numpy as np

from dualseg.nn.tensor import Tensor

H = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-8
# below this magnitude the finite-difference noise (~1e-10) dominates a relative test
SMALL = 1e-4


def numeric_grad(f, arr: np.ndarray, h: float = H) -> np.ndarray:
    """d f() / d arr by central differences; ``f`` reads ``arr`` in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|).

    Entries smaller than SMALL in both gradients are compared absolutely
    against ABS_TOL instead (returns inf on violation).
    """
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    small = scale < SMALL
    rel = np.where(small, 0.0, diff / np.where(small, 1.0, scale))
    if np.any(diff[small] > ABS_TOL):
        return np.inf
    return float(rel.max(initial=0.0))


def check_op(op, arrays, seed=0):
    """Compare analytic and numeric gradients of sum(op(*tensors) * R) for every input.

    Returns the worst relative error across inputs.
    """
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    weights = rng.normal(size=out.shape)
    loss_grad = weights
    out.backward(loss_grad)

    def f():
        return float(np.sum(op(*[Tensor(t.data) for t in tensors]).data * weights))

    worst = 0.0
    for t in tensors:
        num = numeric_grad(f, t.data)
        worst = max(worst, max_rel_error(t.grad, num))
    return worst
