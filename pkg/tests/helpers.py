"""Shared test oracles: finite differences and small numeric utilities."""

from __future__ import annotations

import numpy as np

from sanlab.autograd import Tensor

FD_STEP = 1e-3
FD_REL_TOL = 1e-4
FD_ABS_FLOOR = 1e-7


def numerical_gradient(loss_fn, arr: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. every entry of arr.

    The array is perturbed in place and restored; loss_fn must re-run the
    full forward pass from current values.
    """
    assert arr.dtype == np.float64, "finite differences run in double precision"
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = loss_fn()
        flat[i] = old - step
        down = loss_fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return grad


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, context: str = "") -> None:
    """Relative error <= 1e-4, with an absolute floor for near-zero pairs."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a), np.abs(n))
    diff = np.abs(a - n)
    ok = (diff <= FD_REL_TOL * denom) | (diff <= FD_ABS_FLOOR)
    if not ok.all():
        worst = np.unravel_index(np.argmax(diff - FD_REL_TOL * denom), a.shape)
        raise AssertionError(
            f"gradient mismatch {context} at {worst}: analytic={a[worst]!r} numeric={n[worst]!r} "
            f"rel={diff[worst] / max(denom[worst], 1e-300):.3g}"
        )


def check_op_gradients(build_loss, arrays: dict[str, np.ndarray], context: str = "") -> None:
    """Compare the autodiff gradients of a scalar graph to finite differences.

    ``build_loss`` receives {name: Tensor} (requires_grad set) and returns
    the scalar loss tensor; ``arrays`` holds float64 leaf values.
    """
    tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    loss = build_loss(tensors)
    loss.backward()
    for name, t in tensors.items():
        def loss_value():
            fresh = {k: Tensor(arrays[k], requires_grad=False) for k in arrays}
            return build_loss(fresh).item()

        numeric = numerical_gradient(loss_value, arrays[name])
        assert t.grad is not None, f"no gradient for {name} {context}"
        assert_grad_close(t.grad, numeric, context=f"{context}:{name}")
