"""Shared test utilities: finite-difference gradient checking and loop
oracles kept independent of the library code they verify."""

import numpy as np
import torch


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def fd_gradient(fn, x: torch.Tensor, eps: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function wrt every element
    of ``x`` (float64)."""
    x = x.detach().clone()
    flat = x.reshape(-1)
    grad = np.zeros(flat.numel(), dtype=np.float64)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(fn(x))
        flat[i] = orig - eps
        lo = float(fn(x))
        flat[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad.reshape(tuple(x.shape))


def analytic_gradient(fn, x: torch.Tensor) -> np.ndarray:
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    out.backward()
    return x.grad.detach().numpy().copy()


def check_input_gradient(fn, x: torch.Tensor, eps: float = 1e-4,
                         tol: float = 1e-4) -> float:
    """Assert analytic and finite-difference input gradients agree."""
    err = rel_error(analytic_gradient(fn, x), fd_gradient(fn, x, eps))
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err


def check_parameter_gradients(module: torch.nn.Module, loss_fn,
                              eps: float = 1e-4, tol: float = 1e-3) -> float:
    """Assert analytic parameter gradients of ``loss_fn(module)`` match
    central finite differences, parameter by parameter."""
    module.zero_grad()
    loss = loss_fn(module)
    loss.backward()
    worst = 0.0
    for name, param in module.named_parameters():
        analytic = param.grad.detach().numpy().copy()
        flat = param.data.reshape(-1)
        fd = np.zeros(flat.numel())
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(loss_fn(module))
                flat[i] = orig - eps
                lo = float(loss_fn(module))
                flat[i] = orig
                fd[i] = (hi - lo) / (2 * eps)
        err = rel_error(analytic, fd.reshape(tuple(param.shape)))
        worst = max(worst, err)
        assert err < tol, f"param {name}: rel err {err:.3e} >= {tol}"
    return worst
