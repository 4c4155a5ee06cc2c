"""Shared test utilities: finite-difference oracles and trend statistics."""

from __future__ import annotations

import torch


def central_difference_grad(fn, x: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    """Numerical gradient of a scalar-valued fn at x (float64 recommended)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = float(fn(x).detach())
        flat[i] = orig - eps
        down = float(fn(x).detach())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def grad_check(fn, x: torch.Tensor, eps: float = 1e-4, tol: float = 1e-3) -> float:
    """Returns the relative error between autograd and central differences."""
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    out.backward()
    analytic = x.grad.detach().clone()
    numeric = central_difference_grad(fn, x, eps=eps)
    err = relative_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: rel err {err:.2e} >= {tol}"
    return err


def param_grad_check(module: torch.nn.Module, loss_fn, eps: float = 1e-4, tol: float = 1e-3):
    """Check every parameter's gradient against central differences.

    loss_fn() evaluates the scalar objective using the module's current
    parameters.
    """
    module.zero_grad()
    loss = loss_fn()
    loss.backward()
    for name, p in module.named_parameters():
        if not p.requires_grad:
            continue
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        numeric = torch.zeros_like(p)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(loss_fn().detach())
            flat[i] = orig - eps
            down = float(loss_fn().detach())
            flat[i] = orig
            nflat[i] = (up - down) / (2 * eps)
        err = relative_error(analytic, numeric)
        assert err < tol, f"param {name}: rel err {err:.2e} >= {tol}"


def spearman(xs, ys) -> float:
    from scipy.stats import spearmanr

    rho, _ = spearmanr(xs, ys)
    return float(rho)


def count_inversions(values, increasing: bool = True) -> int:
    """Adjacent-pair violations of the requested monotone direction."""
    bad = 0
    for a, b in zip(values, values[1:]):
        if increasing and b < a:
            bad += 1
        if not increasing and b > a:
            bad += 1
    return bad
