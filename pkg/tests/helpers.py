"""Shared test utilities: finite-difference gradient oracles."""

from __future__ import annotations

import torch


def finite_diff_grad(loss_fn, param: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of a scalar loss w.r.t. one tensor.

    Perturbs each element in place under no_grad, so ``loss_fn`` must
    recompute the loss from the live parameter on every call.
    """
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        step = h * max(1.0, abs(orig))
        with torch.no_grad():
            flat[i] = orig + step
            up = float(loss_fn())
            flat[i] = orig - step
            down = float(loss_fn())
            flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def relative_grad_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = max(numeric.norm().item(), analytic.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom


def check_group_grads(loss_fn, named_params: dict[str, torch.Tensor],
                      rel_tol: float = 1e-4) -> dict[str, float]:
    """Compare autograd gradients against central differences per group.

    Returns the relative error per parameter group; raises AssertionError
    when any group exceeds ``rel_tol``.
    """
    for p in named_params.values():
        if p.grad is not None:
            p.grad = None
    loss = loss_fn()
    loss.backward()
    errors = {}
    for name, p in named_params.items():
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        numeric = finite_diff_grad(loss_fn, p)
        errors[name] = relative_grad_error(analytic, numeric)
    bad = {n: e for n, e in errors.items() if e >= rel_tol}
    assert not bad, f"gradient mismatch beyond rel_tol={rel_tol}: {bad}"
    return errors
