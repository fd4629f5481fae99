"""Central finite-difference gradient checking utilities (float64)."""

from __future__ import annotations

import numpy as np
import torch

FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-8


def assert_close_fd(analytic: float, fd: float, context: str = "") -> None:
    diff = abs(analytic - fd)
    scale = max(abs(analytic), abs(fd))
    assert diff <= FD_RTOL * scale or diff <= FD_ATOL, (
        f"gradient mismatch {context}: analytic {analytic:.10g} vs "
        f"finite-difference {fd:.10g} (diff {diff:.3g})"
    )


def check_input_gradient(fn, x: torch.Tensor, rng: np.random.Generator,
                         n_coords: int = 4) -> None:
    """Compare autograd input gradients of a scalar-valued fn against
    central finite differences at randomly chosen coordinates."""
    x = x.detach().double().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.detach().reshape(-1)
    flat = x.detach().reshape(-1).clone()
    coords = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
    for i in coords:
        i = int(i)
        xp = flat.clone()
        xp[i] += FD_STEP
        xm = flat.clone()
        xm[i] -= FD_STEP
        fp = float(fn(xp.reshape(x.shape)))
        fm = float(fn(xm.reshape(x.shape)))
        fd = (fp - fm) / (2 * FD_STEP)
        assert_close_fd(float(grad[i]), fd, context=f"coord {i}")


def check_parameter_gradient(forward, param: torch.Tensor, rng: np.random.Generator,
                             n_coords: int = 3) -> None:
    """Compare autograd parameter gradients of a scalar-valued forward()
    against central finite differences on randomly chosen entries."""
    if param.grad is not None:
        param.grad = None
    forward().backward()
    grad = param.grad.detach().reshape(-1)
    coords = rng.choice(param.numel(), size=min(n_coords, param.numel()), replace=False)
    for i in coords:
        i = int(i)
        with torch.no_grad():
            flat = param.reshape(-1)
            orig = float(flat[i])
            flat[i] = orig + FD_STEP
            fp = float(forward())
            flat[i] = orig - FD_STEP
            fm = float(forward())
            flat[i] = orig
        fd = (fp - fm) / (2 * FD_STEP)
        assert_close_fd(float(grad[i]), fd, context=f"param coord {i}")
