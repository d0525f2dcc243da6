"""Heun integration of the empirical PF ODE along Karras-grid segments and
the classifier-free-guided combination of two solver trajectories.

Times are given as grid indices (0 = sigma_max, N-1 = sigma_min). A batch may
carry one (start, end) index pair per item; finished items are frozen while
longer segments keep stepping.
"""
from __future__ import annotations
import logging
from typing import Optional, Union

import torch

from .diffusion import KarrasGrid
from .errors import ArgumentError, NonFiniteError
from .netcore import NULL_LABEL
from .teacher import Teacher, batch_labels, pf_ode_rhs
from .utils import as_tensor

logger = logging.getLogger(__name__)

Index = Union[int, torch.Tensor]


def _indices(idx: Index, batch: int) -> torch.Tensor:
    idx = torch.as_tensor(idx, dtype=torch.long).reshape(-1)
    return idx.expand(batch) if idx.numel() == 1 else idx


def heun_solve(teacher: Teacher, z_t: torch.Tensor, labels, t_idx: Index, u_idx: Index, grid: KarrasGrid,
               max_steps: Optional[int] = None) -> torch.Tensor:
    """Integrate from grid[t_idx] down to grid[u_idx] with Heun's method, one step per grid interval."""
    z = z_t.reshape(-1, z_t.shape[-1])
    B = z.shape[0]
    start = _indices(t_idx, B)
    end = _indices(u_idx, B)
    if bool((end < start).any()):
        raise ArgumentError("heun_solve needs u <= t (u index >= t index)")
    if bool((start < 0).any()) or bool((end > grid.N - 1).any()):
        raise ArgumentError("grid index out of range")
    n_steps = end - start
    if max_steps is not None and bool((n_steps > max_steps).any()):
        raise ArgumentError(f"segment of {int(n_steps.max())} steps exceeds the ODE step budget {max_steps}")
    labels = batch_labels(labels, B)
    last = grid.N - 1
    for k in range(int(n_steps.max()) if B else 0):
        active = (start + k) < end
        i = (start + k).clamp(max=last - 1)
        t_cur = grid.points[i]
        t_next = grid.points[i + 1]
        dt = (t_next - t_cur)[:, None]
        d = pf_ode_rhs(teacher, z, t_cur, labels)
        z_euler = z + dt * d
        d2 = pf_ode_rhs(teacher, z_euler, t_next, labels)
        z = torch.where(active[:, None], z + dt * 0.5 * (d + d2), z)
        if not bool(torch.isfinite(z).all()):
            raise NonFiniteError(f"non-finite solver state at step {k}")
    return z.reshape(z_t.shape)


def cfg_solve(teacher: Teacher, z_t: torch.Tensor, labels, omega, t_idx: Index, u_idx: Index, grid: KarrasGrid,
              max_steps: Optional[int] = None) -> torch.Tensor:
    """omega * Solver(z_t, c) + (1 - omega) * Solver(z_t, null), combined at the endpoints.

    Items whose label is already null take the unconditional trajectory directly.
    """
    z = z_t.reshape(-1, z_t.shape[-1])
    B = z.shape[0]
    labels = batch_labels(labels, B)
    start, end = _indices(t_idx, B), _indices(u_idx, B)
    null = torch.full_like(labels, NULL_LABEL)
    uncond = heun_solve(teacher, z, null, start, end, grid, max_steps)
    is_null = labels == NULL_LABEL
    if bool(is_null.all()):
        return uncond.reshape(z_t.shape)
    keep = ~is_null
    if bool(keep.all()):
        cond = heun_solve(teacher, z, labels, start, end, grid, max_steps)
    else:
        cond = uncond.clone()
        cond[keep] = heun_solve(teacher, z[keep], labels[keep], start[keep], end[keep], grid, max_steps)
    w = as_tensor(omega).reshape(-1)
    w = (w.expand(B) if w.numel() == 1 else w)[:, None]
    mixed = w * cond + (1 - w) * uncond
    return torch.where(is_null[:, None], uncond, mixed).reshape(z_t.shape)


@torch.no_grad()
def generate(teacher: Teacher, noise: torch.Tensor, labels, omega, grid: KarrasGrid) -> torch.Tensor:
    """Teacher samples: CFG Heun solve over the whole grid, sigma_max -> sigma_min."""
    return cfg_solve(teacher, noise, labels, omega, 0, grid.N - 1, grid)


__all__ = ["heun_solve", "cfg_solve", "generate"]
