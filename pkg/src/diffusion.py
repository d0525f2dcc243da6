"""Variance-exploding schedule, EDM preconditioning, Karras grids, training
time distributions, forward noising and the identity latent codec."""
from __future__ import annotations
from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np
import torch

from .errors import ArgumentError, DomainError
from .utils import DTYPE, as_tensor

Time = Union[float, torch.Tensor]

LOGNORMAL_MEAN = -1.2
LOGNORMAL_STD = 1.2
XI_MAX = 0.7


@dataclass(frozen=True)
class Schedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sigma_data: float = 0.5

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ArgumentError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.rho <= 0 or self.sigma_data <= 0:
            raise ArgumentError("rho and sigma_data must be positive")

    def warp(self, xi: Time) -> torch.Tensor:
        """Map xi in [0, 1] to time: xi=0 -> sigma_max, xi=1 -> sigma_min."""
        return warp_time(as_tensor(xi), self.sigma_min, self.sigma_max, self.rho)


class Precond(NamedTuple):
    c_skip: torch.Tensor
    c_out: torch.Tensor
    c_in: torch.Tensor
    c_noise: torch.Tensor


def precondition(t: Time, sigma_data: float) -> Precond:
    t = as_tensor(t)
    if bool((t <= 0).any()):
        raise DomainError(f"precondition needs t > 0, got min t = {float(t.min())}")
    denom = t ** 2 + sigma_data ** 2
    return Precond(
        c_skip=sigma_data ** 2 / denom,
        c_out=t * sigma_data / torch.sqrt(denom),
        c_in=1.0 / torch.sqrt(denom),
        c_noise=0.25 * torch.log(t),
    )


def warp_time(xi: torch.Tensor, sigma_min: float, sigma_max: float, rho: float) -> torch.Tensor:
    lo = sigma_min ** (1.0 / rho)
    hi = sigma_max ** (1.0 / rho)
    return (hi + xi * (lo - hi)) ** rho


def karras_points(sigma_min: float, sigma_max: float, rho: float, n: int) -> torch.Tensor:
    if n < 2:
        raise ArgumentError(f"Karras grid needs N >= 2, got {n}")
    xi = torch.arange(n, dtype=DTYPE) / (n - 1)
    pts = warp_time(xi, sigma_min, sigma_max, rho)
    # pin endpoints against pow round-off
    pts[0] = sigma_max
    pts[-1] = sigma_min
    return pts


@dataclass(frozen=True)
class KarrasGrid:
    """t_0 = sigma_max > ... > t_{N-1} = sigma_min; index N-1 stands for time 0."""

    points: torch.Tensor

    def __post_init__(self):
        if self.points.ndim != 1 or self.points.numel() < 2:
            raise ArgumentError("grid needs at least two points")
        if not bool((self.points[1:] < self.points[:-1]).all()):
            raise ArgumentError("grid points must be strictly decreasing")

    @property
    def N(self) -> int:
        return int(self.points.numel())

    def __len__(self) -> int:
        return self.N

    def __getitem__(self, idx):
        return self.points[idx]

    def index_of(self, t: float) -> int:
        hits = torch.nonzero(torch.isclose(self.points, torch.tensor(float(t), dtype=DTYPE), rtol=1e-12, atol=0.0))
        if hits.numel() == 0:
            raise ArgumentError(f"time {t} is not a grid point")
        return int(hits[0, 0])


def karras_grid(schedule: Schedule, n: int) -> KarrasGrid:
    return KarrasGrid(karras_points(schedule.sigma_min, schedule.sigma_max, schedule.rho, n))


def sample_train_time(rng: np.random.Generator, mode: str, schedule: Schedule, size: int = 1) -> torch.Tensor:
    """Training-time draws: ``lognormal``, ``karras_uniform`` or ``mixed`` (50/50)."""
    if mode == "lognormal":
        return torch.from_numpy(np.exp(rng.normal(LOGNORMAL_MEAN, LOGNORMAL_STD, size))).to(DTYPE)
    if mode == "karras_uniform":
        return schedule.warp(torch.from_numpy(rng.uniform(0.0, XI_MAX, size)))
    if mode == "mixed":
        pick = torch.from_numpy(rng.random(size) < 0.5)
        a = sample_train_time(rng, "lognormal", schedule, size)
        b = sample_train_time(rng, "karras_uniform", schedule, size)
        return torch.where(pick, a, b)
    raise ArgumentError(f"unknown time sampling mode '{mode}'")


def add_noise(z0: torch.Tensor, t: Time, eps: torch.Tensor) -> torch.Tensor:
    if z0.shape != eps.shape:
        raise ArgumentError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    t = as_tensor(t)
    if t.ndim == 1 and z0.ndim == 2:
        t = t[:, None]
    return z0 + t * eps


def edm_loss_weight(t: Time, sigma_data: float) -> torch.Tensor:
    """lambda(t) = (t^2 + sigma_data^2) / (t sigma_data)^2."""
    t = as_tensor(t)
    return (t ** 2 + sigma_data ** 2) / (t * sigma_data) ** 2


class LatentCodec:
    """Identity encoder/decoder at toy scale."""

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z


__all__ = [
    "Schedule",
    "Precond",
    "precondition",
    "warp_time",
    "karras_points",
    "KarrasGrid",
    "karras_grid",
    "sample_train_time",
    "add_noise",
    "edm_loss_weight",
    "LatentCodec",
]
