"""Multistep student sampling with gamma-controlled renoising and nu-blended
conditional/unconditional jumps.

Every chain owns the rng stream ``make_rng(seed, CHAIN_STREAM, chain_id)``;
its initial noise and its renoise draws come from that stream only.
"""
from __future__ import annotations
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .ctm_distill import StudentModel, jump
from .diffusion import karras_points
from .errors import ArgumentError
from .netcore import NULL_LABEL
from .teacher import batch_labels
from .utils import DTYPE, make_rng, normal

logger = logging.getLogger(__name__)

CHAIN_STREAM = 0

# (z_{t_n}, t_n, z_tilde, step) -> corrected z_tilde
Correction = Callable[[torch.Tensor, float, torch.Tensor, int], torch.Tensor]


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 1
    gamma: float = 0.0
    nu: float = 1.0
    omega: float = 3.0
    label: int = 0
    seed: int = 0
    num_samples: int = 64

    def __post_init__(self):
        if self.steps < 1:
            raise ArgumentError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ArgumentError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.num_samples < 1:
            raise ArgumentError("num_samples must be >= 1")


@dataclass
class SampleTrace:
    times: List[float] = field(default_factory=list)         # t_0 .. t_{N_s}
    jump_targets: List[float] = field(default_factory=list)  # t~_1 .. t~_{N_s}
    states: List[torch.Tensor] = field(default_factory=list)


def sampling_times(student: StudentModel, steps: int) -> torch.Tensor:
    sch = student.schedule
    return karras_points(sch.sigma_min, sch.sigma_max, sch.rho, steps + 1)


def chain_rngs(seed: int, chain_ids: Sequence[int]) -> List[np.random.Generator]:
    return [make_rng(seed, CHAIN_STREAM, int(i)) for i in chain_ids]


def draw_initial_noise(student: StudentModel, rngs: Sequence[np.random.Generator]) -> torch.Tensor:
    sigma_max = student.schedule.sigma_max
    return torch.stack([normal(rng, student.data_dim) for rng in rngs]) * sigma_max


def blended_jump(student: StudentModel, z: torch.Tensor, labels: torch.Tensor, omega, nu: float, t, s,
                 which: str = "ema") -> torch.Tensor:
    """nu * G(z, c) + (1 - nu) * G(z, null); null-label rows return G(z, null)."""
    labels = batch_labels(labels, z.shape[0])
    null = torch.full_like(labels, NULL_LABEL)
    uncond = jump(student, which, z, null, omega, t, s)
    is_null = labels == NULL_LABEL
    if bool(is_null.all()):
        return uncond
    cond = jump(student, which, z, labels, omega, t, s)
    mixed = nu * cond + (1 - nu) * uncond
    return torch.where(is_null[:, None], uncond, mixed)


def run_chains(student: StudentModel, config: SamplerConfig, labels: torch.Tensor, noise: torch.Tensor,
               rngs: Sequence[np.random.Generator], correction: Optional[Correction] = None,
               differentiable: bool = False) -> Tuple[torch.Tensor, SampleTrace]:
    """gamma-sampling over a batch of chains; ``correction`` edits z_tilde after each jump.

    With ``differentiable`` the jumps stay on the autograd tape, so the output
    can be differentiated with respect to ``noise``.
    """
    times = sampling_times(student, config.steps)
    sigma_min = student.schedule.sigma_min
    scale = float(np.sqrt(1.0 - config.gamma ** 2))
    z = noise
    trace = SampleTrace(times=[float(t) for t in times], states=[z.detach().clone()])
    for n in range(config.steps):
        t_n = float(times[n])
        t_next = float(times[n + 1])
        t_tilde = max(scale * t_next, sigma_min)
        with torch.set_grad_enabled(differentiable):
            z_tilde = blended_jump(student, z, labels, config.omega, config.nu, t_n, t_tilde)
        if correction is not None:
            z_tilde = correction(z, t_n, z_tilde, n)
        last = n == config.steps - 1
        if last or config.gamma == 0.0:
            z = z_tilde
        else:
            eps = torch.stack([normal(rng, student.data_dim) for rng in rngs])
            z = z_tilde + config.gamma * t_next * eps
        trace.jump_targets.append(t_tilde)
        trace.states.append(z.detach().clone())
    return z, trace


def chain_labels(config: SamplerConfig, num: int, labels: Optional[torch.Tensor] = None) -> torch.Tensor:
    if labels is None:
        return torch.full((num,), int(config.label), dtype=torch.long)
    labels = batch_labels(labels, num)
    if labels.shape[0] != num:
        raise ArgumentError(f"{labels.shape[0]} labels for {num} chains")
    return labels


def sample(student: StudentModel, config: SamplerConfig, initial_noise: Optional[torch.Tensor] = None,
           labels: Optional[torch.Tensor] = None, chain_ids: Optional[Sequence[int]] = None,
           ) -> Tuple[torch.Tensor, SampleTrace]:
    """Draw ``config.num_samples`` chains (or one per row of ``initial_noise``) with the EMA network."""
    if initial_noise is not None:
        num = initial_noise.reshape(-1, student.data_dim).shape[0]
    else:
        num = len(chain_ids) if chain_ids is not None else config.num_samples
    ids = list(chain_ids) if chain_ids is not None else list(range(num))
    if len(ids) != num:
        raise ArgumentError(f"{len(ids)} chain ids for {num} chains")
    rngs = chain_rngs(config.seed, ids)
    noise = draw_initial_noise(student, rngs)
    if initial_noise is not None:
        noise = initial_noise.reshape(-1, student.data_dim).to(DTYPE)
    return run_chains(student, config, chain_labels(config, num, labels), noise, rngs)


def preservation_distance(student: StudentModel, config: SamplerConfig, steps_a: int, steps_b: int, gamma: float,
                          noise: torch.Tensor, other_noise: Optional[torch.Tensor] = None,
                          labels: Optional[torch.Tensor] = None) -> float:
    """Mean ||sample(steps_a) - sample(steps_b)|| over a noise set (shared unless ``other_noise`` is given)."""
    other = noise if other_noise is None else other_noise
    if noise.shape != other.shape:
        raise ArgumentError(f"noise sets differ in size: {tuple(noise.shape)} vs {tuple(other.shape)}")
    xa, _ = sample(student, replace(config, steps=steps_a, gamma=gamma), initial_noise=noise, labels=labels)
    xb, _ = sample(student, replace(config, steps=steps_b, gamma=gamma), initial_noise=other, labels=labels)
    return float(torch.linalg.vector_norm(xa - xb, dim=-1).mean())


__all__ = [
    "SamplerConfig",
    "SampleTrace",
    "sampling_times",
    "chain_rngs",
    "draw_initial_noise",
    "blended_jump",
    "run_chains",
    "chain_labels",
    "sample",
    "preservation_distance",
]
