"""Teacher denoisers D_phi: an exact analytic posterior mean for conditioned
Gaussian mixtures and a neural EDM-preconditioned denoiser fit by DSM.

Both variants take ``labels`` where ``NULL_LABEL`` means "marginal over
labels", so the same object provides the conditional and unconditional
branches of classifier-free guidance.
"""
from __future__ import annotations
import logging, math, time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from .data.mixture import ConditionedMixture
from .diffusion import Schedule, add_noise, karras_grid, edm_loss_weight, precondition, sample_train_time
from .errors import DomainError, NonFiniteError, UnsupportedVariantError
from .netcore import NULL_LABEL, ConditionedNet, RAdamState, load_checkpoint, radam_step, save_checkpoint
from .utils import DTYPE, append_jsonl, as_tensor, elapsed_ms, normal, rng_cursor

logger = logging.getLogger(__name__)


def batch_time(t, batch: int) -> torch.Tensor:
    t = as_tensor(t).reshape(-1)
    if bool((t <= 0).any()):
        raise DomainError(f"time must be > 0, got min {float(t.min())}")
    return t.expand(batch) if t.numel() == 1 else t


def batch_labels(labels, batch: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    return labels.expand(batch) if labels.numel() == 1 else labels


def drop_labels(labels: torch.Tensor, p_uncond: float, rng: np.random.Generator) -> torch.Tensor:
    drop = torch.from_numpy(rng.random(labels.shape[0]) < p_uncond)
    return torch.where(drop, torch.full_like(labels, NULL_LABEL), labels)


class AnalyticTeacher:
    variant = "analytic"

    def __init__(self, mixture: ConditionedMixture, sigma_data: float):
        self.mixture = mixture
        self.sigma_data = sigma_data

    def denoise(self, z_t: torch.Tensor, t, labels) -> torch.Tensor:
        z = as_tensor(z_t).reshape(-1, self.mixture.dim)
        tb = batch_time(t, z.shape[0])
        return self.mixture.posterior_mean(z, tb, batch_labels(labels, z.shape[0])).reshape(z_t.shape)


class NeuralTeacher(nn.Module):
    """D_phi(z, t, c) = c_skip(t) z + c_out(t) F_phi(c_in(t) z, c_noise(t), c)."""

    variant = "neural"

    def __init__(self, net: ConditionedNet, schedule: Schedule):
        super().__init__()
        self.net = net
        self.schedule = schedule

    @property
    def sigma_data(self) -> float:
        return self.schedule.sigma_data

    def raw(self, z_t: torch.Tensor, t, labels) -> Tuple[torch.Tensor, List[torch.Tensor], torch.Tensor]:
        z = z_t.reshape(-1, self.net.data_dim)
        tb = batch_time(t, z.shape[0])
        pc = precondition(tb, self.sigma_data)
        out, hidden = self.net(pc.c_in[:, None] * z, pc.c_noise, batch_labels(labels, z.shape[0]))
        return out, hidden, tb

    def denoise(self, z_t: torch.Tensor, t, labels) -> torch.Tensor:
        z = z_t.reshape(-1, self.net.data_dim)
        out, _, tb = self.raw(z, t, labels)
        pc = precondition(tb, self.sigma_data)
        return (pc.c_skip[:, None] * z + pc.c_out[:, None] * out).reshape(z_t.shape)


Teacher = AnalyticTeacher | NeuralTeacher


def denoise(teacher: Teacher, z_t: torch.Tensor, t, labels) -> torch.Tensor:
    return teacher.denoise(z_t, t, labels)


def pf_ode_rhs(teacher: Teacher, z_t: torch.Tensor, t, labels) -> torch.Tensor:
    """dz/dt = (z_t - D(z_t, t)) / t."""
    z = z_t.reshape(-1, z_t.shape[-1])
    tb = batch_time(t, z.shape[0])
    return ((z - teacher.denoise(z, tb, labels)) / tb[:, None]).reshape(z_t.shape)


def teacher_features(teacher: Teacher, z: torch.Tensor, t, labels) -> List[torch.Tensor]:
    """Hidden activations of F_phi at (c_in(t) z, c_noise(t), label), each row at unit L2 norm."""
    if not isinstance(teacher, NeuralTeacher):
        raise UnsupportedVariantError("teacher features need the neural teacher; the analytic one has no layers")
    _, hidden, _ = teacher.raw(z, t, labels)
    feats = []
    for h in hidden:
        norm = torch.linalg.vector_norm(h, dim=-1, keepdim=True)
        feats.append(torch.where(norm > 0, h / norm.clamp_min(torch.finfo(DTYPE).tiny), torch.zeros_like(h)))
    return feats


def dsm_objective(predict: Callable[[torch.Tensor, torch.Tensor], torch.Tensor], z0: torch.Tensor,
                  t: torch.Tensor, eps: torch.Tensor, weight: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-item ||z0 - predict(z_t, t)||^2, optionally weighted."""
    z_t = add_noise(z0, t, eps)
    per_item = ((z0 - predict(z_t, t)) ** 2).sum(-1)
    return per_item * weight if weight is not None else per_item


@dataclass(frozen=True)
class TeacherTrainConfig:
    hidden: Sequence[int] = (64, 64)
    embed_dim: int = 32
    iterations: int = 4000
    batch_size: int = 512
    lr: float = 2.0e-3
    p_uncond: float = 0.1


def build_neural_teacher(mixture: ConditionedMixture, schedule: Schedule, cfg: TeacherTrainConfig) -> NeuralTeacher:
    net = ConditionedNet(mixture.dim, cfg.hidden, cfg.embed_dim, mixture.num_labels)
    return NeuralTeacher(net, schedule)


def train_teacher(mixture: ConditionedMixture, schedule: Schedule, cfg: TeacherTrainConfig,
                  rng: np.random.Generator, log_path: Optional[Path] = None) -> NeuralTeacher:
    """Fit F_phi with the lambda(t)-weighted DSM loss, t ~ lognormal(-1.2, 1.2^2)."""
    teacher = build_neural_teacher(mixture, schedule, cfg)
    state = RAdamState.create(dict(teacher.net.named_parameters()), lr=cfg.lr)
    params = list(state.params.values())
    bar = tqdm(range(cfg.iterations), desc="teacher", disable=not logger.isEnabledFor(logging.INFO))
    for it in bar:
        start = time.perf_counter()
        cursor = rng_cursor(rng)
        z0, labels = mixture.sample(cfg.batch_size, rng)
        labels = drop_labels(labels, cfg.p_uncond, rng)
        t = sample_train_time(rng, "lognormal", schedule, cfg.batch_size)
        eps = normal(rng, z0.shape)
        per_item = dsm_objective(lambda zt, tt: teacher.denoise(zt, tt, labels), z0, t, eps,
                                 weight=edm_loss_weight(t, schedule.sigma_data))
        loss = per_item.mean()
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(
                f"teacher DSM loss diverged at iteration {it}: loss={value}, "
                f"t in [{float(t.min()):.4g}, {float(t.max()):.4g}]",
                record={"iter": it, "rng_cursor": cursor},
            )
        grads = torch.autograd.grad(loss, params)
        radam_step(state, dict(zip(state.params.keys(), grads)))
        if log_path is not None:
            append_jsonl(log_path, {"iter": it, "loss": value, "wall_ms": elapsed_ms(start), "rng_cursor": cursor})
        if it % 100 == 0:
            bar.set_postfix(loss=f"{value:.4f}")
    teacher.requires_grad_(False)
    logger.info("teacher trained: %d iterations", cfg.iterations)
    return teacher


def denoiser_gap(teacher: Teacher, reference: Teacher, mixture: ConditionedMixture, schedule: Schedule,
                 rng: np.random.Generator, num: int = 256, points: int = 20) -> float:
    """Per-coordinate mean squared gap between two denoisers over held-out (z_t, t, label) points."""
    total = 0.0
    with torch.no_grad():
        for t in karras_grid(schedule, points).points:
            z0, labels = mixture.sample(num, rng)
            labels = drop_labels(labels, 0.1, rng)
            z_t = add_noise(z0, t, normal(rng, z0.shape))
            diff = teacher.denoise(z_t, t, labels) - reference.denoise(z_t, t, labels)
            total += float((diff ** 2).mean())
    return total / points


def save_teacher(teacher: NeuralTeacher, path) -> Path:
    arch = dict(teacher.net.arch, schedule=teacher.schedule.__dict__)
    return save_checkpoint(path, teacher.net.state_dict(), kind="teacher", arch=arch)


def load_teacher(path) -> NeuralTeacher:
    tensors, arch = load_checkpoint(path, kind="teacher")
    schedule = Schedule(**arch.pop("schedule"))
    net = ConditionedNet(**arch)
    net.load_state_dict(tensors)
    teacher = NeuralTeacher(net, schedule)
    teacher.requires_grad_(False)
    return teacher


__all__ = [
    "AnalyticTeacher",
    "NeuralTeacher",
    "Teacher",
    "denoise",
    "pf_ode_rhs",
    "teacher_features",
    "dsm_objective",
    "drop_labels",
    "TeacherTrainConfig",
    "build_neural_teacher",
    "train_teacher",
    "denoiser_gap",
    "save_teacher",
    "load_teacher",
]
