"""Intensity-envelope control: loss-based guidance through the student's
full jump to time 0, and the initial-noise optimisation baseline."""
from __future__ import annotations
import copy, logging, math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import torch
from scipy.signal import savgol_coeffs
from tqdm import tqdm

from .ctm_distill import StudentModel, jump
from .diffusion import LatentCodec
from .errors import ArgumentError
from .netcore import backward
from .sampler import SampleTrace, SamplerConfig, chain_labels, chain_rngs, draw_initial_noise, run_chains
from .utils import DTYPE, as_tensor

logger = logging.getLogger(__name__)

RMS_FLOOR = 1e-8
SAVGOL_ORDER = 2
TARGET_SHAPES = ("flat", "ramp-up", "ramp-down", "triangle", "vee", "sine")
METHODS = ("loss-guidance", "zt-opt", "none")


@lru_cache(maxsize=None)
def _savgol_kernel(window: int) -> Tuple[float, ...]:
    if window == 1:
        return (1.0,)
    return tuple(float(c) for c in savgol_coeffs(window, SAVGOL_ORDER, use="dot"))


def savgol_smooth(y: torch.Tensor, window: int) -> torch.Tensor:
    """Order-2 Savitzky-Golay smoothing along the last axis, replicate-padded so length is kept."""
    if window == 1:
        return y
    kernel = torch.tensor(_savgol_kernel(window), dtype=DTYPE).view(1, 1, -1)
    flat = y.reshape(-1, 1, y.shape[-1])
    half = window // 2
    padded = torch.nn.functional.pad(flat, (half, half), mode="replicate")
    return torch.nn.functional.conv1d(padded, kernel).reshape(y.shape)


def intensity_feature(x: torch.Tensor, window: int) -> torch.Tensor:
    """Frame-wise dB intensity: sliding RMS (stride 1) -> 20 log10 -> Savitzky-Golay over ``window``."""
    x = as_tensor(x)
    if window < 1 or window % 2 == 0:
        raise ArgumentError(f"window must be odd and >= 1, got {window}")
    if window > x.shape[-1]:
        raise ArgumentError(f"window {window} longer than the signal ({x.shape[-1]})")
    frames = x.unfold(-1, window, 1)
    power = (frames ** 2).mean(-1)
    rms = torch.sqrt(torch.clamp_min(power, RMS_FLOOR ** 2))
    return savgol_smooth(20.0 * torch.log10(rms), window)


def default_window(dim: int) -> int:
    w = max(1, round(dim / 8))
    return w if w % 2 else w + 1


def target_curve(shape: str, frames: int, db_low: float = -12.0, db_high: float = 0.0) -> torch.Tensor:
    n = torch.linspace(0.0, 1.0, frames, dtype=DTYPE)
    span = db_high - db_low
    if shape == "flat":
        y = torch.full_like(n, 0.5)
    elif shape == "ramp-up":
        y = n
    elif shape == "ramp-down":
        y = 1.0 - n
    elif shape == "triangle":
        y = 1.0 - torch.abs(2.0 * n - 1.0)
    elif shape == "vee":
        y = torch.abs(2.0 * n - 1.0)
    elif shape == "sine":
        y = 0.5 + 0.5 * torch.sin(2 * math.pi * n)
    else:
        raise ArgumentError(f"unknown target shape '{shape}' (expected one of {TARGET_SHAPES})")
    return db_low + span * y


@dataclass(frozen=True)
class GuidanceTarget:
    curve: torch.Tensor
    window: int

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ArgumentError(f"window must be odd and >= 1, got {self.window}")
        if not bool(torch.isfinite(as_tensor(self.curve)).all()):
            raise ArgumentError("target curve must be finite")

    @classmethod
    def from_shape(cls, shape: str, dim: int, window: int, db_low: float = -12.0, db_high: float = 0.0):
        return cls(curve=target_curve(shape, dim - window + 1, db_low, db_high), window=window)

    def loss(self, x: torch.Tensor) -> torch.Tensor:
        """Per-sample MSE between the intensity of ``x`` and the target curve."""
        return ((intensity_feature(x, self.window) - self.curve) ** 2).mean(-1)


@dataclass(frozen=True)
class GuidanceConfig:
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(steps=16))
    rho_mode: str = "normalized"
    rho: float = 0.5
    iterations: int = 70
    zt_lr: float = 1.0

    def __post_init__(self):
        if self.rho_mode not in ("normalized", "fixed"):
            raise ArgumentError(f"rho_mode must be 'normalized' or 'fixed', got '{self.rho_mode}'")
        if self.iterations < 0:
            raise ArgumentError("iterations must be >= 0")
        if self.zt_lr <= 0:
            raise ArgumentError("zt_lr must be positive")


@dataclass
class GuidanceResult:
    sample: torch.Tensor
    trace: SampleTrace
    correction_norms: List[torch.Tensor] = field(default_factory=list)
    noise: Optional[torch.Tensor] = None


def final_estimate(student: StudentModel, z: torch.Tensor, labels, omega, t) -> torch.Tensor:
    """x0 = Decode(G(z_t, c, omega, t, time 0))."""
    return LatentCodec().decode(jump(student, "ema", z, labels, omega, t, student.schedule.sigma_min))


def guidance_gradient(student: StudentModel, target: GuidanceTarget, z: torch.Tensor, labels, omega, t) -> torch.Tensor:
    """Per-chain gradient of MSE(f(x0(z)), y) with respect to z."""
    objective = lambda zz: (target.loss(final_estimate(student, zz, labels, omega, t)), [])
    _, grad = backward(objective, z, torch.ones(z.shape[0], dtype=DTYPE), with_params=False)
    return grad


def _setup(student: StudentModel, cfg: SamplerConfig, initial_noise, labels, chain_ids):
    num = initial_noise.shape[0] if initial_noise is not None else (len(chain_ids) if chain_ids else cfg.num_samples)
    ids = list(chain_ids) if chain_ids is not None else list(range(num))
    rngs = chain_rngs(cfg.seed, ids)
    noise = draw_initial_noise(student, rngs)
    if initial_noise is not None:
        noise = initial_noise.to(DTYPE)
    return noise, chain_labels(cfg, num, labels), rngs


def guided_sample(student: StudentModel, target: GuidanceTarget, config: GuidanceConfig,
                  initial_noise: Optional[torch.Tensor] = None, labels: Optional[torch.Tensor] = None,
                  chain_ids: Optional[Sequence[int]] = None) -> GuidanceResult:
    """Sampling with z_tilde <- z_tilde - rho_t * grad_{z_t} L(f(x0(z_t)), y) after every jump."""
    scfg = config.sampler
    noise, labs, rngs = _setup(student, scfg, initial_noise, labels, chain_ids)
    norms: List[torch.Tensor] = []

    def correct(z_n, t_n, z_tilde, step):
        if config.rho == 0.0:
            norms.append(torch.zeros(z_n.shape[0], dtype=DTYPE))
            return z_tilde
        grad = guidance_gradient(student, target, z_n, labs, scfg.omega, t_n)
        finite = torch.isfinite(grad).all(-1)
        if not bool(finite.all()):
            logger.warning("step %d: non-finite guidance gradient on %d chain(s); correction skipped",
                           step, int((~finite).sum()))
        grad = torch.where(finite[:, None], grad, torch.zeros_like(grad))
        gnorm = torch.linalg.vector_norm(grad, dim=-1, keepdim=True)
        if config.rho_mode == "normalized":
            step_vec = torch.where(gnorm > 0, config.rho * grad / gnorm.clamp_min(1e-300), torch.zeros_like(grad))
        else:
            step_vec = config.rho * grad
        norms.append(torch.linalg.vector_norm(step_vec, dim=-1))
        return z_tilde - step_vec

    x, trace = run_chains(student, scfg, labs, noise, rngs, correction=correct)
    return GuidanceResult(sample=x.detach(), trace=trace, correction_norms=norms, noise=noise)


def zt_optimize(student: StudentModel, target: GuidanceTarget, config: GuidanceConfig,
                initial_noise: Optional[torch.Tensor] = None, labels: Optional[torch.Tensor] = None,
                chain_ids: Optional[Sequence[int]] = None) -> GuidanceResult:
    """Adam on z_T against MSE(f(x0), y) where x0 comes from the configured sampler itself.

    Every iteration replays the chains' renoising draws, so the objective is
    the exact sample the final run will produce. After each step a chain's
    noise is rescaled back to its starting norm. The best iterate per chain
    (the start included) is the one sampled, so no chain ends worse than
    unguided.
    """
    scfg = config.sampler
    noise, labs, rngs = _setup(student, scfg, initial_noise, labels, chain_ids)
    radius = torch.linalg.vector_norm(noise, dim=-1, keepdim=True)
    z_T = noise.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([z_T], lr=config.zt_lr)
    best = noise.detach().clone()
    best_loss = torch.full((noise.shape[0],), math.inf, dtype=DTYPE)

    def keep_best(per_chain: torch.Tensor, candidate: torch.Tensor) -> None:
        nonlocal best, best_loss
        better = torch.isfinite(per_chain) & (per_chain < best_loss)
        best = torch.where(better[:, None], candidate, best)
        best_loss = torch.where(better, per_chain, best_loss)

    bar = tqdm(range(config.iterations), desc="zt-opt", disable=not logger.isEnabledFor(logging.INFO), leave=False)
    for _ in bar:
        opt.zero_grad(set_to_none=True)
        x0, _ = run_chains(student, scfg, labs, z_T, copy.deepcopy(rngs), differentiable=True)
        per_chain = target.loss(x0)
        keep_best(per_chain.detach(), z_T.detach().clone())
        per_chain.sum().backward()
        if not bool(torch.isfinite(z_T.grad).all()):
            logger.warning("non-finite z_T gradient; optimisation stopped early")
            break
        opt.step()
        with torch.no_grad():
            z_T.mul_(radius / torch.linalg.vector_norm(z_T, dim=-1, keepdim=True).clamp_min(1e-300))
        bar.set_postfix(loss=f"{float(best_loss.mean()):.4f}")
    else:
        if config.iterations:
            with torch.no_grad():
                x0, _ = run_chains(student, scfg, labs, z_T.detach(), copy.deepcopy(rngs))
            keep_best(target.loss(x0), z_T.detach().clone())
    x, trace = run_chains(student, scfg, labs, best, rngs)
    return GuidanceResult(sample=x, trace=trace, noise=best)


def run_method(method: str, student: StudentModel, target: GuidanceTarget, config: GuidanceConfig,
               initial_noise: Optional[torch.Tensor] = None, labels: Optional[torch.Tensor] = None,
               chain_ids: Optional[Sequence[int]] = None) -> GuidanceResult:
    if method == "loss-guidance":
        return guided_sample(student, target, config, initial_noise, labels, chain_ids)
    if method == "zt-opt":
        return zt_optimize(student, target, config, initial_noise, labels, chain_ids)
    if method == "none":
        return guided_sample(student, target, replace(config, rho=0.0), initial_noise, labels, chain_ids)
    raise ArgumentError(f"unknown guidance method '{method}' (expected one of {METHODS})")


__all__ = [
    "TARGET_SHAPES",
    "METHODS",
    "savgol_smooth",
    "intensity_feature",
    "default_window",
    "target_curve",
    "GuidanceTarget",
    "GuidanceConfig",
    "GuidanceResult",
    "final_estimate",
    "guidance_gradient",
    "guided_sample",
    "zt_optimize",
    "run_method",
]
