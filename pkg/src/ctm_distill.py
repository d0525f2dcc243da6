"""Consistency-trajectory distillation of CFG-guided PF-ODE trajectories.

The student learns anytime-to-anytime jumps
    G(z_t, c, w, t, s) = (s/t) z_t + (1 - s/t) g(z_t, c, w, t, s),
    g = c_skip(t) z_t + c_out(t) NN([c_in(t) z_t, e(t, s, w, c)]),
against the soft-consistency target G_ema(Solver(z_t, c, w, t, u), c, w, u, s),
plus an auxiliary DSM loss on g(., t, t) weighted adaptively at the last layer.
"""
from __future__ import annotations
import copy, logging, math, time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from .data.mixture import ConditionedMixture
from .diffusion import KarrasGrid, Schedule, add_noise, edm_loss_weight, karras_grid, precondition, sample_train_time
from .errors import ArgumentError, ConfigError, InvariantViolation, NonFiniteError
from .netcore import ConditionedNet, RAdamState, load_checkpoint, radam_step, save_checkpoint
from .solver import cfg_solve
from .teacher import NeuralTeacher, Teacher, batch_labels, batch_time, dsm_objective, drop_labels, teacher_features
from .utils import append_jsonl, as_tensor, elapsed_ms, normal, randint, rng_cursor, uniform

logger = logging.getLogger(__name__)

DISTANCES = ("l2_zero_time", "l2_s_time", "teacher_feature")


@dataclass(frozen=True)
class DistillConfig:
    grid_size: int = 40
    ema_rate: float = 0.999
    omega_min: float = 2.0
    omega_max: float = 5.0
    p_uncond: float = 0.1
    lr: float = 8.0e-5
    max_ode_steps: int = 39
    distance: str = "teacher_feature"
    lambda_mode: str = "adaptive"
    lambda_value: float = 1.0
    dsm_weighting: str = "none"
    batch_size: int = 128
    iterations: int = 20000
    hidden: Sequence[int] = (128, 128)
    embed_dim: int = 32
    omega_seed: int = 0

    def __post_init__(self):
        def bad(name, msg):
            raise ConfigError(f"distill.{name}", msg)
        if self.grid_size < 2:
            bad("grid_size", "must be >= 2")
        if not 0.0 <= self.ema_rate <= 1.0:
            bad("ema_rate", "must lie in [0, 1]")
        if self.omega_min > self.omega_max:
            bad("omega_min", "must be <= omega_max")
        if not 0.0 <= self.p_uncond <= 1.0:
            bad("p_uncond", "must lie in [0, 1]")
        if self.lr < 0:
            bad("lr", "must be >= 0")
        if self.max_ode_steps < 1:
            bad("max_ode_steps", "must be >= 1")
        if self.distance not in DISTANCES:
            bad("distance", f"must be one of {DISTANCES}")
        if self.lambda_mode not in ("adaptive", "fixed"):
            bad("lambda_mode", "must be 'adaptive' or 'fixed'")
        if self.dsm_weighting not in ("none", "edm"):
            bad("dsm_weighting", "must be 'none' or 'edm'")
        if self.batch_size < 1 or self.iterations < 0:
            bad("batch_size", "batch_size must be >= 1 and iterations >= 0")


class StudentModel(nn.Module):
    """Online network NN_theta and its EMA stop-gradient copy sg(theta)."""

    def __init__(self, net: ConditionedNet, schedule: Schedule):
        super().__init__()
        self.online = net
        self.ema = copy.deepcopy(net).requires_grad_(False)
        self.schedule = schedule

    @classmethod
    def build(cls, data_dim: int, num_labels: int, schedule: Schedule, hidden: Sequence[int] = (128, 128),
              embed_dim: int = 32, omega_seed: int = 0) -> "StudentModel":
        net = ConditionedNet(data_dim, hidden, embed_dim, num_labels, use_s=True, use_omega=True, omega_seed=omega_seed)
        return cls(net, schedule)

    @property
    def sigma_data(self) -> float:
        return self.schedule.sigma_data

    @property
    def data_dim(self) -> int:
        return self.online.data_dim

    def network(self, which: str) -> ConditionedNet:
        if which == "online":
            return self.online
        if which == "ema":
            return self.ema
        raise ArgumentError(f"unknown network '{which}' (expected 'online' or 'ema')")

    def last_layer_names(self) -> List[str]:
        idx = len(self.online.mlp.layers) - 1
        return [f"mlp.layers.{idx}.weight", f"mlp.layers.{idx}.bias"]

    def init_from_teacher(self, teacher: NeuralTeacher) -> List[str]:
        """Copy every teacher tensor whose name and shape match; s/omega embeddings stay fresh."""
        src = teacher.net.state_dict()
        dst = self.online.state_dict()
        copied = [k for k, v in src.items() if k in dst and dst[k].shape == v.shape]
        with torch.no_grad():
            for k in copied:
                dst[k].copy_(src[k])
        self.ema.load_state_dict(self.online.state_dict())
        logger.info("student initialised from teacher: %d/%d tensors copied", len(copied), len(dst))
        return copied


def g_theta(student: StudentModel, which: str, z_t: torch.Tensor, labels, omega, t, s) -> torch.Tensor:
    net = student.network(which)
    z = z_t.reshape(-1, student.data_dim)
    B = z.shape[0]
    tb, sb = batch_time(t, B), batch_time(s, B)
    if bool((tb < sb).any()):
        raise ArgumentError("g_theta needs t >= s")
    w = as_tensor(omega).reshape(-1)
    w = w.expand(B) if w.numel() == 1 else w
    pc = precondition(tb, student.sigma_data)
    c_noise_s = precondition(sb, student.sigma_data).c_noise
    out, _ = net(pc.c_in[:, None] * z, pc.c_noise, batch_labels(labels, B), c_noise_s=c_noise_s, omega=w)
    return (pc.c_skip[:, None] * z + pc.c_out[:, None] * out).reshape(z_t.shape)


def jump(student: StudentModel, which: str, z_t: torch.Tensor, labels, omega, t, s) -> torch.Tensor:
    z = z_t.reshape(-1, student.data_dim)
    B = z.shape[0]
    ratio = (batch_time(s, B) / batch_time(t, B))[:, None]
    g = g_theta(student, which, z, labels, omega, t, s)
    return (ratio * z + (1 - ratio) * g).reshape(z_t.shape)


# ---------------- CTM loss ----------------
@dataclass
class CTMDraws:
    t_idx: torch.Tensor
    s_idx: torch.Tensor
    u_idx: torch.Tensor
    omega: torch.Tensor
    labels: torch.Tensor
    eps: torch.Tensor

    def record(self, i: int) -> Dict[str, Any]:
        return {
            "item": i,
            "t_idx": int(self.t_idx[i]),
            "s_idx": int(self.s_idx[i]),
            "u_idx": int(self.u_idx[i]),
            "omega": float(self.omega[i]),
            "label": int(self.labels[i]),
        }


def draw_ctm(rng: np.random.Generator, labels: torch.Tensor, cfg: DistillConfig, grid: KarrasGrid, dim: int) -> CTMDraws:
    """Draw order: drop label, eps, (t, s, u) grid indices, omega."""
    B = labels.shape[0]
    N = grid.N
    labels = drop_labels(labels, cfg.p_uncond, rng)
    eps = normal(rng, (B, dim))
    t_idx = randint(rng, 0, N - 1, B)
    s_idx = randint(rng, t_idx + 1, N)
    u_idx = randint(rng, t_idx + 1, s_idx + 1)
    u_idx = np.minimum(u_idx, t_idx + cfg.max_ode_steps)
    omega = uniform(rng, cfg.omega_min, cfg.omega_max, B)
    return CTMDraws(
        t_idx=torch.from_numpy(t_idx), s_idx=torch.from_numpy(s_idx), u_idx=torch.from_numpy(u_idx),
        omega=omega, labels=labels, eps=eps,
    )


def ctm_distance(kind: str, student: StudentModel, teacher: Optional[Teacher], z_target: torch.Tensor,
                 z_est: torch.Tensor, labels, omega, s) -> torch.Tensor:
    """Per-item distance; gradients flow only through ``z_est``."""
    if kind == "l2_s_time":
        return ((z_target - z_est) ** 2).sum(-1)
    if kind == "l2_zero_time":
        sigma_min = student.schedule.sigma_min
        with torch.no_grad():
            a = jump(student, "ema", z_target, labels, omega, s, sigma_min)
        b = jump(student, "ema", z_est, labels, omega, s, sigma_min)
        return ((a - b) ** 2).sum(-1)
    if kind == "teacher_feature":
        with torch.no_grad():
            fa = teacher_features(teacher, z_target, s, labels)
        fb = teacher_features(teacher, z_est, s, labels)
        return sum(((x - y) ** 2).sum(-1) for x, y in zip(fa, fb))
    raise ArgumentError(f"unknown distance '{kind}'")


@dataclass
class LossOutput:
    loss: torch.Tensor
    grads: Dict[str, torch.Tensor]
    per_item: torch.Tensor
    draws: Any


def _online_grads(student: StudentModel, loss: torch.Tensor) -> Dict[str, torch.Tensor]:
    named = list(student.online.named_parameters())
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(p)) for (n, p), g in zip(named, grads)}


def _check_finite(per_item: torch.Tensor, draws, what: str):
    bad = torch.nonzero(~torch.isfinite(per_item))
    if bad.numel():
        i = int(bad[0, 0])
        rec = draws.record(i)
        raise NonFiniteError(f"non-finite {what} loss for item {i}: {rec}", record=rec)


def ctm_loss(student: StudentModel, teacher: Teacher, z0: torch.Tensor, labels: torch.Tensor,
             rng: Optional[np.random.Generator], cfg: DistillConfig, grid: KarrasGrid,
             draws: Optional[CTMDraws] = None) -> LossOutput:
    if draws is None:
        draws = draw_ctm(rng, labels, cfg, grid, student.data_dim)
    if not bool(((draws.t_idx <= draws.u_idx) & (draws.u_idx <= draws.s_idx)).all()):
        raise InvariantViolation("CTM draw outside t >= u >= s")
    if cfg.distance == "teacher_feature" and not isinstance(teacher, NeuralTeacher):
        raise ConfigError("distill.distance", "teacher_feature needs the neural teacher")
    t = grid.points[draws.t_idx]
    s = grid.points[draws.s_idx]
    u = grid.points[draws.u_idx]
    z_t = add_noise(z0, t, draws.eps)
    with torch.no_grad():
        z_solver = cfg_solve(teacher, z_t, draws.labels, draws.omega, draws.t_idx, draws.u_idx, grid, cfg.max_ode_steps)
        z_target = jump(student, "ema", z_solver, draws.labels, draws.omega, u, s)
    z_est = jump(student, "online", z_t, draws.labels, draws.omega, t, s)
    per_item = ctm_distance(cfg.distance, student, teacher, z_target, z_est, draws.labels, draws.omega, s)
    _check_finite(per_item, draws, "CTM")
    loss = per_item.mean()
    return LossOutput(loss=loss.detach(), grads=_online_grads(student, loss), per_item=per_item.detach(), draws=draws)


# ---------------- DSM loss ----------------
@dataclass
class DSMDraws:
    t: torch.Tensor
    omega: torch.Tensor
    labels: torch.Tensor
    eps: torch.Tensor

    def record(self, i: int) -> Dict[str, Any]:
        return {"item": i, "t": float(self.t[i]), "omega": float(self.omega[i]), "label": int(self.labels[i])}


def draw_dsm(rng: np.random.Generator, labels: torch.Tensor, cfg: DistillConfig, schedule: Schedule, dim: int) -> DSMDraws:
    B = labels.shape[0]
    labels = drop_labels(labels, cfg.p_uncond, rng)
    t = sample_train_time(rng, "mixed", schedule, B)
    omega = uniform(rng, cfg.omega_min, cfg.omega_max, B)
    return DSMDraws(t=t, omega=omega, labels=labels, eps=normal(rng, (B, dim)))


def dsm_loss(student: StudentModel, z0: torch.Tensor, labels: torch.Tensor, rng: Optional[np.random.Generator],
             cfg: DistillConfig, draws: Optional[DSMDraws] = None) -> LossOutput:
    """mean ||z0 - g(z_t, c, w, t, t)||^2 (unweighted unless dsm_weighting='edm')."""
    if draws is None:
        draws = draw_dsm(rng, labels, cfg, student.schedule, student.data_dim)
    weight = edm_loss_weight(draws.t, student.sigma_data) if cfg.dsm_weighting == "edm" else None
    per_item = dsm_objective(
        lambda zt, tt: g_theta(student, "online", zt, draws.labels, draws.omega, tt, tt),
        z0, draws.t, draws.eps, weight,
    )
    _check_finite(per_item, draws, "DSM")
    loss = per_item.mean()
    return LossOutput(loss=loss.detach(), grads=_online_grads(student, loss), per_item=per_item.detach(), draws=draws)


def _norm(blocks) -> float:
    return math.sqrt(sum(float((g ** 2).sum()) for g in blocks))


def adaptive_lambda(grads_ctm_last: Sequence[torch.Tensor], grads_dsm_last: Sequence[torch.Tensor]) -> float:
    """||grad_L CTM|| / ||grad_L DSM|| over the last layer; 0 when the DSM gradient vanishes."""
    dsm = _norm(grads_dsm_last)
    if dsm == 0.0:
        return 0.0
    return _norm(grads_ctm_last) / dsm


@torch.no_grad()
def ema_update(student: StudentModel, mu: float) -> None:
    for p_ema, p in zip(student.ema.parameters(), student.online.parameters()):
        p_ema.mul_(mu).add_(p, alpha=1 - mu)


# ---------------- Training loop ----------------
def save_student(student: StudentModel, path) -> Path:
    tensors = {f"online.{k}": v for k, v in student.online.state_dict().items()}
    tensors.update({f"ema.{k}": v for k, v in student.ema.state_dict().items()})
    arch = dict(student.online.arch, schedule=asdict(student.schedule))
    return save_checkpoint(path, tensors, kind="student", arch=arch)


def load_student(path) -> StudentModel:
    tensors, arch = load_checkpoint(path, kind="student")
    schedule = Schedule(**arch.pop("schedule"))
    student = StudentModel(ConditionedNet(**arch), schedule)
    student.online.load_state_dict({k[len("online."):]: v for k, v in tensors.items() if k.startswith("online.")})
    student.ema.load_state_dict({k[len("ema."):]: v for k, v in tensors.items() if k.startswith("ema.")})
    return student


def new_student(teacher: Teacher, mixture: ConditionedMixture, schedule: Schedule, cfg: DistillConfig) -> StudentModel:
    student = StudentModel.build(mixture.dim, mixture.num_labels, schedule, cfg.hidden, cfg.embed_dim, cfg.omega_seed)
    if isinstance(teacher, NeuralTeacher):
        student.init_from_teacher(teacher)
    return student


def train_student(teacher: Teacher, mixture: ConditionedMixture, schedule: Schedule, cfg: DistillConfig,
                  rng: np.random.Generator, log_path: Optional[Path] = None,
                  checkpoint_path: Optional[Path] = None,
                  student: Optional[StudentModel] = None) -> Tuple[StudentModel, List[Dict[str, Any]]]:
    """Per iteration: CTM + lambda * DSM, one RAdam step, then the EMA update."""
    if cfg.distance == "teacher_feature" and not isinstance(teacher, NeuralTeacher):
        raise ConfigError("distill.distance", "teacher_feature needs teacher.kind = neural")
    if student is None:
        student = new_student(teacher, mixture, schedule, cfg)
    grid = karras_grid(schedule, cfg.grid_size)
    state = RAdamState.create(dict(student.online.named_parameters()), lr=cfg.lr)
    last = student.last_layer_names()
    rows: List[Dict[str, Any]] = []
    bar = tqdm(range(cfg.iterations), desc=f"distill[{cfg.distance}]", disable=not logger.isEnabledFor(logging.INFO))
    for it in bar:
        start = time.perf_counter()
        cursor = rng_cursor(rng)
        try:
            z0, labels = mixture.sample(cfg.batch_size, rng)
            ctm = ctm_loss(student, teacher, z0, labels, rng, cfg, grid)
            dsm = dsm_loss(student, z0, labels, rng, cfg)
            if cfg.lambda_mode == "adaptive":
                lam = adaptive_lambda([ctm.grads[n] for n in last], [dsm.grads[n] for n in last])
            else:
                lam = cfg.lambda_value
            total = {n: ctm.grads[n] + lam * dsm.grads[n] for n in ctm.grads}
            radam_step(state, total)
        except NonFiniteError:
            if checkpoint_path is not None:
                save_student(student, checkpoint_path)
                logger.error("training aborted at iteration %d; last good state saved to %s", it, checkpoint_path)
            raise
        ema_update(student, cfg.ema_rate)
        row = {
            "iter": it,
            "loss_ctm": float(ctm.loss),
            "loss_dsm": float(dsm.loss),
            "lambda": float(lam),
            "grad_norm": _norm(total.values()),
            "wall_ms": elapsed_ms(start),
            "rng_cursor": cursor,
        }
        rows.append(row)
        if log_path is not None:
            append_jsonl(log_path, row)
        if it % 100 == 0:
            bar.set_postfix(ctm=f"{row['loss_ctm']:.4g}", dsm=f"{row['loss_dsm']:.4g}", lam=f"{lam:.3g}")
    return student, rows


__all__ = [
    "DISTANCES",
    "DistillConfig",
    "StudentModel",
    "g_theta",
    "jump",
    "CTMDraws",
    "DSMDraws",
    "draw_ctm",
    "draw_dsm",
    "ctm_distance",
    "ctm_loss",
    "dsm_loss",
    "adaptive_lambda",
    "ema_update",
    "new_student",
    "train_student",
    "save_student",
    "load_student",
]
