"""Network substrate: MLPs with activation capture, reverse-mode gradients,
time/guidance/condition embeddings, RAdam and safetensors checkpoints.

Gradients come from ``torch.autograd``; ``backward`` only packages them the
way the distillation and guidance code consume them (per named parameter
plus the input gradient).
"""
from __future__ import annotations
import json, math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn
from safetensors import safe_open
from safetensors.torch import save_file

from .errors import CheckpointError, InputShapeError, NonFiniteError
from .utils import DTYPE

NULL_LABEL = -1
CHECKPOINT_FORMAT = "jumpdistill"
CHECKPOINT_VERSION = "1"
# Sinusoidal features cover frequencies 1..MAX_FREQ over c_noise in roughly [-1.6, 1.1].
MAX_FREQ = 100.0


class MlpNet(nn.Module):
    """Feed-forward net, SiLU on hidden layers, identity on the last one."""

    def __init__(self, layer_widths: Sequence[int]):
        super().__init__()
        widths = [int(w) for w in layer_widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise InputShapeError(f"layer_widths must hold >= 2 positive ints, got {list(layer_widths)}")
        self.layer_widths = widths
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:])
        )

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def last_layer(self) -> nn.Linear:
        return self.layers[-1]

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        if x.shape[-1] != self.in_width:
            raise InputShapeError(f"expected input width {self.in_width}, got {tuple(x.shape)}")
        hidden: List[torch.Tensor] = []
        h = x
        for layer in self.layers[:-1]:
            h = nn.functional.silu(layer(h))
            hidden.append(h)
        return self.layers[-1](h), hidden


def forward(net: MlpNet, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    return net(x)


def backward(net: MlpNet | Callable[[torch.Tensor], Tuple[torch.Tensor, List[torch.Tensor]]], x: torch.Tensor,
             upstream: torch.Tensor, with_params: bool = True) -> Tuple[Dict[str, torch.Tensor], torch.Tensor]:
    """Gradients of <upstream, net(x)> w.r.t. every parameter and the input.

    ``net`` may be any callable returning ``(output, hidden)``; with
    ``with_params=False`` only the input gradient is taken.
    """
    x = x.detach().clone().requires_grad_(True)
    out, _ = net(x)
    if upstream.shape != out.shape:
        raise InputShapeError(f"upstream grad shape {tuple(upstream.shape)} != output shape {tuple(out.shape)}")
    named = list(net.named_parameters()) if with_params else []
    names = [n for n, _ in named]
    params = [p for _, p in named]
    grads = torch.autograd.grad((out * upstream).sum(), params + [x], allow_unused=True)
    param_grads = {
        n: (g if g is not None else torch.zeros_like(p))
        for n, p, g in zip(names, params, grads[:-1])
    }
    return param_grads, grads[-1]


def sinusoidal_features(x: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(MAX_FREQ), half, dtype=DTYPE))
    args = x.to(DTYPE).unsqueeze(-1) * freqs
    feats = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        feats = torch.cat([feats, torch.zeros_like(feats[..., :1])], dim=-1)
    return feats


class FourierFeatures(nn.Module):
    """Fixed random Fourier features; frequencies ~ N(0, 1) drawn once from ``seed``."""

    def __init__(self, dim: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        self.register_buffer("freqs", torch.randn(dim // 2, generator=gen, dtype=DTYPE))
        self.dim = dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        args = 2 * math.pi * x.to(DTYPE).unsqueeze(-1) * self.freqs
        feats = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        if self.dim % 2:
            feats = torch.cat([feats, torch.zeros_like(feats[..., :1])], dim=-1)
        return feats


def label_rows(labels: torch.Tensor, num_labels: int) -> torch.Tensor:
    labels = labels.long()
    if bool((labels >= num_labels).any()) or bool((labels < NULL_LABEL).any()):
        raise InputShapeError(f"labels must lie in [-1, {num_labels - 1}]")
    return torch.where(labels == NULL_LABEL, torch.full_like(labels, num_labels), labels)


class EmbeddingSpec(nn.Module):
    """e = t_embed + s_embed + omega_embed + cond_embed, all of width ``dim``.

    The s and omega projections start at zero, so a fresh student embeds
    exactly like the network it was copied from.
    """

    def __init__(self, dim: int, num_labels: int, use_s: bool = False, use_omega: bool = False, omega_seed: int = 0):
        super().__init__()
        self.dim = dim
        self.num_labels = num_labels
        self.use_s = use_s
        self.use_omega = use_omega
        self.t_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.cond = nn.Embedding(num_labels + 1, dim, dtype=DTYPE)
        if use_s:
            self.s_proj = nn.Linear(dim, dim, dtype=DTYPE)
            nn.init.zeros_(self.s_proj.weight)
            nn.init.zeros_(self.s_proj.bias)
        if use_omega:
            self.omega_features = FourierFeatures(dim, seed=omega_seed)
            self.omega_proj = nn.Linear(dim, dim, dtype=DTYPE)
            nn.init.zeros_(self.omega_proj.weight)
            nn.init.zeros_(self.omega_proj.bias)

    def forward(
        self,
        c_noise_t: torch.Tensor,
        labels: torch.Tensor,
        c_noise_s: Optional[torch.Tensor] = None,
        omega: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        e = self.t_proj(sinusoidal_features(c_noise_t, self.dim))
        e = e + self.cond(label_rows(labels, self.num_labels))
        if self.use_s and c_noise_s is not None:
            e = e + self.s_proj(sinusoidal_features(c_noise_s, self.dim))
        if self.use_omega and omega is not None:
            e = e + self.omega_proj(self.omega_features(omega))
        return e


class ConditionedNet(nn.Module):
    """MLP over the concatenation [c_in(t) z, e(t, s, omega, label)]."""

    def __init__(self, data_dim: int, hidden: Sequence[int], embed_dim: int, num_labels: int,
                 use_s: bool = False, use_omega: bool = False, omega_seed: int = 0):
        super().__init__()
        self.data_dim = data_dim
        self.arch = {
            "data_dim": data_dim, "hidden": [int(h) for h in hidden], "embed_dim": embed_dim,
            "num_labels": num_labels, "use_s": use_s, "use_omega": use_omega, "omega_seed": omega_seed,
        }
        self.embed = EmbeddingSpec(embed_dim, num_labels, use_s=use_s, use_omega=use_omega, omega_seed=omega_seed)
        self.mlp = MlpNet([data_dim + embed_dim, *hidden, data_dim])

    def forward(self, x_scaled: torch.Tensor, c_noise_t: torch.Tensor, labels: torch.Tensor,
                c_noise_s: Optional[torch.Tensor] = None, omega: Optional[torch.Tensor] = None,
                ) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        if x_scaled.shape[-1] != self.data_dim:
            raise InputShapeError(f"expected sample width {self.data_dim}, got {tuple(x_scaled.shape)}")
        e = self.embed(c_noise_t, labels, c_noise_s=c_noise_s, omega=omega)
        return self.mlp(torch.cat([x_scaled, e], dim=-1))


# ---------------- Optimizer ----------------
@dataclass
class RAdamState:
    params: Dict[str, nn.Parameter]
    optimizer: torch.optim.RAdam
    step: int = 0

    @classmethod
    def create(cls, named_params: Dict[str, nn.Parameter], lr: float = 8.0e-5,
               betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> "RAdamState":
        params = dict(named_params)
        opt = torch.optim.RAdam(list(params.values()), lr=lr, betas=betas, eps=eps)
        return cls(params=params, optimizer=opt)

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])


def radam_step(state: RAdamState, grads: Dict[str, torch.Tensor]) -> Dict[str, nn.Parameter]:
    """One RAdam update with ``grads`` (by parameter name); updates in place."""
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise InputShapeError(f"grad for {name} has shape {tuple(g.shape)}, param {tuple(p.shape)}")
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteError(f"non-finite gradient in parameter block '{name}'", block=name)
        p.grad = g.detach().clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step += 1
    return state.params


# ---------------- Checkpoints ----------------
def save_checkpoint(path: str | Path, tensors: Dict[str, torch.Tensor], kind: str, arch: Dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "arch": json.dumps(arch, sort_keys=True),
    }
    save_file({k: v.detach().contiguous() for k, v in tensors.items()}, str(path), metadata=metadata)
    return path


def load_checkpoint(path: str | Path, kind: str) -> Tuple[Dict[str, torch.Tensor], Dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(path)
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(path, f"unsupported checkpoint header {meta.get('format')}/{meta.get('version')}")
        if meta.get("kind") != kind:
            raise CheckpointError(path, f"expected a {kind} checkpoint, found {meta.get('kind')}")
        tensors = {k: f.get_tensor(k) for k in f.keys()}
    return tensors, json.loads(meta["arch"])


__all__ = [
    "NULL_LABEL",
    "MlpNet",
    "forward",
    "backward",
    "sinusoidal_features",
    "FourierFeatures",
    "EmbeddingSpec",
    "ConditionedNet",
    "RAdamState",
    "radam_step",
    "save_checkpoint",
    "load_checkpoint",
    "label_rows",
]
