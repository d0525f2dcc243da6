"""Per-label diagonal Gaussian mixtures: the toy data source p_data(. | c).

Components are stored flat (``comp_label`` maps each component to its
label), so labels may own different numbers of components. All closed-form
quantities (noisy responsibilities, posterior means, label posteriors,
log-likelihoods) are computed with log-sum-exp.
"""
from __future__ import annotations
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from ..errors import ArgumentError, ConfigError
from ..netcore import NULL_LABEL
from ..utils import DTYPE, as_tensor

LOG_2PI = math.log(2 * math.pi)


@dataclass
class ConditionedMixture:
    label_names: List[str]
    label_probs: torch.Tensor   # (L,)
    comp_label: torch.Tensor    # (C,) long
    comp_weight: torch.Tensor   # (C,) weight within its label
    means: torch.Tensor         # (C, D)
    variances: torch.Tensor     # (C, D)

    def __post_init__(self):
        self.label_probs = as_tensor(self.label_probs)
        self.comp_weight = as_tensor(self.comp_weight)
        self.means = as_tensor(self.means)
        self.variances = as_tensor(self.variances)
        self.comp_label = torch.as_tensor(self.comp_label, dtype=torch.long)
        L = len(self.label_names)
        if self.label_probs.shape != (L,) or bool((self.label_probs < 0).any()):
            raise ArgumentError("label_probs must be a nonnegative vector, one entry per label")
        if abs(float(self.label_probs.sum()) - 1.0) > 1e-9:
            raise ArgumentError("label_probs must sum to 1")
        if bool((self.comp_weight < 0).any()):
            raise ArgumentError("component weights must be nonnegative")
        for lab in range(L):
            mask = self.comp_label == lab
            if not bool(mask.any()):
                raise ArgumentError(f"label '{self.label_names[lab]}' has no components")
            if abs(float(self.comp_weight[mask].sum()) - 1.0) > 1e-9:
                raise ArgumentError(f"weights of label '{self.label_names[lab]}' must sum to 1")
        if self.means.shape != self.variances.shape or self.means.shape[0] != self.comp_label.numel():
            raise ArgumentError("means/variances must be (C, D) with one row per component")
        if not bool((self.variances > 0).all()):
            raise ArgumentError("variances must be strictly positive")

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @property
    def num_labels(self) -> int:
        return len(self.label_names)

    def marginal_weights(self) -> torch.Tensor:
        return self.label_probs[self.comp_label] * self.comp_weight

    def component_log_weights(self, labels: torch.Tensor) -> torch.Tensor:
        """(B, C) log prior over components; the null label uses the marginal."""
        labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
        cond = torch.where(
            self.comp_label[None, :] == labels[:, None],
            torch.log(self.comp_weight)[None, :],
            torch.full((1,), -math.inf, dtype=DTYPE),
        )
        marg = torch.log(self.marginal_weights())[None, :].expand_as(cond)
        return torch.where((labels == NULL_LABEL)[:, None], marg, cond)

    def _log_normal(self, z: torch.Tensor, extra_var: torch.Tensor) -> torch.Tensor:
        # (B, C): log N(z; mu_k, diag(var_k + extra_var))
        var = self.variances[None, :, :] + extra_var.reshape(-1, 1, 1)
        diff = z[:, None, :] - self.means[None, :, :]
        return -0.5 * ((diff ** 2) / var + torch.log(var) + LOG_2PI).sum(-1)

    def log_responsibilities(self, z_t: torch.Tensor, t, labels: torch.Tensor) -> torch.Tensor:
        z_t = as_tensor(z_t).reshape(-1, self.dim)
        t = as_tensor(t).reshape(-1).expand(z_t.shape[0])
        logits = self.component_log_weights(labels).expand(z_t.shape[0], -1) + self._log_normal(z_t, t ** 2)
        return logits - torch.logsumexp(logits, dim=-1, keepdim=True)

    def posterior_mean(self, z_t: torch.Tensor, t, labels: torch.Tensor) -> torch.Tensor:
        """E[z0 | z_t, label] for z_t = z0 + t eps."""
        shape = z_t.shape
        z = as_tensor(z_t).reshape(-1, self.dim)
        t = as_tensor(t).reshape(-1).expand(z.shape[0])
        labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1).expand(z.shape[0])
        r = torch.exp(self.log_responsibilities(z, t, labels))                # (B, C)
        shrink = self.variances[None] / (self.variances[None] + (t ** 2)[:, None, None])
        comp_mean = self.means[None] + shrink * (z[:, None, :] - self.means[None])
        return (r[..., None] * comp_mean).sum(1).reshape(shape)

    def log_prob(self, x: torch.Tensor, labels: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = as_tensor(x).reshape(-1, self.dim)
        if labels is None:
            labels = torch.full((x.shape[0],), NULL_LABEL, dtype=torch.long)
        logits = self.component_log_weights(labels).expand(x.shape[0], -1) + self._log_normal(x, torch.zeros(x.shape[0], dtype=DTYPE))
        return torch.logsumexp(logits, dim=-1)

    def label_log_posterior(self, x: torch.Tensor) -> torch.Tensor:
        """(B, L) log p(label | x)."""
        x = as_tensor(x).reshape(-1, self.dim)
        comp = torch.log(self.marginal_weights())[None, :] + self._log_normal(x, torch.zeros(x.shape[0], dtype=DTYPE))
        per_label = torch.stack(
            [torch.logsumexp(comp[:, self.comp_label == lab], dim=-1) for lab in range(self.num_labels)], dim=-1
        )
        return per_label - torch.logsumexp(per_label, dim=-1, keepdim=True)

    def sample(self, n: int, rng: np.random.Generator, labels: Optional[torch.Tensor] = None):
        """Draw ``n`` (z0, label) pairs; labels drawn from ``label_probs`` unless given."""
        if labels is None:
            labels_np = rng.choice(self.num_labels, size=n, p=self.label_probs.numpy())
        else:
            labels_np = torch.as_tensor(labels, dtype=torch.long).reshape(-1).expand(n).numpy()
        comp = np.empty(n, dtype=np.int64)
        for lab in range(self.num_labels):
            idx = np.nonzero(labels_np == lab)[0]
            if idx.size == 0:
                continue
            owned = np.nonzero(self.comp_label.numpy() == lab)[0]
            p = self.comp_weight.numpy()[owned]
            comp[idx] = owned[rng.choice(owned.size, size=idx.size, p=p / p.sum())]
        eps = torch.from_numpy(rng.standard_normal((n, self.dim))).to(DTYPE)
        comp_t = torch.from_numpy(comp)
        z0 = self.means[comp_t] + torch.sqrt(self.variances[comp_t]) * eps
        return z0, torch.from_numpy(np.asarray(labels_np, dtype=np.int64))

    def global_moments(self):
        w = self.marginal_weights()[:, None]
        mean = (w * self.means).sum(0)
        var = (w * (self.variances + self.means ** 2)).sum(0) - mean ** 2
        return mean, var

    def standardized(self, sigma_data: float) -> "ConditionedMixture":
        """Shift to zero global mean and rescale so the average per-coordinate std is sigma_data."""
        mean, var = self.global_moments()
        scale = sigma_data / math.sqrt(float(var.mean()))
        return ConditionedMixture(
            label_names=list(self.label_names),
            label_probs=self.label_probs.clone(),
            comp_label=self.comp_label.clone(),
            comp_weight=self.comp_weight.clone(),
            means=(self.means - mean) * scale,
            variances=self.variances * scale ** 2,
        )


def single_gaussian(mean: Sequence[float], var: Sequence[float]) -> ConditionedMixture:
    return ConditionedMixture(
        label_names=["all"], label_probs=[1.0], comp_label=[0], comp_weight=[1.0],
        means=[list(mean)], variances=[list(var)],
    )


def from_spec(spec: List[Dict]) -> ConditionedMixture:
    """Explicit mixture: [{label, prob?, components: [{weight, mean, var}, ...]}, ...]."""
    names, probs, comp_label, comp_weight, means, variances = [], [], [], [], [], []
    for lab, entry in enumerate(spec):
        try:
            names.append(str(entry["label"]))
            probs.append(float(entry.get("prob", 1.0 / len(spec))))
            for comp in entry["components"]:
                comp_label.append(lab)
                comp_weight.append(float(comp["weight"]))
                means.append([float(v) for v in comp["mean"]])
                variances.append([float(v) for v in comp["var"]])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"data.mixture[{lab}]", f"malformed entry ({exc})") from exc
    try:
        return ConditionedMixture(names, probs, comp_label, comp_weight, means, variances)
    except ArgumentError as exc:
        raise ConfigError("data.mixture", str(exc)) from exc


def blob_mixture(dim: int, num_labels: int, components: int, rng: np.random.Generator,
                 comp_std: float = 0.12) -> ConditionedMixture:
    """Random well-spread blobs in [-1, 1]^dim, ``components`` per label."""
    C = num_labels * components
    means = rng.uniform(-1.0, 1.0, (C, dim))
    stds = comp_std * rng.uniform(0.6, 1.4, (C, dim))
    weights = rng.uniform(0.5, 1.5, (num_labels, components))
    weights /= weights.sum(1, keepdims=True)
    return ConditionedMixture(
        label_names=[f"label{k}" for k in range(num_labels)],
        label_probs=np.full(num_labels, 1.0 / num_labels),
        comp_label=np.repeat(np.arange(num_labels), components),
        comp_weight=weights.reshape(-1),
        means=means,
        variances=stds ** 2,
    )


def smooth_signal_mixture(dim: int, num_labels: int, components: int, rng: np.random.Generator,
                          noise_std: float = 0.05) -> ConditionedMixture:
    """Component means are smooth signals: a low-frequency carrier per label
    under a slowly varying amplitude envelope per component."""
    n = np.arange(dim) / dim
    means, labels = [], []
    for lab in range(num_labels):
        base = 2.0 + 2.0 * lab
        for _ in range(components):
            freq = base + rng.uniform(-0.5, 0.5)
            carrier = np.sin(2 * np.pi * freq * n + rng.uniform(0, 2 * np.pi))
            env = 0.6 + 0.4 * np.cos(2 * np.pi * n * rng.uniform(0.5, 1.5) + rng.uniform(0, 2 * np.pi))
            means.append(env * rng.uniform(0.5, 1.5) * carrier)
            labels.append(lab)
    weights = np.full((num_labels, components), 1.0 / components)
    return ConditionedMixture(
        label_names=[f"label{k}" for k in range(num_labels)],
        label_probs=np.full(num_labels, 1.0 / num_labels),
        comp_label=np.asarray(labels),
        comp_weight=weights.reshape(-1),
        means=np.stack(means),
        variances=np.full((len(means), dim), noise_std ** 2),
    )


__all__ = [
    "ConditionedMixture",
    "single_gaussian",
    "from_spec",
    "blob_mixture",
    "smooth_signal_mixture",
]
