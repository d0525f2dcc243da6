"""Metrics: energy distance, condition accuracy, preservation sweeps and the
step/quality trade-off table.

ED(A, B) = 2 E||a - b|| - E||a - a'|| - E||b - b'||   (V-statistic, self-pairs included)
ACC      = fraction of samples whose Bayes label under the mixture is the intended one
"""
from __future__ import annotations
import logging, time
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .ctm_distill import StudentModel
from .data.mixture import ConditionedMixture
from .errors import ArgumentError, InputShapeError
from .netcore import NULL_LABEL
from .sampler import SamplerConfig, preservation_distance, sample
from .utils import as_tensor, elapsed_ms

logger = logging.getLogger(__name__)

CHUNK = 2048
PRESERVATION_GAMMAS = (0.0, 0.2, 0.5, 1.0)


def _mean_pair_distance(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    total = torch.zeros((), dtype=x.dtype)
    for i in range(0, x.shape[0], CHUNK):
        d = torch.cdist(x[i:i + CHUNK], y, compute_mode="donot_use_mm_for_euclid_dist")
        total = total + d.sum()
    return total / (x.shape[0] * y.shape[0])


def energy_distance(a: torch.Tensor, b: torch.Tensor) -> float:
    a = as_tensor(a)
    b = as_tensor(b)
    a = a.reshape(a.shape[0], -1) if a.ndim != 2 else a
    b = b.reshape(b.shape[0], -1) if b.ndim != 2 else b
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ArgumentError("energy distance needs two nonempty sets")
    if a.shape[1] != b.shape[1]:
        raise InputShapeError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    value = 2 * _mean_pair_distance(a, b) - _mean_pair_distance(a, a) - _mean_pair_distance(b, b)
    return max(0.0, float(value))


def energy_permutation_null(a: torch.Tensor, b: torch.Tensor, permutations: int = 200,
                            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Energy distances of random equal-size re-splits of the pooled set."""
    rng = rng if rng is not None else np.random.default_rng(0)
    pooled = torch.cat([as_tensor(a), as_tensor(b)], dim=0)
    n = a.shape[0]
    out = np.empty(permutations)
    for k in range(permutations):
        perm = torch.from_numpy(rng.permutation(pooled.shape[0]))
        out[k] = energy_distance(pooled[perm[:n]], pooled[perm[n:]])
    return out


def bayes_labels(samples: torch.Tensor, mixture: ConditionedMixture) -> torch.Tensor:
    return torch.argmax(mixture.label_log_posterior(samples), dim=-1)


def condition_accuracy(samples: torch.Tensor, labels: torch.Tensor, mixture: ConditionedMixture) -> float:
    """Fraction of samples whose Bayes label matches ``labels``; null-label samples are not scored."""
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    keep = labels != NULL_LABEL
    if not bool(keep.any()):
        raise ArgumentError("condition accuracy needs at least one non-null label")
    pred = bayes_labels(as_tensor(samples)[keep], mixture)
    return float((pred == labels[keep]).to(torch.float64).mean())


def bayes_accuracy(mixture: ConditionedMixture, n: int, rng: np.random.Generator) -> float:
    """Monte-Carlo accuracy of the Bayes classifier on draws from the true conditionals."""
    x, labels = mixture.sample(n, rng)
    return condition_accuracy(x, labels, mixture)


def balanced_labels(num: int, num_labels: int) -> torch.Tensor:
    return torch.arange(num, dtype=torch.long) % num_labels


def preservation_sweep(student: StudentModel, config: SamplerConfig, noise: torch.Tensor, labels: torch.Tensor,
                       steps_a: int = 1, steps_b: int = 16,
                       gammas: Sequence[float] = PRESERVATION_GAMMAS) -> List[Dict[str, Any]]:
    return [
        {
            "gamma": g,
            "steps_a": steps_a,
            "steps_b": steps_b,
            "preservation": preservation_distance(student, config, steps_a, steps_b, g, noise, labels=labels),
        }
        for g in gammas
    ]


def tradeoff_report(student: StudentModel, mixture: ConditionedMixture, reference: torch.Tensor,
                    steps_list: Sequence[int], settings: Sequence[Tuple[float, float]], config: SamplerConfig,
                    ) -> Tuple[List[Dict[str, Any]], List[float]]:
    """Rows of (steps, omega, nu, energy distance, condition accuracy, preservation vs 1 step).

    Wall times come back separately, one per row, so the table itself stays deterministic.
    """
    labels = balanced_labels(config.num_samples, mixture.num_labels)
    rows: List[Dict[str, Any]] = []
    walls: List[float] = []
    for omega, nu in settings:
        base = replace(config, omega=float(omega), nu=float(nu))
        noise = None
        one_step = None
        for steps in steps_list:
            cfg = replace(base, steps=int(steps))
            start = time.perf_counter()
            x, trace = sample(student, cfg, labels=labels)
            walls.append(elapsed_ms(start))
            if noise is None:
                noise = trace.states[0]
                one_step, _ = sample(student, replace(base, steps=1), initial_noise=noise, labels=labels)
            rows.append({
                "steps": int(steps),
                "omega": float(omega),
                "nu": float(nu),
                "energy_distance": energy_distance(x, reference),
                "condition_accuracy": condition_accuracy(x, labels, mixture),
                "preservation_vs_1step": float(torch.linalg.vector_norm(x - one_step, dim=-1).mean()),
            })
            logger.debug("tradeoff row %s", rows[-1])
    return rows, walls


__all__ = [
    "energy_distance",
    "energy_permutation_null",
    "bayes_labels",
    "condition_accuracy",
    "bayes_accuracy",
    "balanced_labels",
    "preservation_sweep",
    "tradeoff_report",
]
