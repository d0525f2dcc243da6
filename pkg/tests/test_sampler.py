import math

import pytest
import torch

from src.ctm_distill import jump
from src.errors import ArgumentError
from src.netcore import NULL_LABEL
from src.sampler import (SamplerConfig, blended_jump, chain_rngs, draw_initial_noise, preservation_distance, sample,
                         sampling_times)
from src.utils import DTYPE, normal


def test_nu_one_matches_conditional_loop(student):
    cfg = SamplerConfig(steps=4, gamma=0.5, nu=1.0, omega=3.0, label=1, seed=9, num_samples=6)
    out, trace = sample(student, cfg)
    rngs = chain_rngs(9, range(6))
    z = draw_initial_noise(student, rngs)
    times = sampling_times(student, 4)
    with torch.no_grad():
        for n in range(4):
            t_next = float(times[n + 1])
            t_tilde = max(math.sqrt(1 - 0.25) * t_next, student.schedule.sigma_min)
            z = jump(student, "ema", z, 1, 3.0, float(times[n]), t_tilde)
            if n < 3:
                z = z + 0.5 * t_next * torch.stack([normal(r, 2) for r in rngs])
    assert torch.equal(out, z)
    assert len(trace.states) == 5


def test_deterministic_sampling_is_repeatable(student):
    cfg = SamplerConfig(steps=3, gamma=0.0, seed=4, num_samples=5)
    a, _ = sample(student, cfg)
    b, _ = sample(student, cfg)
    assert torch.equal(a, b)


def test_full_renoise_jumps_to_sigma_min(student):
    cfg = SamplerConfig(steps=5, gamma=1.0, num_samples=3)
    _, trace = sample(student, cfg)
    assert trace.jump_targets == [student.schedule.sigma_min] * 5
    assert trace.times[0] == student.schedule.sigma_max
    assert all(a > b for a, b in zip(trace.times, trace.times[1:]))


def test_jump_targets_shrink_with_gamma(student):
    _, trace = sample(student, SamplerConfig(steps=3, gamma=0.6, num_samples=2))
    for t_next, t_tilde in zip(trace.times[1:], trace.jump_targets):
        assert t_tilde == pytest.approx(max(0.8 * t_next, student.schedule.sigma_min), rel=1e-12)


def test_null_label_ignores_nu(student):
    z = torch.randn(4, 2, dtype=DTYPE) * 10
    base = blended_jump(student, z, torch.full((4,), NULL_LABEL), 3.0, 1.0, 10.0, 1.0)
    for nu in (0.0, 0.4, 2.0):
        assert torch.equal(blended_jump(student, z, torch.full((4,), NULL_LABEL), 3.0, nu, 10.0, 1.0), base)


def test_nu_blend_is_affine(student):
    z = torch.randn(3, 2, dtype=DTYPE) * 5
    labels = torch.tensor([0, 1, NULL_LABEL])
    cond = jump(student, "ema", z, labels, 3.0, 5.0, 0.5)
    uncond = jump(student, "ema", z, NULL_LABEL, 3.0, 5.0, 0.5)
    out = blended_jump(student, z, labels, 3.0, 0.3, 5.0, 0.5)
    assert torch.allclose(out[:2], 0.3 * cond[:2] + 0.7 * uncond[:2], atol=1e-12)
    assert torch.equal(out[2], uncond[2])


def test_sampler_config_rejects_bad_values():
    with pytest.raises(ArgumentError):
        SamplerConfig(steps=0)
    with pytest.raises(ArgumentError):
        SamplerConfig(gamma=1.5)
    with pytest.raises(ArgumentError):
        SamplerConfig(num_samples=0)


def test_preservation_distance(student):
    cfg = SamplerConfig(omega=3.0, label=0, seed=1)
    noise = torch.randn(8, 2, dtype=DTYPE) * student.schedule.sigma_max
    assert preservation_distance(student, cfg, 4, 4, 0.0, noise) == 0.0
    assert preservation_distance(student, cfg, 1, 4, 0.0, noise) >= 0.0
    with pytest.raises(ArgumentError):
        preservation_distance(student, cfg, 1, 4, 0.0, noise, other_noise=noise[:5])


def test_chains_do_not_depend_on_their_neighbours(student):
    cfg = SamplerConfig(steps=3, gamma=0.4, seed=2)
    all_chains, _ = sample(student, cfg, chain_ids=[0, 1, 2, 3])
    alone, _ = sample(student, cfg, chain_ids=[2])
    assert torch.allclose(all_chains[2], alone[0], atol=1e-12)


def test_given_noise_and_labels_are_used(student):
    cfg = SamplerConfig(steps=1, num_samples=99)
    noise = torch.zeros(3, 2, dtype=DTYPE)
    out, trace = sample(student, cfg, initial_noise=noise, labels=torch.tensor([0, 1, NULL_LABEL]))
    assert out.shape == (3, 2)
    assert torch.equal(trace.states[0], noise)
    with pytest.raises(ArgumentError):
        sample(student, cfg, initial_noise=noise, labels=torch.tensor([0, 1]))
