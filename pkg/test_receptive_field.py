"""Tests for analytic and empirical receptive fields and the dilation planner."""

import logging

import numpy as np
import pytest

from src.convnova_model import ModelConfig, init_params
from src.errors import PreconditionError
from src.receptive_field import plan_dilation_for_fraction, receptive_field_analytic, receptive_field_empirical
from src.tensor_engine import Rng


def test_analytic_receptive_field_values():
    assert receptive_field_analytic(ModelConfig(kernel_size=9, dilation_base=4, n_gcb=5)) == 697
    assert receptive_field_analytic(ModelConfig(kernel_size=3, dilation_base=1, n_gcb=5)) == 13
    assert receptive_field_analytic(ModelConfig(kernel_size=7, n_gcb=1, stem_kernel_size=1)) == 7
    assert receptive_field_analytic(ModelConfig(kernel_size=9, n_gcb=1, stem_kernel_size=1)) == 9
    two_stages = ModelConfig(kernel_size=9, dilation_base=4, n_gcb=10)
    assert receptive_field_analytic(two_stages) == 1 + 8 + 8 * 172


def test_analytic_rejects_unet():
    with pytest.raises(PreconditionError):
        receptive_field_analytic(ModelConfig(variant="unet_downsample"))


def test_empirical_matches_analytic_for_default_schedule():
    config = ModelConfig(hidden_dim=4, kernel_size=9, dilation_base=4, n_gcb=5)
    assert receptive_field_empirical(None, config, 720, seed=0) == 697


def test_empirical_matches_analytic_on_random_configs():
    rng = Rng(2024)
    variants = ("dual_branch", "single_gate", "additive")
    for trial in range(12):
        config = ModelConfig(
            hidden_dim=int(rng.integers(3, 7)),
            n_gcb=int(rng.integers(1, 5)),
            stage_size=int(rng.integers(2, 6)),
            dilation_base=int(rng.integers(1, 4)),
            kernel_size=int(rng.choice(3, 1)[0]) * 2 + 3,
            stem_kernel_size=int(rng.choice(3, 1)[0]) * 2 + 1,
            variant=variants[trial % 3],
        )
        analytic = receptive_field_analytic(config)
        length = analytic + int(rng.integers(1, 20))
        assert receptive_field_empirical(None, config, length, seed=trial) == analytic, config


def test_empirical_uses_given_parameters():
    config = ModelConfig(hidden_dim=4, n_gcb=2, kernel_size=3, dilation_base=2)
    params = init_params(config, seed=1, std=0.5)
    assert receptive_field_empirical(params, config, 30) == receptive_field_analytic(config)


def test_empirical_preconditions():
    config = ModelConfig(hidden_dim=4, n_gcb=2, kernel_size=3)
    analytic = receptive_field_analytic(config)
    with pytest.raises(PreconditionError):
        receptive_field_empirical(None, config, analytic)
    with pytest.raises(PreconditionError):
        receptive_field_empirical(None, ModelConfig(hidden_dim=1, n_gcb=2, kernel_size=3), 50)
    params = init_params(config, seed=0)
    for name, tensor in params.named_tensors().items():
        if name.endswith(".w"):
            tensor.data = np.zeros_like(tensor.data)
    with pytest.raises(PreconditionError):
        receptive_field_empirical(params, config, 50)


def test_planner_stays_within_fraction():
    plan = plan_dilation_for_fraction(500, 0.15, kernel_size=9, n_gcb=5)
    assert plan.base == 1
    assert plan.receptive_field == 49
    assert plan.receptive_field <= 75
    assert not plan.infeasible

    plan = plan_dilation_for_fraction(5000, 0.15, kernel_size=9, n_gcb=5)
    assert plan.base == 4 and plan.receptive_field == 697


def test_planner_matches_brute_force_search():
    for length in (300, 1000, 4096, 20000):
        for fraction in (0.1, 0.15, 0.5, 1.0):
            plan = plan_dilation_for_fraction(length, fraction, kernel_size=5, n_gcb=5)
            fields = {base: receptive_field_analytic(ModelConfig(hidden_dim=1, kernel_size=5, n_gcb=5,
                                                                 dilation_base=base))
                      for base in range(1, 60)}
            feasible = [base for base, field in fields.items() if field <= fraction * length]
            if feasible:
                assert plan.base == max(feasible)
                assert plan.receptive_field == fields[plan.base]
            else:
                assert plan.infeasible


def test_planner_reports_infeasible_target(caplog):
    with caplog.at_level(logging.WARNING):
        plan = plan_dilation_for_fraction(100, 0.15, kernel_size=9, n_gcb=5)
    assert plan.infeasible and plan.base == 1 and plan.receptive_field == 49
    assert "exceeds" in caplog.text


def test_planner_with_short_stages_keeps_base_one():
    plan = plan_dilation_for_fraction(10000, 0.5, kernel_size=3, n_gcb=2)
    assert plan.base == 1 and not plan.infeasible


def test_planner_rejects_bad_fraction():
    with pytest.raises(PreconditionError):
        plan_dilation_for_fraction(500, 0.0, kernel_size=9, n_gcb=5)
    with pytest.raises(PreconditionError):
        plan_dilation_for_fraction(500, 1.5, kernel_size=9, n_gcb=5)
