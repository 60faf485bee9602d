import pytest

from pifenet.config import PipelineConfig
from pifenet.selftest import (GRADIENT_CASES, check_ap_oracle, check_gate_normalization, check_iou,
                              check_nms, check_relu_identity, gradient_error)


@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
def test_gradient_case(name):
    assert gradient_error(name, seed=7) < 1e-4


def test_relu_identity_pristine_and_perturbed():
    assert check_relu_identity(PipelineConfig()).passed
    assert not check_relu_identity(PipelineConfig(theta_init_std=0.1)).passed


def test_gate_normalization_pristine_and_broken():
    assert check_gate_normalization(PipelineConfig()).passed
    assert not check_gate_normalization(PipelineConfig(gate_eps=1.0)).passed


def test_oracle_checks():
    assert check_iou(samples=40_000).passed
    assert check_ap_oracle(cases=4).passed
    assert check_nms(cases=4).passed
