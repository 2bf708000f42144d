"""Finite-difference verification of every differentiable operation."""

import pytest

from rmcaction.gradcheck import OP_CHECKS, format_results, run_suite


@pytest.fixture(scope="module")
def results32():
    return run_suite(32)


@pytest.fixture(scope="module")
def results64():
    return run_suite(64)


def test_suite_covers_every_operation(results32):
    names = {r.name for r in results32}
    for required in ("conv2d", "conv3d", "maxpool3d", "maxpool2d", "global_avgpool",
                     "linear", "relu", "batchnorm", "softmax_cross_entropy",
                     "smooth_l1", "crop_pool", "residual_block_2d",
                     "residual_block_3d", "full_mixed_backbone"):
        assert required in names


@pytest.mark.parametrize("idx", range(len(OP_CHECKS)))
def test_op_passes_at_32_bit(results32, idx):
    r = results32[idx]
    assert r.passed, f"{r.name}: max rel err {r.max_rel_err:.3e} (tol {r.tol:.0e})"


@pytest.mark.parametrize("idx", range(len(OP_CHECKS)))
def test_op_passes_at_64_bit(results64, idx):
    r = results64[idx]
    assert r.passed, f"{r.name}: max rel err {r.max_rel_err:.3e} (tol {r.tol:.0e})"


def test_64_bit_tolerance_is_tight(results64):
    assert all(r.tol == 1e-6 for r in results64)


def test_format_results_is_a_table(results32):
    table = format_results(results32)
    assert "PASS" in table and "operation" in table
