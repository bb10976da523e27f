import math

import numpy as np
import pytest

from helpers import bce_loops, block_mean_loops
from lingseg.errors import ConfigError, ContractError, DimensionError
from lingseg.loss import (
    LossReport,
    bce_loss,
    downscale_ignore,
    downscale_mask,
    multiscale_loss,
)
from lingseg.model import ForwardOutput, ForwardTrace
from lingseg.tensor import Tape, Tensor, backward, grad_check, sigmoid


def fake_output(p, aux=None):
    aux = aux or []
    return ForwardOutput(p=p, aux=aux, trace=ForwardTrace())


class TestBceLoss:
    def test_uniform_half_is_ln2(self):
        p = Tensor(np.full((1, 1, 4, 4), 0.5))
        gm = np.random.default_rng(0).integers(0, 2, size=(1, 1, 4, 4))
        assert abs(bce_loss(p, gm).item() - math.log(2.0)) < 1e-12

    def test_perfect_prediction_near_zero(self):
        gm = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2)
        loss = bce_loss(Tensor(gm), gm).item()
        assert loss <= -math.log(1.0 - 1e-7) + 1e-12

    def test_ignore_bottom_row_case(self):
        p = Tensor(np.array([[0.9, 0.1], [0.5, 0.5]]).reshape(1, 1, 2, 2))
        gm = np.array([[1.0, 0.0], [1.0, 0.0]]).reshape(1, 1, 2, 2)
        ignore = np.array([[0, 0], [1, 1]]).reshape(1, 1, 2, 2)
        got = bce_loss(p, gm, ignore).item()
        assert abs(got - (-math.log(0.9))) < 1e-12
        assert abs(got - 0.1054) < 1e-4

    def test_matches_scalar_oracle_randomized(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            shape = (1, 1, int(rng.integers(1, 6)), int(rng.integers(1, 6)))
            p = rng.random(shape)
            gm = rng.integers(0, 2, size=shape).astype(float)
            ig = rng.integers(0, 2, size=shape)
            if (ig == 1).all():
                ig[0, 0, 0, 0] = 0
            got = bce_loss(Tensor(p), gm, ig).item()
            want = bce_loops(p, gm, ig)
            assert abs(got - want) < 1e-10

    def test_all_ignored_rejected(self):
        p = Tensor(np.full((1, 1, 2, 2), 0.5))
        with pytest.raises(ContractError):
            bce_loss(p, np.zeros((1, 1, 2, 2)), np.ones((1, 1, 2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            bce_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), np.zeros((1, 1, 3, 3)))

    def test_nonnegative_and_invariant_to_ignored_content(self):
        rng = np.random.default_rng(2)
        p1 = rng.random((1, 1, 4, 4))
        gm = rng.integers(0, 2, size=(1, 1, 4, 4)).astype(float)
        ig = np.zeros((1, 1, 4, 4), dtype=int)
        ig[0, 0, :2] = 1
        p2 = p1.copy()
        p2[0, 0, :2] = rng.random((2, 4))  # perturb only ignored pixels
        l1 = bce_loss(Tensor(p1), gm, ig).item()
        l2 = bce_loss(Tensor(p2), gm, ig).item()
        assert l1 == l2
        assert l1 >= 0.0

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        logits = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
        gm = rng.integers(0, 2, size=(1, 1, 3, 3)).astype(float)

        def f():
            return bce_loss(sigmoid(logits), gm)

        err = grad_check(f, {"logits": logits}, eps=1e-4, samples_per_tensor=9)
        assert err < 1e-3


class TestDownscaleMask:
    def test_two_by_two_block(self):
        gm = np.array([[1.0, 1.0], [0.0, 0.0]])
        np.testing.assert_array_equal(downscale_mask(gm, (1, 1)), [[0.5]])

    def test_all_ones_stays_ones(self):
        gm = np.ones((8, 8))
        np.testing.assert_array_equal(downscale_mask(gm, (2, 2)), np.ones((2, 2)))

    def test_matches_block_mean_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            gm = rng.integers(0, 2, size=(8, 8)).astype(float)
            got = downscale_mask(gm, (4, 4))
            want = block_mean_loops(gm, 4, 4)
            np.testing.assert_array_equal(got, want)

    def test_batched_input(self):
        rng = np.random.default_rng(5)
        gm = rng.random((3, 1, 4, 4))
        out = downscale_mask(gm, (2, 2))
        assert out.shape == (3, 1, 2, 2)
        np.testing.assert_allclose(out, block_mean_loops(gm, 2, 2))

    def test_non_integer_ratio_rejected(self):
        with pytest.raises(ConfigError):
            downscale_mask(np.ones((6, 6)), (4, 4))

    def test_ignore_downscale_majority(self):
        ig = np.zeros((4, 4), dtype=int)
        ig[:2, :2] = 1   # top-left block fully ignored
        ig[0, 2] = 1     # top-right block quarter ignored
        out = downscale_ignore(ig, (2, 2))
        np.testing.assert_array_equal(out, [[1, 0], [0, 0]])


class TestMultiscaleLoss:
    def test_half_resolution_weight(self):
        rng = np.random.default_rng(6)
        p = Tensor(rng.random((1, 1, 4, 4)))
        aux = Tensor(rng.random((1, 1, 2, 2)))
        gm = rng.integers(0, 2, size=(1, 1, 4, 4)).astype(float)
        report = multiscale_loss(fake_output(p, [aux]), gm)
        assert report.aux_terms[0][1] == 0.25

    def test_linear_weight_mode(self):
        rng = np.random.default_rng(7)
        p = Tensor(rng.random((1, 1, 4, 4)))
        aux = Tensor(rng.random((1, 1, 2, 2)))
        gm = rng.integers(0, 2, size=(1, 1, 4, 4)).astype(float)
        report = multiscale_loss(fake_output(p, [aux]), gm, weight_mode="linear")
        assert abs(report.aux_terms[0][1] - 0.5) < 1e-12

    def test_perfect_everywhere_near_zero(self):
        gm = np.ones((1, 1, 4, 4))
        out = fake_output(Tensor(gm.copy()), [Tensor(np.ones((1, 1, 2, 2)))])
        report = multiscale_loss(out, gm)
        assert report.total.item() <= 1e-6

    def test_disabled_is_exactly_plain_bce(self):
        rng = np.random.default_rng(8)
        p = Tensor(rng.random((1, 1, 4, 4)))
        aux = Tensor(rng.random((1, 1, 2, 2)))
        gm = rng.integers(0, 2, size=(1, 1, 4, 4)).astype(float)
        report = multiscale_loss(fake_output(p, [aux]), gm, enabled=False)
        plain = bce_loss(p, gm)
        assert report.total.item() == plain.item()
        assert report.aux_terms == []
        assert report.total is report.final_term

    def test_depth_two_toy_matches_scalar_sum(self):
        rng = np.random.default_rng(9)
        p = rng.random((1, 1, 8, 8))
        a1 = rng.random((1, 1, 2, 2))
        a2 = rng.random((1, 1, 4, 4))
        gm = rng.integers(0, 2, size=(1, 1, 8, 8)).astype(float)
        out = fake_output(Tensor(p), [Tensor(a1), Tensor(a2)])
        report = multiscale_loss(out, gm)
        want = bce_loops(p, gm)
        want += (4 / 64) * bce_loops(a1, block_mean_loops(gm, 2, 2))
        want += (16 / 64) * bce_loops(a2, block_mean_loops(gm, 4, 4))
        assert abs(report.total.item() - want) < 1e-10

    def test_report_identity(self):
        rng = np.random.default_rng(10)
        p = Tensor(rng.random((1, 1, 4, 4)))
        aux = [Tensor(rng.random((1, 1, 2, 2)))]
        gm = rng.integers(0, 2, size=(1, 1, 4, 4)).astype(float)
        report = multiscale_loss(fake_output(p, aux), gm)
        recon = report.final_term.item() + sum(w * v.item() for _, w, v in report.aux_terms)
        assert abs(report.total.item() - recon) < 1e-12

    def test_total_gradient_flows_to_all_maps(self):
        rng = np.random.default_rng(11)
        p = Tensor(rng.random((1, 1, 4, 4)), requires_grad=True)
        aux = Tensor(rng.random((1, 1, 2, 2)), requires_grad=True)
        gm = rng.integers(0, 2, size=(1, 1, 4, 4)).astype(float)
        with Tape() as tape:
            report = multiscale_loss(fake_output(p, [aux]), gm)
        backward(tape, report.total)
        assert p.grad is not None and np.abs(p.grad).max() > 0
        assert aux.grad is not None and np.abs(aux.grad).max() > 0
