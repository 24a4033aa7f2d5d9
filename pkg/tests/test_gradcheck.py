"""The finite-difference checker itself and the suite behind ``ffcl gradcheck``."""

import numpy as np
import pytest

import ffcl.tensor as T
from ffcl.checks import CHECK_NAMES, run_check, run_suite
from ffcl.contrastive import cosine_embedding_loss
from ffcl.gradcheck import finite_diff_gradcheck, relative_error
from ffcl.tensor import Tensor

F64 = np.float64
PRIMITIVES = ("add", "sub", "mul", "relu", "sigmoid", "sum", "mean", "reshape", "transpose", "take_rows",
              "concat", "matmul", "bias_add", "conv2d", "global_avg_pool", "cosine_similarity", "bce_loss")


class TestChecker:
    def test_sum_is_exact(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), dtype=F64)
        report = finite_diff_gradcheck(lambda t: T.sum_(t), x)
        assert report.passed
        assert report.worst < 1e-9
        assert report.probes == 12

    def test_pair_loss_same_unit_pairs(self, rng):
        v = rng.normal(size=(6, 8))
        e1 = Tensor(v / np.linalg.norm(v, axis=1, keepdims=True), dtype=F64)
        w = rng.normal(size=(6, 8))
        e2 = Tensor(w / np.linalg.norm(w, axis=1, keepdims=True), dtype=F64)
        report = finite_diff_gradcheck(lambda t: cosine_embedding_loss(t, e2, np.ones(6, bool)), e1, eps=1e-5)
        assert report.passed, report.failure

    def test_bce_of_sigmoid_logits(self, rng):
        z = Tensor(rng.uniform(-3, 3, size=10), dtype=F64)
        y = rng.integers(0, 2, size=10)
        report = finite_diff_gradcheck(lambda t: T.bce_loss(T.sigmoid(t), y), z, eps=1e-5)
        assert report.passed, report.failure

    def test_detects_wrong_rule(self, rng, monkeypatch):
        monkeypatch.setitem(T.BACKWARD_RULES, "sigmoid", lambda node, g: (g,))
        x = Tensor(rng.normal(size=5), dtype=F64)
        report = finite_diff_gradcheck(lambda t: T.sum_(T.sigmoid(t)), x)
        assert not report.passed
        assert "x[" in report.failure

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_reports_non_finite(self):
        x = Tensor([0.0, 1.0], dtype=F64)

        def f(t):
            return T.sum_(T.mul(t, Tensor([np.inf, 1.0], dtype=F64)))

        report = finite_diff_gradcheck(f, x)
        assert not report.passed
        assert "non-finite" in report.failure

    def test_skips_probes_that_cross_a_kink(self):
        x = Tensor([1e-5, 1.0], dtype=F64)
        report = finite_diff_gradcheck(lambda t: T.sum_(T.relu(t)), x, eps=1e-3)
        assert report.passed
        assert report.skipped == 1 and report.probes == 1

    def test_relative_error_floor(self):
        assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
        assert relative_error(np.array([1e-9]), np.array([0.0]))[0] == pytest.approx(0.1)


class TestSuite:
    def test_covers_required_checks(self):
        for name in PRIMITIVES + ("pair_loss_same", "pair_loss_different", "global_loss", "bce_sigmoid_head"):
            assert name in CHECK_NAMES
        assert any(n.startswith("local_loss_block") for n in CHECK_NAMES)

    def test_default_seed_passes_with_enough_probes(self):
        results = run_suite(0)
        for r in results:
            assert r.passed, f"{r.name}: {r.failure}"
            assert r.probes >= 100

    @pytest.mark.parametrize("name", PRIMITIVES + ("pair_loss_same", "pair_loss_different", "bce_sigmoid_head"))
    def test_primitive_over_100_seeds(self, name):
        worst = 0.0
        for seed in range(100):
            r = run_check(name, seed)
            assert r.passed, f"seed {seed}: {r.failure}"
            worst = max(worst, r.max_rel_error)
        assert worst <= 1e-3

    @pytest.mark.slow
    @pytest.mark.parametrize("name", [n for n in CHECK_NAMES if n.startswith(("local_loss", "global_loss"))])
    def test_stage_losses_over_100_seeds(self, name):
        for seed in range(100):
            r = run_check(name, seed)
            assert r.passed, f"seed {seed}: {r.failure}"

    def test_corrupted_conv_rule_is_named(self, monkeypatch):
        original = T.BACKWARD_RULES["conv2d"]

        def wrong(node, g):
            grads = original(node, g)
            return (grads[0], grads[1] * 1.01) + grads[2:]

        monkeypatch.setitem(T.BACKWARD_RULES, "conv2d", wrong)
        r = run_check("conv2d", 0)
        assert not r.passed
        assert "relative error" in r.failure
