"""Cosine embedding loss, pair sampling and the two contrastive pretraining stages."""

import dataclasses

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import ffcl.tensor as T
from ffcl.contrastive import (
    ContrastiveStageConfig,
    cosine_embedding_loss,
    global_pretrain,
    local_pretrain,
    sample_pair_indices,
    sample_pairs,
)
from ffcl.errors import SamplingError, ValidationError
from ffcl.network import BlockSpec, build_model, embed_at_block, embed_global, forward_block, param_fingerprint
from ffcl.optim import Adam
from ffcl.tensor import Tensor

F64 = np.float64


def loss_of(e1, e2, same, dtype=F64):
    return cosine_embedding_loss(Tensor(e1, dtype=dtype), Tensor(e2, dtype=dtype), same).data.item()


def direct_pair_loss(e1, e2, same):
    """Independent per-pair evaluation with plain Python floats."""
    total = 0.0
    for a, b, s in zip(e1, e2, same):
        dot = sum(float(x) * float(y) for x, y in zip(a, b))
        na = sum(float(x) ** 2 for x in a) ** 0.5
        nb = sum(float(y) ** 2 for y in b) ** 0.5
        cos = dot / (na * nb + 1e-12)
        total += (1 - cos) if s else max(0.0, cos)
    return total / len(e1)


vectors = arrays(F64, 6, elements=st.floats(-1e3, 1e3, allow_nan=False))


class TestCosineEmbeddingLoss:
    # the 1e-12 norm guard leaves ~1e-12 of slack in float64
    def test_identical_same_class(self):
        assert loss_of([[1, 0]], [[1, 0]], [True]) == pytest.approx(0.0, abs=1e-9)
        assert loss_of([[1, 0]], [[1, 0]], [True], np.float32) == 0.0

    def test_orthogonal_different_class(self):
        assert loss_of([[1, 0]], [[0, 1]], [False]) == 0.0

    def test_identical_different_class(self):
        assert loss_of([[1, 0]], [[1, 0]], [False]) == pytest.approx(1.0, abs=1e-9)
        assert loss_of([[1, 0]], [[1, 0]], [False], np.float32) == 1.0

    def test_diagonal_pair(self):
        assert loss_of([[1, 0]], [[1, 1]], [True]) == pytest.approx(0.292893, abs=1e-6)
        assert loss_of([[1, 0]], [[1, 1]], [False]) == pytest.approx(0.707107, abs=1e-6)

    def test_matches_direct_evaluation(self, rng):
        e1, e2 = rng.normal(size=(50, 8)), rng.normal(size=(50, 8))
        same = rng.integers(0, 2, size=50).astype(bool)
        assert loss_of(e1, e2, same) == pytest.approx(direct_pair_loss(e1, e2, same), abs=1e-12)

    def test_reduction_none(self):
        per = cosine_embedding_loss(Tensor([[1.0, 0], [1, 0]]), Tensor([[1.0, 0], [1, 0]]), [True, False],
                                    reduction="none")
        np.testing.assert_array_equal(per.data, [0.0, 1.0])

    def test_nan_rejected(self):
        with pytest.raises(ValidationError):
            cosine_embedding_loss(Tensor([[np.nan, 1.0]]), Tensor([[1.0, 1.0]]), [True])

    def test_flag_count_checked(self):
        with pytest.raises(ValidationError):
            cosine_embedding_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), [True])

    @given(vectors, vectors, st.booleans())
    def test_branch_ranges(self, a, b, same):
        for dtype in (np.float32, F64):
            v = loss_of(a[None], b[None], [same], dtype)
            assert 0.0 <= v <= (2.0 if same else 1.0)

    @given(vectors, vectors, st.booleans(), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, a, b, same, alpha, beta):
        # outside this domain the norm guard itself is a visible fraction of |e1||e2|
        norms = np.linalg.norm(a) * np.linalg.norm(b)
        assume(norms > 1e-5 and alpha * beta * norms > 1e-5)
        assert loss_of(alpha * a[None], beta * b[None], [same]) == pytest.approx(
            loss_of(a[None], b[None], [same]), abs=1e-6)

    @given(vectors, vectors, st.booleans())
    def test_symmetry_is_exact(self, a, b, same):
        assert loss_of(a[None], b[None], [same]) == loss_of(b[None], a[None], [same])

    @given(vectors, vectors)
    def test_no_gradient_when_cos_negative(self, a, b):
        assume(np.linalg.norm(a) > 1e-3 and np.linalg.norm(b) > 1e-3)
        assume(a @ b < -1e-6 * np.linalg.norm(a) * np.linalg.norm(b))
        e1, e2 = Tensor(a[None], True, F64), Tensor(b[None], True, F64)
        cosine_embedding_loss(e1, e2, [False]).backward()
        assert not e1.grad.any() and not e2.grad.any()


class TestSampling:
    def test_exact_positive_count(self):
        labels = np.repeat([0, 1], 20)
        i1, i2 = sample_pair_indices(labels, 100, 0.5, seed=0)
        assert (labels[i1] == labels[i2]).sum() == 50
        assert np.all(i1 != i2)

    def test_deterministic(self):
        labels = np.repeat([0, 1], 20)
        a = sample_pair_indices(labels, 64, 0.5, seed=9)
        b = sample_pair_indices(labels, 64, 0.5, seed=9)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_label_marginal_oracle(self):
        labels = np.array([0] * 30 + [1] * 70)
        count = 10_000
        i1, i2 = sample_pair_indices(labels, count, 0.5, seed=4)
        p0 = 0.3
        n_pos = count // 2
        # x1 is uniform over samples within each half, so its class follows the label marginal
        expected = {(0, 0): n_pos * p0, (1, 1): n_pos * (1 - p0),
                    (0, 1): n_pos * p0, (1, 0): n_pos * (1 - p0)}
        for (a, b), mu in expected.items():
            observed = np.sum((labels[i1] == a) & (labels[i2] == b))
            sigma = np.sqrt(n_pos * (mu / n_pos) * (1 - mu / n_pos))
            assert abs(observed - mu) <= 3 * sigma, (a, b, observed, mu)

    def test_uniform_mode_marginal(self):
        labels = np.array([0] * 30 + [1] * 70)
        i1, i2 = sample_pair_indices(labels, 10_000, seed=4, sampling="uniform")
        n = 100
        p_same = (30 * 29 + 70 * 69) / (n * (n - 1))
        observed = np.mean(labels[i1] == labels[i2])
        assert abs(observed - p_same) <= 3 * np.sqrt(p_same * (1 - p_same) / 10_000)
        assert np.all(i1 != i2)

    def test_single_class_cannot_make_negatives(self):
        with pytest.raises(SamplingError):
            sample_pair_indices(np.zeros(10, int), 10, 0.5)

    def test_batches_carry_flags(self, tiny_dataset):
        batches = list(sample_pairs(tiny_dataset, 25, 0.5, seed=1, batch_size=10))
        assert [len(b) for b in batches] == [10, 10, 5]
        for b in batches:
            np.testing.assert_array_equal(b.same_class, tiny_dataset.labels[b.i1] == tiny_dataset.labels[b.i2])
            np.testing.assert_array_equal(b.x1, tiny_dataset.images[b.i1])


def _cfg(**kw):
    base = dict(epochs=1, pairs_per_epoch=10, batch_size=10, learning_rate=1e-2, seed=3)
    base.update(kw)
    return ContrastiveStageConfig(**base)


def _frozen_batch(ds, seed=0, size=10):
    return next(sample_pairs(ds, size, 0.5, seed=seed, batch_size=size))


class TestLocalPretrain:
    def test_does_not_modify_input(self, small_stack, tiny_dataset):
        before = param_fingerprint(small_stack)
        local_pretrain(small_stack, tiny_dataset, _cfg())
        assert param_fingerprint(small_stack) == before

    def test_one_batch_isolation_oracle(self, small_stack, tiny_dataset):
        cfg = _cfg()
        result = local_pretrain(small_stack, tiny_dataset, cfg).checkpoint.model
        batch = _frozen_batch(tiny_dataset, seed=np.random.SeedSequence([cfg.seed, 0]))
        x = Tensor(np.concatenate([batch.x1, batch.x2]))
        before = param_fingerprint(small_stack)
        after = param_fingerprint(result)
        for i in range(small_stack.n):
            assert after[i] != before[i]
            # update block i alone, every other gradient zeroed
            solo = small_stack.copy()
            e = embed_at_block(solo, i, x)
            cosine_embedding_loss(e[:10], e[10:], batch.same_class).backward()
            for j in range(solo.n):
                if j != i:
                    T.zero_grads(solo.block_parameters(j))
            Adam(solo.parameters(), lr=cfg.learning_rate).step()
            assert param_fingerprint(solo, i) == after[i]
            assert [param_fingerprint(solo, j) for j in range(solo.n) if j != i] == \
                [before[j] for j in range(solo.n) if j != i]

    def test_each_step_only_moves_its_block(self, small_stack, tiny_dataset):
        batch = _frozen_batch(tiny_dataset)
        x = Tensor(np.concatenate([batch.x1, batch.x2]))
        model = small_stack.copy()
        opts = [Adam(model.block_parameters(i), lr=1e-2) for i in range(model.n)]
        h = x
        for i in range(model.n):
            before = param_fingerprint(model)
            h = forward_block(model, i, h, detach_input=True)
            e = T.global_avg_pool(h)
            cosine_embedding_loss(e[:10], e[10:], batch.same_class).backward()
            opts[i].step()
            after = param_fingerprint(model)
            assert [a != b for a, b in zip(before, after)] == [j == i for j in range(model.n)]

    def test_single_block_matches_global(self, tiny_dataset):
        m = build_model([BlockSpec("conv", 4, 3, 2)], (1, 16, 16), seed=5)
        cfg = _cfg(epochs=2, pairs_per_epoch=None, batch_size=8)
        local = local_pretrain(m, tiny_dataset, cfg)
        glob = global_pretrain(m, tiny_dataset, cfg)
        assert param_fingerprint(local.checkpoint.model) == param_fingerprint(glob.checkpoint.model)
        assert [r.loss for r in local.losses] == [r.loss for r in glob.losses]

    def test_sequential_schedule_runs(self, small_stack, tiny_dataset):
        res = local_pretrain(small_stack, tiny_dataset, _cfg(local_schedule="sequential"))
        assert [r.block_index for r in res.losses] == [0, 1, 2]

    def test_overfit_one_batch_every_block(self, small_stack, tiny_dataset):
        batch = _frozen_batch(tiny_dataset, seed=7)
        x = Tensor(np.concatenate([batch.x1, batch.x2]))
        model = small_stack.copy()
        for i in range(model.n):
            opt = Adam(model.block_parameters(i), lr=1e-2)
            losses = []
            for _ in range(20):
                e = embed_at_block(model, i, x)
                loss = cosine_embedding_loss(e[:10], e[10:], batch.same_class)
                loss.backward()
                opt.step()
                losses.append(loss.data.item())
            assert losses[-1] < losses[0], (i, losses)
            assert sum(b > a for a, b in zip(losses, losses[1:])) <= 2, (i, losses)

    def test_loss_records(self, small_stack, tiny_dataset):
        res = local_pretrain(small_stack, tiny_dataset, _cfg(epochs=2, pairs_per_epoch=20))
        assert len(res.losses) == 2 * 2 * small_stack.n
        assert res.final_loss == pytest.approx(np.mean([r.loss for r in res.losses if r.epoch == 1]))
        assert res.checkpoint.provenance.stage == "local"


class TestGlobalPretrain:
    def test_zero_learning_rate_is_noop(self, small_stack, tiny_dataset):
        res = global_pretrain(small_stack, tiny_dataset, _cfg(learning_rate=0.0, epochs=2))
        for p, q in zip(small_stack.parameters(), res.checkpoint.model.parameters()):
            assert p.data.tobytes() == q.data.tobytes()

    def test_gradient_reaches_first_block(self, small_stack, tiny_dataset):
        batch = _frozen_batch(tiny_dataset)
        e = embed_global(small_stack, Tensor(np.concatenate([batch.x1, batch.x2])))
        cosine_embedding_loss(e[:10], e[10:], batch.same_class).backward()
        assert np.abs(small_stack.blocks[0].weight.grad).sum() > 0

    def test_overfit_one_batch(self, small_stack, tiny_dataset):
        batch = _frozen_batch(tiny_dataset, seed=8)
        x = Tensor(np.concatenate([batch.x1, batch.x2]))
        model = small_stack.copy()
        opt = Adam(model.parameters(), lr=3e-3)
        losses = []
        for _ in range(20):
            e = embed_global(model, x)
            loss = cosine_embedding_loss(e[:10], e[10:], batch.same_class)
            loss.backward()
            opt.step()
            losses.append(loss.data.item())
        assert losses[-1] < losses[0]
        assert sum(b > a for a, b in zip(losses, losses[1:])) <= 2, losses

    def test_deterministic(self, small_stack, tiny_dataset):
        a = global_pretrain(small_stack, tiny_dataset, _cfg(epochs=2))
        b = global_pretrain(small_stack, tiny_dataset, _cfg(epochs=2))
        assert a.checkpoint.id == b.checkpoint.id

    def test_parent_recorded(self, small_stack, tiny_dataset):
        first = local_pretrain(small_stack, tiny_dataset, _cfg()).checkpoint
        second = global_pretrain(first.model, tiny_dataset, _cfg(), parent=first).checkpoint
        assert second.provenance.parent == first.id
        assert dataclasses.asdict(second.provenance)["stage"] == "global"
