"""Contrastive/region objectives, momentum encoders, and the ssl step."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mstl import tensor as T
from mstl.backbone import BackboneConfig, build_network
from mstl.errors import (
    ContractError,
    DegenerateEmbeddingError,
    DimensionError,
    ModelPairingError,
)
from mstl.nn import Linear
from mstl.phantom import AugmentPolicy, PhantomSpec, generate_phantom
from mstl.ssl import (
    ContrastiveBatch,
    EncoderPair,
    LossWeights,
    NegativeQueue,
    RegionPrediction,
    SslTask,
    contrastive_loss,
    enqueue_negatives,
    final_loss,
    l2_normalize,
    momentum_update,
    region_aware_loss,
    ssl_batch_loss,
    ssl_step,
)
from mstl.tensor import Tensor, grad_check


def unit(rng, d=8):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def contrastive_oracle(q, kpos, negs, tau, literal=False):
    """Direct softmax-log evaluation."""
    pos = np.dot(q, kpos) / tau
    sims = [np.dot(q, k) / (1.0 if literal else tau) for k in negs]
    z = np.array([pos] + sims)
    z -= z.max()
    return -np.log(np.exp(z[0]) / np.exp(z).sum())


class TestL2Normalize:
    def test_three_four_five(self):
        out = l2_normalize(np.array([3.0, 4.0])).data
        np.testing.assert_allclose(out, [0.6, 0.8], rtol=1e-15)

    def test_unit_vector_unchanged(self):
        v = unit(np.random.default_rng(0))
        np.testing.assert_allclose(l2_normalize(v).data, v, rtol=1e-12)

    def test_norm_one(self):
        v = np.random.default_rng(1).normal(size=128)
        assert abs(np.linalg.norm(l2_normalize(v).data) - 1.0) < 1e-12

    def test_zero_vector(self):
        with pytest.raises(DegenerateEmbeddingError):
            l2_normalize(np.zeros(4))


class TestContrastiveLoss:
    def test_no_negatives_zero_loss(self):
        rng = np.random.default_rng(2)
        q = unit(rng)
        batch = ContrastiveBatch(x_q=q, x_k_pos=q.copy(), negatives=[], tau=0.07)
        assert contrastive_loss(batch).item() == 0.0

    def test_equal_similarities_ln3(self):
        # orthogonal unit vectors make all similarities zero
        q = np.array([1.0, 0.0, 0.0, 0.0])
        kpos = np.array([0.0, 1.0, 0.0, 0.0])
        negs = [np.array([0.0, 0.0, 1.0, 0.0]), np.array([0.0, 0.0, 0.0, 1.0])]
        loss = contrastive_loss(ContrastiveBatch(q, kpos, negs, tau=1.0)).item()
        assert abs(loss - math.log(3.0)) < 1e-12

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            d = int(rng.integers(2, 12))
            q = unit(rng, d)
            kpos = unit(rng, d)
            negs = [unit(rng, d) for _ in range(int(rng.integers(0, 6)))]
            tau = float(rng.uniform(0.05, 1.0))
            got = contrastive_loss(ContrastiveBatch(q, kpos, negs, tau)).item()
            assert abs(got - contrastive_oracle(q, kpos, negs, tau)) < 1e-10

    def test_paper_literal_variant(self):
        rng = np.random.default_rng(4)
        q, kpos = unit(rng), unit(rng)
        negs = [unit(rng) for _ in range(4)]
        batch = ContrastiveBatch(q, kpos, negs, tau=0.07)
        lit = contrastive_loss(batch, paper_literal_eq2=True).item()
        std = contrastive_loss(batch).item()
        assert abs(lit - contrastive_oracle(q, kpos, negs, 0.07, literal=True)) < 1e-10
        assert lit != std

    def test_permutation_invariance_exact(self):
        rng = np.random.default_rng(5)
        q, kpos = unit(rng), unit(rng)
        negs = [unit(rng) for _ in range(5)]
        batch1 = ContrastiveBatch(q, kpos, list(negs), tau=0.07)
        loss1 = contrastive_loss(batch1).item()
        order = [3, 0, 4, 1, 2]
        batch2 = ContrastiveBatch(q, kpos, [negs[i] for i in order], tau=0.07)
        # permutation only reorders the summed exponentials
        assert abs(contrastive_loss(batch2).item() - loss1) < 1e-12

    def test_monotone_in_positive_similarity(self):
        rng = np.random.default_rng(6)
        negs = [unit(rng, 2) for _ in range(3)]
        q = np.array([1.0, 0.0])
        losses = []
        for angle in np.linspace(0, np.pi / 2, 15):
            kpos = np.array([np.cos(angle), np.sin(angle)])
            losses.append(contrastive_loss(ContrastiveBatch(q, kpos, negs, 0.2)).item())
        # similarity decreases along the grid, so loss must not decrease
        assert all(b >= a - 1e-12 for a, b in zip(losses, losses[1:]))

    def test_gradient_wrt_query(self):
        rng = np.random.default_rng(7)
        kpos = unit(rng, 5)
        negs = [unit(rng, 5) for _ in range(4)]

        def f(q):
            return contrastive_loss(ContrastiveBatch(q, kpos, negs, tau=0.07))

        assert grad_check(f, Tensor(unit(rng, 5)), step=1e-5) < 1e-4

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            ContrastiveBatch(np.ones(3), np.ones(4), [], tau=0.1)


class TestMomentumUpdate:
    def tiny_pair(self, m=0.999):
        cfg = BackboneConfig(stage_channels=(4, 4, 4, 4), blocks_per_stage=(1, 1, 1, 1),
                             input_size=32, num_classes=2)
        query = build_network(cfg, seed=1)
        return EncoderPair.create(query, momentum=m)

    def test_m_one_keeps_key(self):
        pair = self.tiny_pair(m=1.0)
        pair.query.manifest()["head.weight"].data[...] += 1.0
        before = {n: p.data.copy() for n, p in pair.key.manifest().items()}
        momentum_update(pair)
        for n, p in pair.key.manifest().items():
            np.testing.assert_array_equal(p.data, before[n])

    def test_m_zero_copies_query(self):
        pair = self.tiny_pair(m=0.0)
        for p in pair.query.parameters():
            p.data += 0.5
        momentum_update(pair)
        for n, p in pair.key.manifest().items():
            np.testing.assert_array_equal(p.data, pair.query.manifest()[n].data)

    def test_scalar_arithmetic(self):
        pair = self.tiny_pair(m=0.999)
        qp = pair.query.manifest()["head.bias"]
        kp = pair.key.manifest()["head.bias"]
        qp.data[...] = 0.0
        kp.data[...] = 1.0
        momentum_update(pair)
        np.testing.assert_allclose(kp.data, 0.999, rtol=1e-15)

    def test_contraction_factor(self):
        pair = self.tiny_pair(m=0.999)
        for p in pair.query.parameters():
            p.data += np.random.default_rng(0).normal(size=p.shape) * 0.1
        qvals = {n: p.data.copy() for n, p in pair.query.manifest().items()}
        gap_before = np.sqrt(sum(
            ((pair.key.manifest()[n].data - qvals[n]) ** 2).sum() for n in qvals))
        momentum_update(pair)
        gap_after = np.sqrt(sum(
            ((pair.key.manifest()[n].data - qvals[n]) ** 2).sum() for n in qvals))
        assert abs(gap_after / gap_before - 0.999) < 1e-12

    def test_mismatched_models(self):
        cfg_a = BackboneConfig(stage_channels=(4, 4, 4, 4), blocks_per_stage=(1, 1, 1, 1),
                               input_size=32)
        cfg_b = BackboneConfig(stage_channels=(4, 4, 4, 4), blocks_per_stage=(1, 1, 1, 2),
                               input_size=32)
        with pytest.raises(ModelPairingError):
            EncoderPair(build_network(cfg_a, 0), build_network(cfg_b, 0))


class TestNegativeQueue:
    def test_partial_fill(self):
        q = NegativeQueue(capacity=8)
        rng = np.random.default_rng(0)
        q.enqueue(rng.normal(size=(3, 4)))
        assert len(q) == 3

    def test_fifo_eviction(self):
        q = NegativeQueue(capacity=2)
        q.enqueue(np.array([1.0, 0.0]))
        q.enqueue(np.array([0.0, 1.0]))
        q.enqueue(np.array([1.0, 1.0]))
        assert len(q) == 2
        np.testing.assert_array_equal(q.as_matrix(), [[0.0, 1.0], [1.0, 1.0]])

    @given(st.lists(st.integers(1, 5), min_size=1, max_size=20),
           st.integers(2, 7))
    @settings(max_examples=30, deadline=None)
    def test_sliding_window_oracle(self, chunk_sizes, capacity):
        rng = np.random.default_rng(1)
        q = NegativeQueue(capacity=capacity)
        everything = []
        for size in chunk_sizes:
            keys = rng.normal(size=(size, 3))
            enqueue_negatives(q, keys)
            everything += [k for k in keys]
        expect = np.stack(everything[-capacity:]) if everything else None
        window = expect[-min(len(everything), capacity):]
        np.testing.assert_array_equal(q.as_matrix(), window)

    def test_dimension_mismatch(self):
        q = NegativeQueue(capacity=4, dim=3)
        with pytest.raises(DimensionError):
            q.enqueue(np.ones(2))


class TestRegionAwareLoss:
    def make_preds(self, logits_rows):
        return [RegionPrediction(logits=row, target=np.eye(5)[i])
                for i, row in enumerate(logits_rows)]

    def test_peaked_logits_near_zero(self):
        rows = [np.eye(5)[i] * 40.0 for i in range(5)]
        loss = region_aware_loss(self.make_preds(rows)).item()
        assert loss < 1e-10

    def test_uniform_logits(self):
        rows = [np.zeros(5) for _ in range(5)]
        loss = region_aware_loss(self.make_preds(rows)).item()
        assert abs(loss - 5 * math.log(5.0)) < 1e-12

    def test_compositional_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            rows = [rng.normal(size=5) for _ in range(5)]
            got = region_aware_loss(self.make_preds(rows)).item()
            expect = sum(T.cross_entropy(Tensor(r), i).item() for i, r in enumerate(rows))
            assert abs(got - expect) < 1e-12

    def test_wrong_count(self):
        with pytest.raises(ContractError):
            region_aware_loss(self.make_preds([np.zeros(5)] * 4)[:4])

    def test_duplicate_targets_rejected(self):
        preds = [RegionPrediction(logits=np.zeros(5), target=np.eye(5)[0])
                 for _ in range(5)]
        with pytest.raises(ContractError):
            region_aware_loss(preds)


class TestFinalLoss:
    def test_paper_default_weights(self):
        w = LossWeights(alpha1=0.8, alpha2=0.8)
        got = final_loss(1.0, 1.5, [0.5], w).item()
        assert abs(got - 2.4) < 1e-12

    def test_alpha1_zero(self):
        got = final_loss(7.0, 1.0, [2.0, 3.0], LossWeights(0.0, 1.0)).item()
        assert abs(got - 6.0) < 1e-12

    def test_zero_losses(self):
        assert final_loss(0.0, 0.0, [], LossWeights()).item() == 0.0

    def test_both_zero_weights_rejected(self):
        with pytest.raises(ContractError):
            LossWeights(0.0, 0.0)


def small_task(seed=0, alpha2=0.8, lr=0.05, size=64, prefill=False, capacity=16):
    cfg = BackboneConfig(stage_channels=(4, 4, 4, 8), blocks_per_stage=(1, 1, 1, 1),
                         input_size=size, num_classes=2)
    query = build_network(cfg, seed=seed)
    pair = EncoderPair.create(query, momentum=0.999)
    queue = NegativeQueue(capacity=capacity)
    rng = np.random.default_rng(seed + 100)
    if prefill:
        queue.prefill_random(cfg.stage_channels[3], rng)
    head = Linear("region_head", cfg.stage_channels[3], 5,
                  rng=np.random.default_rng(seed + 1))
    return SslTask(pair=pair, queue=queue, region_head=head,
                   weights=LossWeights(0.8, alpha2),
                   policy=AugmentPolicy(scale_to=72, crop_to=size), lr=lr)


class TestSslStep:
    def test_single_image_empty_queue_alpha2_zero(self):
        task = small_task(alpha2=0.0)
        ds = generate_phantom(PhantomSpec(seed=0), 1)
        parts = ssl_step(task, ds.images, np.random.default_rng(0))
        assert parts["total"] == 0.0
        assert parts["contrastive"] == 0.0
        assert parts["negatives"] == 0
        assert len(task.queue) == 1  # key enqueued afterwards

    def test_frozen_parameters_deterministic(self):
        ds = generate_phantom(PhantomSpec(seed=1), 4)
        outs = []
        for _ in range(2):
            task = small_task(seed=3, lr=0.0)
            parts = ssl_step(task, ds.images, np.random.default_rng(5))
            outs.append(parts["total"])
        assert outs[0] == outs[1]

    def test_one_step_descends(self):
        ds = generate_phantom(PhantomSpec(seed=2), 6)
        wins = 0
        for seed in range(10):
            task = small_task(seed=seed, lr=0.01, prefill=True)
            rng = np.random.default_rng(seed)
            from mstl.ssl import _augmented_batch
            vq, vk, regions, _ = _augmented_batch(task, ds.images, rng)
            negs = task.queue.as_matrix()
            before, _ = ssl_batch_loss(task, vq, vk, regions, negs)
            params = task.trainable_parameters()
            from mstl.tensor import sgd_step, zero_grads
            zero_grads(params)
            before.backward()
            sgd_step(params, lr=task.lr, momentum=0.0, weight_decay=0.0)
            after, _ = ssl_batch_loss(task, vq, vk, regions, negs)
            wins += after.item() < before.item()
        assert wins >= 6

    def test_momentum_recurrence_unrolled_exact(self):
        ds = generate_phantom(PhantomSpec(seed=3), 3)
        task = small_task(seed=7, lr=0.02)
        m = task.pair.momentum
        name = "res5.block0.conv1.weight"
        expect = task.pair.key.manifest()[name].data.copy()
        rng = np.random.default_rng(9)
        for _ in range(3):
            ssl_step(task, ds.images, rng)
            # recurrence recomputed with the post-step query value
            expect *= m
            expect += (1.0 - m) * task.pair.query.manifest()[name].data
            np.testing.assert_array_equal(task.pair.key.manifest()[name].data, expect)

    def test_region_head_shared_across_images(self):
        task = small_task(seed=5)
        ds = generate_phantom(PhantomSpec(seed=4), 3)
        head_before = task.region_head.weight.data.copy()
        ssl_step(task, ds.images, np.random.default_rng(0))
        # a single head object serves every image; its weights moved once
        assert task.region_head.weight.name == "region_head.weight"
        assert not np.array_equal(head_before, task.region_head.weight.data)

    def test_keys_enqueued_per_step(self):
        task = small_task(seed=6, capacity=4)
        ds = generate_phantom(PhantomSpec(seed=5), 3)
        ssl_step(task, ds.images, np.random.default_rng(1))
        assert len(task.queue) == 3
        ssl_step(task, ds.images, np.random.default_rng(2))
        assert len(task.queue) == 4  # capacity reached, FIFO evicted

    def test_region_head_gradient(self):
        rng = np.random.default_rng(11)
        feats = rng.normal(size=(5, 8))
        head = Linear("h", 8, 5, rng=rng)
        step = 1e-5
        head.weight.zero_grad()
        loss = T.cross_entropy_rows(head.forward(Tensor(feats)), np.arange(5), "sum")
        loss.backward()
        analytic = head.weight.grad.copy()
        numeric = np.zeros_like(analytic)
        flat = head.weight.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with T.no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = T.cross_entropy_rows(head.forward(Tensor(feats)), np.arange(5), "sum").item()
                flat[i] = orig - step
                dn = T.cross_entropy_rows(head.forward(Tensor(feats)), np.arange(5), "sum").item()
                flat[i] = orig
                nflat[i] = (up - dn) / (2 * step)
        rel = np.abs(analytic - numeric) / np.maximum(
            np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        assert rel.max() < 1e-4
