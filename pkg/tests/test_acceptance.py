"""Acceptance suite: one test per criterion, one printed verdict line each.

Run with ``pytest -s tests/test_acceptance.py`` to see the verdict lines.
The full-scale published numbers are not reproducible at desk scale, so the
criteria are property-based: oracle equivalence, gradient correctness,
structural invariants, region-generator behavior on phantoms, published-gain
arithmetic, and three seeded experiment properties (transfer margin, LEEP
ordering, self-supervised descent).
"""

import math
import time

import numpy as np
import pytest

from mstl import tensor as T
from mstl.attention import AttentionBlock, attn_forward
from mstl.backbone import BackboneConfig, ResidualBlock, build_network, preset_config
from mstl.errors import DegenerateAnatomyError
from mstl.leep import LeepInput, empirical_conditional, leep_score
from mstl.metrics import EvalResult, auc, f1, transfer_gain
from mstl.nn import Linear
from mstl.phantom import PhantomSpec, generate_medical_source, generate_phantom
from mstl.pipeline import (
    StageConfig,
    dummy_distributions,
    evaluate,
    finetune,
    load_checkpoint,
    run_stage_ssl,
    run_stage_supervised,
    save_checkpoint,
)
from mstl.regions import LOBES, generate_regions, locate
from mstl.ssl import (
    ContrastiveBatch,
    EncoderPair,
    LossWeights,
    NegativeQueue,
    RegionPrediction,
    SslTask,
    contrastive_loss,
    final_loss,
    momentum_update,
    region_aware_loss,
    ssl_step,
)
from mstl.tensor import Parameter, Tensor, grad_check


def _verdict(criterion: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {criterion}: {status}{suffix}")
    assert ok, f"{criterion} failed{suffix}"


def _unit(rng, d):
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


# -----------------------------------------------------------------
# criterion 1: oracle equivalence (>=100 random instances per op)
# -----------------------------------------------------------------


def _conv_loops(x, k, stride, padding):
    h, w, c = x.shape
    kh, kw, _, co = k.shape
    xp = np.zeros((h + 2 * padding, w + 2 * padding, c))
    xp[padding:padding + h, padding:padding + w] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((oh, ow, co))
    for oy in range(oh):
        for ox in range(ow):
            for oc in range(co):
                s = 0.0
                for i in range(kh):
                    for j in range(kw):
                        for ic in range(c):
                            s += xp[oy * stride + i, ox * stride + j, ic] * k[i, j, ic, oc]
                out[oy, ox, oc] = s
    return out


def test_c1_oracle_equivalence():
    start = time.time()
    rng = np.random.default_rng(101)

    for _ in range(100):  # contrastive loss vs direct softmax-log
        d = int(rng.integers(2, 10))
        q, kpos = _unit(rng, d), _unit(rng, d)
        negs = [_unit(rng, d) for _ in range(int(rng.integers(0, 6)))]
        tau = float(rng.uniform(0.05, 1.0))
        z = np.array([np.dot(q, kpos) / tau] + [np.dot(q, k) / tau for k in negs])
        z -= z.max()
        expect = -math.log(math.exp(z[0]) / np.exp(z).sum())
        got = contrastive_loss(ContrastiveBatch(q, kpos, negs, tau)).item()
        assert abs(got - expect) <= 1e-10 * max(1.0, abs(expect))

    for _ in range(100):  # region-aware loss vs five independent CEs
        rows = [rng.normal(size=5) for _ in range(5)]
        preds = [RegionPrediction(logits=r, target=np.eye(5)[i])
                 for i, r in enumerate(rows)]
        got = region_aware_loss(preds).item()
        expect = sum(T.cross_entropy(Tensor(r), i).item() for i, r in enumerate(rows))
        assert abs(got - expect) <= 1e-12 * max(1.0, abs(expect))

    for _ in range(100):  # final loss vs plain arithmetic (exact form)
        a1, a2 = rng.uniform(0, 2, 2)
        lc, lq = rng.uniform(0, 5, 2)
        negs = list(rng.uniform(0, 5, int(rng.integers(0, 5))))
        got = final_loss(lc, lq, negs, LossWeights(a1, a2 + 1e-9)).item()
        expect = a1 * lc + (a2 + 1e-9) * (lq + sum(negs))
        assert abs(got - expect) <= 1e-12 * max(1.0, abs(expect))

    for _ in range(100):  # leep + conditional vs two-pass summation
        n = int(rng.integers(1, 25))
        nz = int(rng.integers(1, 5))
        ny = int(rng.integers(1, 4))
        dist = rng.random((n, nz)) + 1e-9
        dist /= dist.sum(axis=1, keepdims=True)
        labels = rng.integers(0, ny, n)
        inp = LeepInput(dist, labels)
        joint = np.zeros((int(labels.max()) + 1, nz))
        for i in range(n):
            joint[labels[i]] += dist[i] / n
        marginal = joint.sum(axis=0)
        cond = joint / np.maximum(marginal, 1e-12)
        table = empirical_conditional(inp)
        assert np.abs(table.cond - cond).max() <= 1e-10
        expect = np.mean([math.log(min(1.0, float(np.dot(cond[labels[i]], dist[i]))))
                          for i in range(n)])
        assert abs(leep_score(inp) - expect) <= 1e-10

    for _ in range(100):  # conv2d vs nested loops
        h, w = (int(v) for v in rng.integers(3, 7, 2))
        c, co = (int(v) for v in rng.integers(1, 4, 2))
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        padding = int(rng.choice([0, 1]))
        x = rng.normal(size=(h, w, c))
        kern = rng.normal(size=(k, k, c, co))
        got = T.conv2d(Tensor(x), Tensor(kern), stride=stride, padding=padding).data
        expect = _conv_loops(x, kern, stride, padding)
        scale = max(1.0, np.abs(expect).max())
        assert np.abs(got - expect).max() <= 1e-10 * scale

    for _ in range(100):  # auc vs O(n^2) pairwise comparisons
        n = int(rng.integers(4, 40))
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        scores = np.round(rng.random(n), 2)
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        cmp = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
        expect = cmp / (pos.size * neg.size)
        assert abs(auc(scores, labels) - expect) <= 1e-12

    for _ in range(100):  # f1 vs direct counting
        n = int(rng.integers(2, 50))
        preds = rng.integers(0, 2, n)
        labels = rng.integers(0, 2, n)
        tp = int(((preds == 1) & (labels == 1)).sum())
        fp = int(((preds == 1) & (labels == 0)).sum())
        fn = int(((preds == 0) & (labels == 1)).sum())
        expect = 0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
        assert abs(f1(preds, labels) - expect) <= 1e-12

    _verdict("1 oracle-equivalence", True, f"{time.time() - start:.1f}s")


# -----------------------------------------------------------------
# criterion 2: gradient correctness
# -----------------------------------------------------------------


def test_c2_gradient_correctness():
    start = time.time()
    rng = np.random.default_rng(202)

    block = AttentionBlock("a", 2, rng=rng)
    w = rng.normal(size=(4, 4, 2))

    def f_attn(x):
        out, _ = attn_forward(block, x)
        return (out * Tensor(w)).sum()

    err_attn = grad_check(f_attn, Tensor(rng.normal(size=(4, 4, 2))), step=1e-4)

    res = ResidualBlock("r", 2, 3, stride=2, rng=rng)
    res.bn2.gamma.data[...] = rng.normal(size=3)
    wr = rng.normal(size=(1, 3, 3, 3))

    def f_res(x):
        return (res.forward(x, training=False) * Tensor(wr)).sum()

    err_res = grad_check(f_res, Tensor(rng.normal(size=(1, 6, 6, 2))), step=1e-4)

    cfg = BackboneConfig(stage_channels=(8, 8, 8, 8), blocks_per_stage=(2, 2, 2, 2),
                         input_size=32, num_classes=2, attn_plan={"res3": 1})
    model = build_network(cfg, seed=3)
    for blocks in model.stages:
        for layer in blocks:
            if hasattr(layer, "bn2"):
                layer.bn2.gamma.data[...] = rng.normal(size=layer.bn2.gamma.shape)

    def f_backbone(x):
        return T.cross_entropy(model.classify(x, training=False), 1)

    err_backbone = grad_check(f_backbone, Tensor(rng.normal(size=(32, 32, 1)) * 0.5),
                              step=1e-4)

    kpos = _unit(rng, 6)
    negs = [_unit(rng, 6) for _ in range(5)]

    def f_cons(q):
        return contrastive_loss(ContrastiveBatch(q, kpos, negs, tau=0.07))

    err_cons = grad_check(f_cons, Tensor(_unit(rng, 6)), step=1e-5)

    # region head: analytic vs central differences on the weight matrix
    feats = rng.normal(size=(5, 8))
    head = Linear("h", 8, 5, rng=rng)
    labels = np.arange(5)
    head.weight.zero_grad()
    T.cross_entropy_rows(head.forward(Tensor(feats)), labels, "sum").backward()
    analytic = head.weight.grad.copy()
    numeric = np.zeros_like(analytic)
    flat, nflat = head.weight.data.reshape(-1), numeric.reshape(-1)
    step = 1e-5
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = T.cross_entropy_rows(head.forward(Tensor(feats)), labels, "sum").item()
            flat[i] = orig - step
            dn = T.cross_entropy_rows(head.forward(Tensor(feats)), labels, "sum").item()
            flat[i] = orig
            nflat[i] = (up - dn) / (2 * step)
    err_head = float((np.abs(analytic - numeric)
                      / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)).max())

    ok = (err_attn < 1e-4 and err_res < 1e-4 and err_backbone < 1e-3
          and err_cons < 1e-4 and err_head < 1e-4)
    _verdict("2 gradient-correctness", ok,
             f"attn {err_attn:.1e}, res {err_res:.1e}, backbone {err_backbone:.1e}, "
             f"contrastive {err_cons:.1e}, head {err_head:.1e}, {time.time() - start:.0f}s")


# -----------------------------------------------------------------
# criterion 3: structural invariants
# -----------------------------------------------------------------


def test_c3_structural_invariants(tmp_path):
    rng = np.random.default_rng(303)

    # attention maps column-stochastic within 1e-6
    block = AttentionBlock("a", 3, rng=rng)
    for _ in range(100):
        x = rng.normal(size=(2, 3, 3)) * rng.uniform(0.2, 4.0)
        _, amap = attn_forward(block, x)
        assert np.abs(amap.weights.sum(axis=0) - 1.0).max() <= 1e-6

    # LEEP <= 0 on 1000 random inputs; |L| < 1e-9 on one-hot alignment
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        nz = int(rng.integers(1, 5))
        dist = rng.random((n, nz)) + 1e-9
        dist /= dist.sum(axis=1, keepdims=True)
        labels = rng.integers(0, int(rng.integers(1, 4)), n)
        assert leep_score(LeepInput(dist, labels)) <= 0.0
    onehot = np.eye(3)[np.array([0, 1, 2, 0, 1, 2])]
    aligned = leep_score(LeepInput(onehot, np.array([0, 1, 2, 0, 1, 2])))
    assert abs(aligned) < 1e-9

    # momentum recurrence: key params equal the unrolled recurrence, bitwise
    cfg = BackboneConfig(stage_channels=(4, 4, 4, 8), blocks_per_stage=(1, 1, 1, 1),
                         input_size=64, num_classes=2)
    query = build_network(cfg, seed=5)
    pair = EncoderPair.create(query, momentum=0.999)
    queue = NegativeQueue(capacity=8)
    head = Linear("region_head", 8, 5, rng=np.random.default_rng(1))
    task = SslTask(pair=pair, queue=queue, region_head=head, lr=0.02)
    ds = generate_phantom(PhantomSpec(seed=31), 3)
    tracked = {n: p.data.copy() for n, p in pair.key.manifest().items()}
    step_rng = np.random.default_rng(7)
    m = 0.999
    for _ in range(3):
        ssl_step(task, ds.images, step_rng)
        for name, expect in tracked.items():
            expect *= m
            expect += (1.0 - m) * pair.query.manifest()[name].data
        for name, expect in tracked.items():
            assert pair.key.manifest()[name].data.tobytes() == expect.tobytes()

    # checkpoint roundtrip bit-exact
    model = build_network(preset_config("one_attn", input_size=32,
                                        num_classes=2), seed=9)
    model.provenance = ["stl_n"]
    path = tmp_path / "m.mstl"
    save_checkpoint(model, path)
    loaded, _ = load_checkpoint(path)
    for name, p in model.manifest().items():
        assert loaded.manifest()[name].data.tobytes() == p.data.tobytes()
    for name, buf in model.buffers().items():
        assert loaded.buffers()[name].tobytes() == buf.tobytes()

    # FIFO queue equals the sliding window of everything enqueued
    q = NegativeQueue(capacity=5)
    pushed = []
    for _ in range(37):
        chunk = rng.normal(size=(int(rng.integers(1, 4)), 3))
        q.enqueue(chunk)
        pushed += list(chunk)
    assert np.array_equal(q.as_matrix(), np.stack(pushed[-5:]))

    _verdict("3 structural-invariants", True)


# -----------------------------------------------------------------
# criterion 4: region generator on 50 phantoms
# -----------------------------------------------------------------


def test_c4_region_generator():
    ds = generate_phantom(PhantomSpec(seed=404), 50)
    degenerate = 0
    for img in ds.images:
        try:
            rs = generate_regions(img)
        except DegenerateAnatomyError:
            degenerate += 1
            continue
        for lobe in LOBES:
            assert rs.regions[lobe].shape == img.shape
        t = rs.tuples
        assert t["ru"].y < t["rm"].y < t["rl"].y
        assert t["lu"].y < t["ll"].y
        area = sum(tt.w * tt.h for tt in t.values())
        c0 = min(tt.col_start() for tt in t.values())
        c1 = max(tt.col_start() + tt.w for tt in t.values())
        r0 = min(tt.row_start() for tt in t.values())
        r1 = max(tt.row_start() + tt.h for tt in t.values())
        assert area >= 0.95 * (c1 - c0) * (r1 - r0)
    _verdict("4 region-generator", degenerate == 0,
             f"degenerate {degenerate}/50")


# -----------------------------------------------------------------
# criterion 5: published transfer-gain arithmetic
# -----------------------------------------------------------------


def test_c5_transfer_gain_arithmetic():
    def result(acc):
        return EvalResult(accuracy=acc, f1=0.0, auc=0.0, tp=0, fp=0, tn=0, fn=0)

    cases = [(84.7, 93.9, 9.2), (83.7, 88.2, 4.5)]
    for before, after, published in cases:
        gain = transfer_gain(result(before), result(after)).improvements["accuracy"]
        assert abs(gain - published) <= 1e-12
    same = result(88.2)
    assert transfer_gain(same, same).improvements["accuracy"] == 0.0
    _verdict("5 transfer-gain-arithmetic", True)


# -----------------------------------------------------------------
# criteria 6-8: seeded experiment properties (slow)
# -----------------------------------------------------------------


def test_c6_directional_transfer():
    start = time.time()
    gains = []
    for seed in range(5):
        ds = generate_phantom(PhantomSpec(seed=1000 + seed), 400)
        ds.splits = {"train": np.arange(200), "val": np.zeros(0, dtype=np.int64),
                     "test": np.arange(200, 400)}
        cfg_model = preset_config("five_attns")

        pretrained = build_network(cfg_model, seed=seed)
        run_stage_ssl(pretrained, StageConfig(
            stage="sstl_m", epochs=2, batch_size=16, lr=0.03, seed=seed),
            dataset=ds)
        finetune(pretrained, StageConfig(
            stage="finetune", epochs=3, batch_size=16, lr=0.05, seed=seed + 1),
            dataset=ds)
        acc_p = evaluate(pretrained, ds, "test").accuracy

        scratch = build_network(cfg_model, seed=seed)
        finetune(scratch, StageConfig(
            stage="finetune", epochs=3, batch_size=16, lr=0.05, seed=seed + 1),
            dataset=ds)
        acc_n = evaluate(scratch, ds, "test").accuracy
        gains.append(acc_p - acc_n)

    mean_gain = float(np.mean(gains))
    _verdict("6 directional-transfer", mean_gain >= 0.0,
             f"mean gain {mean_gain:+.4f}, per-seed "
             f"{[f'{g:+.3f}' for g in gains]}, {time.time() - start:.0f}s")


def test_c7_leep_ordering():
    start = time.time()
    wins = 0
    for seed in range(5):
        source = generate_medical_source(PhantomSpec(seed=2000 + seed), 120)
        source.splits = {"train": np.arange(120), "val": np.zeros(0, dtype=np.int64),
                         "test": np.zeros(0, dtype=np.int64)}
        target = generate_phantom(PhantomSpec(seed=3000 + seed), 200)
        target.splits = {"train": np.arange(200), "val": np.zeros(0, dtype=np.int64),
                         "test": np.zeros(0, dtype=np.int64)}
        cfg_model = preset_config("five_attns", num_classes=3)

        pretrained = build_network(cfg_model, seed=seed)
        run_stage_supervised(pretrained, StageConfig(
            stage="stl_m", epochs=3, batch_size=16, lr=0.05, seed=seed),
            dataset=source)
        random_model = build_network(cfg_model, seed=seed + 50)

        score_p = leep_score(dummy_distributions(pretrained, target, "train"))
        score_n = leep_score(dummy_distributions(random_model, target, "train"))
        wins += score_p > score_n
    _verdict("7 leep-ordering", wins >= 4,
             f"{wins}/5 seeds, {time.time() - start:.0f}s")


def test_c8_ssl_descent():
    start = time.time()
    wins = 0
    for seed in range(5):
        ds = generate_phantom(PhantomSpec(seed=4000 + seed), 64)
        ds.splits = {"train": np.arange(64), "val": np.zeros(0, dtype=np.int64),
                     "test": np.zeros(0, dtype=np.int64)}
        model = build_network(preset_config("five_attns"), seed=seed)
        history = run_stage_ssl(model, StageConfig(
            stage="sstl_m", epochs=2, batch_size=16, lr=0.01, queue_capacity=64,
            seed=seed), dataset=ds)
        epochs = history["epochs"]
        wins += epochs[1]["total"] < epochs[0]["total"]
    _verdict("8 ssl-descent", wins >= 4, f"{wins}/5 seeds, {time.time() - start:.0f}s")
