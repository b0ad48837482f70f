import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focallens import autodiff as ad
from focallens.autodiff import ShapeError, Tensor, grad_check
from focallens.data import ShapeSpec, build_vocab, make_triplets, template_corpus
from focallens.encoders import EncoderConfig, TargetEncoder, init_params, params_fingerprint
from focallens.training import (
    AdamState,
    Batch,
    TrainConfig,
    TrainingDiverged,
    adamw_step,
    batch_loss,
    build_batches,
    contrastive_loss,
    duplicate_mask,
    lr_schedule,
    similarity_matrix,
    train,
    warmup_steps,
)

VOCAB = build_vocab(template_corpus())


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def loop_loss(S, tau):
    # plain-python oracle for row-wise softmax cross-entropy
    total = 0.0
    for i, row in enumerate(S):
        z = [v / tau for v in row]
        m = max(z)
        lse = m + math.log(sum(math.exp(v - m) for v in z))
        total += lse - z[i]
    return total / len(S)


def distinct_specs():
    # 16 images with pairwise distinct (color, shape)
    specs = []
    for color in ("red", "green", "blue", "yellow"):
        for shape in ("circle", "square", "triangle", "cross"):
            specs.append(ShapeSpec(shape, color, (16, 16), 6))
    return specs


# -- similarity and loss ----------------------------------------------------


def test_similarity_identity_and_ones():
    np.testing.assert_array_equal(similarity_matrix(np.eye(2), np.eye(2)).data, np.eye(2))
    v = np.tile([[0.6, 0.8]], (3, 1))
    np.testing.assert_allclose(similarity_matrix(v, v).data, np.ones((3, 3)), atol=1e-15)


def test_similarity_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = unit_rows(rng, 3, 5), unit_rows(rng, 3, 5)
    S = similarity_matrix(a, b).data
    for i in range(3):
        for j in range(3):
            assert abs(S[i, j] - sum(a[i, k] * b[j, k] for k in range(5))) < 1e-12


def test_similarity_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        similarity_matrix(unit_rows(rng, 3, 4), unit_rows(rng, 2, 4))
    with pytest.raises(ValueError, match="unit"):
        similarity_matrix(np.ones((2, 2)), np.eye(2))


def test_loss_two_by_two_identity():
    loss = contrastive_loss(np.eye(2), 0.0).item()
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.3133, abs=1e-4)


@pytest.mark.parametrize("B", [2, 5, 64])
@pytest.mark.parametrize("tau", [0.01, 0.07, 1.0])
def test_loss_constant_rows_is_log_b(B, tau):
    assert contrastive_loss(np.full((B, B), 0.3), math.log(tau)).item() == pytest.approx(math.log(B), abs=1e-12)


def test_loss_vanishes_for_sharp_identity():
    assert contrastive_loss(np.eye(4), math.log(1e-3)).item() < 1e-12


def test_loss_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        B = int(rng.integers(2, 8))
        S = rng.uniform(-1, 1, size=(B, B))
        tau = float(rng.uniform(0.02, 2))
        assert contrastive_loss(S, math.log(tau)).item() == pytest.approx(loop_loss(S, tau), abs=1e-12)


def test_loss_rejects_bad_input():
    with pytest.raises(ShapeError):
        contrastive_loss(np.ones((1, 1)), 0.0)
    with pytest.raises(ShapeError):
        contrastive_loss(np.ones((2, 3)), 0.0)
    with pytest.raises(ValueError):
        contrastive_loss(np.array([[np.nan, 0], [0, 1]]), 0.0)


def test_loss_gradient_rows_sum_to_zero():
    rng = np.random.default_rng(1)
    S = Tensor(rng.uniform(-1, 1, size=(5, 5)), requires_grad=True)
    contrastive_loss(S, math.log(0.07)).backward()
    np.testing.assert_allclose(S.grad.sum(axis=1), 0, atol=1e-12)
    assert grad_check(lambda s: contrastive_loss(s, math.log(0.07)), Tensor(S.data)) < 1e-6


def test_loss_gradient_wrt_temperature():
    S = np.random.default_rng(2).uniform(-1, 1, size=(4, 4))
    assert grad_check(lambda t: contrastive_loss(S, t), Tensor(np.asarray(math.log(0.2)))) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10_000), st.floats(0.01, 1.0))
def test_loss_nonnegative_and_permutation_invariant(B, seed, tau):
    rng = np.random.default_rng(seed)
    S = rng.uniform(-1, 1, size=(B, B))
    loss = contrastive_loss(S, math.log(tau)).item()
    assert loss >= 0
    p = rng.permutation(B)
    assert contrastive_loss(S[p][:, p], math.log(tau)).item() == pytest.approx(loss, rel=1e-12, abs=1e-12)


def test_symmetric_loss_averages_directions():
    S = np.random.default_rng(0).uniform(-1, 1, size=(3, 3))
    both = contrastive_loss(S, 0.0, symmetric=True).item()
    assert both == pytest.approx(0.5 * (loop_loss(S, 1.0) + loop_loss(S.T, 1.0)), abs=1e-12)


def test_duplicate_mask_hides_same_targets_only():
    keys = ["a", "b", "a", "c", "a"]
    mask = duplicate_mask(keys)
    for i in range(5):
        for j in range(5):
            expected = i != j and keys[i] == keys[j]
            assert (mask[i, j] < 0) == expected


def test_masked_loss_equals_loss_without_duplicate_columns():
    S = np.random.default_rng(4).uniform(-1, 1, size=(3, 3))
    masked = contrastive_loss(S, 0.0, ["x", "y", "x"]).item()
    # row 0 sees columns {0, 1}, row 1 all, row 2 sees {1, 2}
    rows = [
        math.log(math.exp(S[0, 0]) + math.exp(S[0, 1])) - S[0, 0],
        math.log(sum(math.exp(v) for v in S[1])) - S[1, 1],
        math.log(math.exp(S[2, 1]) + math.exp(S[2, 2])) - S[2, 2],
    ]
    assert masked == pytest.approx(sum(rows) / 3, abs=1e-12)


# -- batching ---------------------------------------------------------------


def test_batches_co_schedule_image_conditions():
    trips = make_triplets(distinct_specs()[:4], ["color", "shape"], VOCAB)
    (batch,) = build_batches(trips, 8, seed=0)
    assert sorted(t.image_id for t in batch.triplets) == [0, 0, 1, 1, 2, 2, 3, 3]


def test_batches_are_full_and_distinct_when_possible():
    trips = make_triplets(distinct_specs(), ["color", "shape", "both"], VOCAB)
    batches = build_batches(trips, 12, seed=3)
    assert [len(b) for b in batches] == [12] * 4
    # the first batch has the whole remaining queue to draw replacements from
    assert batches[0].duplicate_count() == 0


def test_duplicate_output_is_swapped_out():
    specs = [ShapeSpec("circle", "red", (16, 16), 5), ShapeSpec("square", "red", (16, 16), 5),
             ShapeSpec("cross", "blue", (16, 16), 5), ShapeSpec("square", "green", (16, 16), 5)]
    trips = make_triplets(specs, ["color"], VOCAB)
    for seed in range(20):
        (batch,) = build_batches(trips, 2, seed)[:1]
        assert batch.duplicate_count() == 0


def test_require_distinct_raises_when_impossible():
    specs = [ShapeSpec("circle", "red", (16, 16), 5), ShapeSpec("square", "red", (16, 16), 5)]
    trips = make_triplets(specs, ["color"], VOCAB)
    with pytest.raises(ValueError, match="distinct"):
        build_batches(trips, 2, 0, require_distinct=True)
    assert build_batches(trips, 2, 0)[0].duplicate_count() == 1


def test_batches_deterministic_and_drop_tail():
    trips = make_triplets(distinct_specs(), ["color", "shape", "both"], VOCAB)
    a = build_batches(trips, 10, seed=5)
    b = build_batches(trips, 10, seed=5)
    assert len(a) == 4
    assert [[id(t) for t in x.triplets] for x in a] == [[id(t) for t in x.triplets] for x in b]
    c = build_batches(trips, 10, seed=6)
    assert [[id(t) for t in x.triplets] for x in a] != [[id(t) for t in x.triplets] for x in c]


def test_batches_are_a_permutation_prefix():
    trips = make_triplets(distinct_specs(), ["color", "shape"], VOCAB)
    used = [id(t) for b in build_batches(trips, 8, seed=1) for t in b.triplets]
    assert len(used) == len(set(used)) == 32


def test_too_few_triplets():
    trips = make_triplets(distinct_specs()[:2], ["color"], VOCAB)
    with pytest.raises(ValueError):
        build_batches(trips, 4, 0)
    with pytest.raises(ValueError):
        build_batches(trips, 1, 0)


# -- optimiser and schedule -------------------------------------------------


def _params(rng):
    return {"w": Tensor(rng.normal(size=(3, 2))), "b": Tensor(rng.normal(size=2))}


def test_adamw_zero_grads_no_decay_is_identity():
    p = _params(np.random.default_rng(0))
    before = {k: v.data.copy() for k, v in p.items()}
    adamw_step(p, {k: np.zeros_like(v.data) for k, v in p.items()}, AdamState(), lr=0.1)
    for k in p:
        np.testing.assert_array_equal(p[k].data, before[k])


def test_adamw_first_step_closed_form():
    rng = np.random.default_rng(1)
    p = _params(rng)
    before = {k: v.data.copy() for k, v in p.items()}
    grads = {k: rng.normal(size=v.shape) for k, v in p.items()}
    lr = 0.01
    adamw_step(p, grads, AdamState(), lr=lr)
    for k in p:
        g = grads[k]
        expected = before[k] - lr * g / (np.sqrt(g * g) + 1e-8)
        np.testing.assert_allclose(p[k].data, expected, atol=1e-12, rtol=0)


def test_adamw_decay_shrinks():
    p = _params(np.random.default_rng(2))
    before = {k: v.data.copy() for k, v in p.items()}
    adamw_step(p, {}, AdamState(), lr=0.1, weight_decay=0.5)
    for k in p:
        np.testing.assert_allclose(p[k].data, before[k] * (1 - 0.05), atol=1e-15)


def test_adamw_errors():
    p = _params(np.random.default_rng(3))
    with pytest.raises(FloatingPointError):
        adamw_step(p, {"w": np.full((3, 2), np.inf)}, AdamState(), lr=0.1)
    state = AdamState(m={"w": np.zeros((2, 2))}, v={"w": np.zeros((2, 2))})
    with pytest.raises(ShapeError):
        adamw_step(p, {}, state, lr=0.1)


def test_lr_schedule_shape():
    total, base = 1000, 3e-3
    warm = warmup_steps(total, 0.03)
    assert warm == 30
    assert lr_schedule(0, total, base, 0.03) == 0.0
    assert lr_schedule(1, total, base, 0.03) == pytest.approx(base / warm)
    assert lr_schedule(warm, total, base, 0.03) == pytest.approx(base)
    assert lr_schedule(total - 1, total, base, 0.03) < 0.01 * base
    lrs = [lr_schedule(s, total, base, 0.03) for s in range(warm, total)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_schedule(total, total, base, 0.03)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_ratio=1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


# -- composition and loop ---------------------------------------------------


def _tiny_setup(variant="clip_style"):
    cfg = EncoderConfig(vocab_size=len(VOCAB), embed_dim=16, num_layers=1, num_heads=2, variant=variant)
    target = TargetEncoder("frozen_text", len(VOCAB), embed_dim=16, num_heads=2)
    return cfg, target


@pytest.mark.parametrize("variant", ["clip_style", "mllm_style"])
@pytest.mark.parametrize("seed", range(3))
def test_full_encoder_loss_grad_check(variant, seed):
    cfg, target = _tiny_setup(variant)
    params = init_params(cfg, seed)
    specs = distinct_specs()
    rng = np.random.default_rng(seed)
    pick = rng.choice(16, 2, replace=False)
    trips = make_triplets([specs[i] for i in pick], ["color", "shape"], VOCAB)
    batch = Batch([trips[0], trips[3]])
    for name in rng.choice(sorted(params), 4, replace=False):

        def f(t, name=name):
            return batch_loss(batch, dict(params, **{name: t}), cfg, target)

        idx = rng.choice(params[name].data.size, min(6, params[name].data.size), replace=False)
        assert grad_check(f, params[name], indices=idx) < 1e-4, name


def _tiny_train(seed=0, **kw):
    cfg, target = _tiny_setup()
    trips = make_triplets(distinct_specs(), ["color", "shape", "both"], VOCAB)
    config = TrainConfig(batch_size=8, epochs=3, learning_rate=3e-3, seed=seed, **kw)
    return train(config, trips, cfg, target), target


def test_train_is_deterministic_and_target_frozen():
    (p1, _, r1), target = _tiny_train()
    (p2, _, r2), _ = _tiny_train()
    assert params_fingerprint(p1) == params_fingerprint(p2)
    assert r1.losses == r2.losses
    assert r1.target_fingerprint_before == r1.target_fingerprint_after == target.fingerprint()
    assert r1.steps_per_epoch == 6 and len(r1.losses) == 18
    assert all(np.isfinite(r1.losses))
    assert min(r1.temperatures) >= 0.01


def test_train_loss_log_format():
    (_, _, report), _ = _tiny_train()
    lines = report.loss_log().splitlines()
    assert lines[0] == "step\tlr\tloss"
    step, lr, loss = lines[1].split("\t")
    assert step == "0" and float(lr) == 0.0 and float(loss) == report.losses[0]


def test_first_step_loss_near_log_b():
    cfg = EncoderConfig(vocab_size=len(VOCAB))
    target = TargetEncoder("frozen_text", len(VOCAB))
    from focallens.data import generate_colorshape

    trips = make_triplets(generate_colorshape(0, 5), ["color", "shape", "both"], VOCAB)
    batch = build_batches(trips, 64, seed=[0, 0])[0]
    loss = batch_loss(batch, init_params(cfg, 0), cfg, target).item()
    assert abs(loss - math.log(64)) < 0.3


def test_divergence_reports_step():
    cfg, target = _tiny_setup()
    params = init_params(cfg, 0)
    params["patch.w"] = Tensor(np.full(params["patch.w"].shape, np.nan), requires_grad=True)
    trips = make_triplets(distinct_specs(), ["color"], VOCAB)
    with pytest.raises(TrainingDiverged) as err:
        train(TrainConfig(batch_size=4, epochs=1), trips, cfg, target, params=params)
    assert err.value.step == 0
    assert set(err.value.params) == set(params)
