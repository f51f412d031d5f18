import numpy as np
import pytest

from growcl.encoder import (
    EncoderConfig,
    EncoderError,
    FrozenBackbone,
    GradientLayout,
    Head,
    PromptSet,
    class_mask_bias,
    forward_prompted,
    forward_query,
    grad_prompts,
    loss_and_grads,
    pretrain_backbone,
    prompted_with_layers,
    query_with_layers,
)

CFG = EncoderConfig(d_model=16, n_blocks=2, n_heads=4, prompt_len=3, prompted_blocks=(0, 1),
                    input_dim=10, n_feature_tokens=3)


@pytest.fixture
def setup():
    rng = np.random.default_rng(42)
    backbone = FrozenBackbone.init(CFG, rng)
    head = Head.init(CFG.d_model, 8, rng)
    pset = PromptSet.init(CFG, rng, set_id=0)
    batch = rng.standard_normal((6, CFG.input_dim))
    labels = rng.integers(0, 4, size=6)
    return backbone, head, pset, batch, labels


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(EncoderError):
            EncoderConfig(d_model=10, n_heads=4)

    def test_prompted_blocks_range(self):
        with pytest.raises(EncoderError):
            EncoderConfig(n_blocks=2, prompted_blocks=(0, 2))


class TestForwardPrompted:
    def test_deterministic(self, setup):
        backbone, head, pset, batch, _ = setup
        a = forward_prompted(backbone, head, pset, batch, range(8))
        b = forward_prompted(backbone, head, pset, batch, range(8))
        assert np.array_equal(a, b)

    def test_mask_forces_argmax(self, setup):
        backbone, head, pset, batch, _ = setup
        logits = forward_prompted(backbone, head, pset, batch[:1], head_mask=[5])
        assert logits.shape == (1, 8)
        assert logits.argmax() == 5

    def test_shape_mismatch(self, setup):
        backbone, head, pset, _, _ = setup
        with pytest.raises(EncoderError):
            forward_prompted(backbone, head, pset, np.ones((2, 7)), range(8))

    def test_mask_bias_values(self):
        bias = class_mask_bias(5, [1, 3])
        assert bias[1] == 0.0 and bias[3] == 0.0
        assert bias[0] < -1e29


class TestForwardQuery:
    def test_repeatable_and_dimension(self, setup):
        backbone, _, _, batch, _ = setup
        q1 = forward_query(backbone, batch)
        q2 = forward_query(backbone, batch)
        assert np.array_equal(q1, q2)
        assert q1.shape == (6, CFG.d_model)

    def test_independent_of_prompts(self, setup):
        backbone, _, pset, batch, _ = setup
        q1 = forward_query(backbone, batch)
        pset.p += 100.0  # mutate the pool; the query path must not notice
        q2 = forward_query(backbone, batch)
        assert np.array_equal(q1, q2)

    def test_layer_reps_shapes(self, setup):
        backbone, _, pset, batch, _ = setup
        q, reps = query_with_layers(backbone, batch)
        assert set(reps) == {0, 1, "final"}
        assert reps[0].shape == (6, CFG.d_model)
        assert np.array_equal(reps["final"], q)
        _, preps = prompted_with_layers(backbone, pset, batch)
        assert set(preps) == {0, 1, "final"}


def finite_difference_entry(build_loss, arr, idx, h=1e-4):
    orig = arr[idx]
    arr[idx] = orig + h
    up = build_loss()
    arr[idx] = orig - h
    down = build_loss()
    arr[idx] = orig
    return (up - down) / (2 * h)


class TestGradients:
    def test_prompt_grad_matches_finite_differences(self, setup):
        backbone, head, pset, batch, labels = setup
        mask = range(8)

        def loss_value():
            return loss_and_grads(backbone, head, pset, batch, labels, mask)[0]

        grad = grad_prompts(backbone, head, pset, batch, labels, mask)
        rng = np.random.default_rng(3)
        for _ in range(12):
            j = rng.integers(0, CFG.n_prompted)
            r = rng.integers(0, CFG.prompt_len)
            c = rng.integers(0, CFG.d_model)
            num = finite_difference_entry(loss_value, pset.p, (j, r, c))
            ana = grad.segment(f"block{CFG.prompted_blocks[j]}")[r, c]
            assert ana == pytest.approx(num, rel=1e-3, abs=1e-5)

    def test_key_grad_mse_analytic(self, setup):
        backbone, head, pset, batch, labels = setup
        cfg = EncoderConfig(**{**CFG.__dict__, "key_loss": "mse"})
        backbone = FrozenBackbone(cfg, backbone.weights)
        q_bar = np.random.default_rng(5).standard_normal(CFG.d_model)
        grad = grad_prompts(backbone, head, pset, batch, labels, range(8), q_bar=q_bar)
        np.testing.assert_allclose(grad.segment("key"), 2 * (pset.k - q_bar), atol=1e-10)

    def test_key_grad_cosine_finite_differences(self, setup):
        backbone, head, pset, batch, labels = setup
        q_bar = np.random.default_rng(6).standard_normal(CFG.d_model)

        def loss_value():
            return loss_and_grads(backbone, head, pset, batch, labels, range(8), q_bar=q_bar)[0]

        grad = grad_prompts(backbone, head, pset, batch, labels, range(8), q_bar=q_bar)
        for c in (0, 3, 11):
            num = finite_difference_entry(loss_value, pset.k, (c,))
            assert grad.segment("key")[c] == pytest.approx(num, rel=1e-3, abs=1e-6)

    def test_saturated_loss_gives_small_grad(self, setup):
        backbone, head, pset, batch, _ = setup
        # One class allowed and boosted far above the rest: loss ~ 0.
        head = Head(head.w.copy(), head.b.copy())
        head.b[2] = 50.0
        labels = np.full(len(batch), 2)
        loss, grad, _, _ = loss_and_grads(backbone, head, pset, batch, labels, [2, 3])
        assert loss < 1e-6
        assert grad.norm < 1e-4

    def test_empty_batch_rejected(self, setup):
        backbone, head, pset, _, _ = setup
        with pytest.raises(EncoderError):
            grad_prompts(backbone, head, pset, np.zeros((0, CFG.input_dim)), np.array([]), range(8))

    def test_labels_outside_mask_rejected(self, setup):
        backbone, head, pset, batch, _ = setup
        with pytest.raises(EncoderError):
            grad_prompts(backbone, head, pset, batch, np.full(6, 7), head_mask=[0, 1])

    def test_head_grads_masked_to_current_rows(self, setup):
        backbone, head, pset, batch, labels = setup
        _, _, gw, gb = loss_and_grads(
            backbone, head, pset, batch, labels, range(8), train_head_classes=[0, 1, 2, 3]
        )
        assert np.all(gw[:, 4:] == 0) and np.all(gb[4:] == 0)
        assert np.any(gw[:, :4] != 0)


class TestFrozenExtras:
    def test_extra_changes_logits_but_gets_no_grad(self, setup):
        backbone, head, pset, batch, labels = setup
        extra = np.random.default_rng(7).standard_normal((CFG.n_prompted, 2 * CFG.prompt_len, CFG.d_model))
        base = forward_prompted(backbone, head, pset, batch, range(8))
        with_extra = forward_prompted(backbone, head, pset, batch, range(8), extra=extra)
        assert not np.allclose(base, with_extra)
        snapshot = extra.copy()
        grad_prompts(backbone, head, pset, batch, labels, range(8), extra=extra)
        assert np.array_equal(extra, snapshot)

    def test_finite_differences_with_extra(self, setup):
        backbone, head, pset, batch, labels = setup
        extra = np.random.default_rng(8).standard_normal((CFG.n_prompted, CFG.prompt_len, CFG.d_model))

        def loss_value():
            return loss_and_grads(backbone, head, pset, batch, labels, range(8), extra=extra)[0]

        grad = grad_prompts(backbone, head, pset, batch, labels, range(8), extra=extra)
        num = finite_difference_entry(loss_value, pset.p, (0, 1, 2))
        assert grad.segment("block0")[1, 2] == pytest.approx(num, rel=1e-3, abs=1e-5)


class TestBackbone:
    def test_hash_stable_under_training_steps(self, setup):
        backbone, head, pset, batch, labels = setup
        before = backbone.weights_hash()
        for _ in range(3):
            grad = grad_prompts(backbone, head, pset, batch, labels, range(8))
            pset.p -= 0.1 * grad.segment("block0")  # prompt step only
        assert backbone.weights_hash() == before

    def test_pretrain_changes_then_freezes(self):
        rng = np.random.default_rng(11)
        backbone = FrozenBackbone.init(CFG, rng)
        before = backbone.weights_hash()
        data = rng.standard_normal((40, CFG.input_dim))
        labels = rng.integers(0, 4, size=40)
        pretrain_backbone(backbone, data, labels, steps=5, lr=0.05, batch_size=16, rng=rng)
        assert backbone.weights_hash() != before


class TestGradientLayout:
    def test_segment_roundtrip(self):
        layout = GradientLayout(CFG)
        flat = np.arange(layout.size, dtype=float)
        total = sum(int(np.prod(s)) for _, _, s in layout.segments)
        assert total == layout.size
        assert layout.view(flat, "key").shape == (CFG.d_model,)
        assert layout.view(flat, "block0").shape == (CFG.prompt_len, CFG.d_model)
        with pytest.raises(KeyError):
            layout.view(flat, "block9")
