import numpy as np
import pytest

from cpfd import autodiff as ad
from cpfd.model import ModelConfig, TaggerModel, freeze_snapshot
from cpfd.objective import balanced_pseudo_ce


def make_model(seed=0, classes=3, **kw):
    cfg = ModelConfig(**{"vocab_size": 11, "max_seq_len": 16, **kw})
    return TaggerModel(cfg, classes, np.random.Generator(np.random.PCG64(seed)))


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(vocab_size=5, d_model=30, heads=4)

    def test_sizes_positive(self):
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=5, layers=0)


class TestForward:
    def test_shapes(self):
        m = make_model()
        logits, attn = m.forward([1, 2, 3, 4, 5])
        assert logits.shape == (5, 3)
        assert attn.shape == (2, 2, 5, 5)

    def test_single_token(self):
        logits, attn = make_model().forward([7])
        assert logits.shape == (1, 3)
        np.testing.assert_array_equal(attn.data, np.ones((2, 2, 1, 1)))

    def test_attention_rows_stochastic(self):
        m = make_model()
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(1, 12))
            _, attn = m.forward(rng.integers(0, 11, size=n))
            assert (attn.data >= 0).all() and (attn.data <= 1).all()
            np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_padding_does_not_leak(self):
        m = make_model()
        ids = np.array([[3, 4, 5, 0, 0], [1, 2, 3, 4, 5]])
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
        logits, attn = m.forward_batch(ids, mask)
        solo_logits, solo_attn = m.forward([3, 4, 5])
        np.testing.assert_allclose(logits.data[0, :3], solo_logits.data, atol=1e-12)
        np.testing.assert_allclose(attn.data[0, ..., :3, :3], solo_attn.data, atol=1e-12)
        assert (attn.data[0, ..., 3:] == 0).all()

    def test_frozen_repeatable(self):
        snap = freeze_snapshot(make_model())
        a, _ = snap.forward([1, 2, 3])
        b, _ = snap.forward([1, 2, 3])
        assert np.array_equal(a.data, b.data)

    def test_rejects_out_of_vocab(self):
        with pytest.raises(ValueError, match="vocabulary"):
            make_model().forward([1, 11])

    def test_rejects_too_long(self):
        with pytest.raises(ValueError, match="max_seq_len"):
            make_model().forward(list(range(1, 11)) * 2)


class TestExpansion:
    def test_old_logits_preserved_exactly(self):
        m = make_model()
        rng = np.random.default_rng(2)
        inputs = [rng.integers(0, 11, size=int(rng.integers(1, 9))) for _ in range(10)]
        before = [m.forward(x)[0].data for x in inputs]
        m.expand_classifier(2, np.random.Generator(np.random.PCG64(5)))
        assert m.num_classes == 5
        for x, old in zip(inputs, before):
            new = m.forward(x)[0].data
            assert np.array_equal(new[:, :3], old)
            assert np.array_equal(new[:, :3].argmax(-1), old.argmax(-1))

    def test_new_rows_small(self):
        m = make_model()
        m.expand_classifier(40, np.random.Generator(np.random.PCG64(5)))
        new = m.params["cls1.w"].data
        assert abs(new.std() - 0.02) < 0.005
        assert (m.params["cls1.b"].data == 0).all()

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            make_model().expand_classifier(0, np.random.Generator(np.random.PCG64(0)))


class TestSnapshot:
    def test_bitwise_copy(self):
        m = make_model()
        snap = freeze_snapshot(m)
        for k in m.params:
            assert np.array_equal(m.params[k].data, snap.params[k].data)
            assert m.params[k].data is not snap.params[k].data

    def test_snapshot_unaffected_by_training(self):
        m = make_model()
        snap = freeze_snapshot(m)
        ref = snap.forward([1, 2, 3])[0].data.copy()
        opt = ad.Adam(m.parameters(), lr=0.05)
        for _ in range(3):
            opt.zero_grad()
            logits, _ = m.forward([1, 2, 3])
            ad.backward(balanced_pseudo_ce(logits, np.array([0, 1, 2])))
            opt.step()
        assert not np.array_equal(m.forward([1, 2, 3])[0].data, ref)
        assert np.array_equal(snap.forward([1, 2, 3])[0].data, ref)

    def test_inference_allocates_no_grads(self):
        snap = freeze_snapshot(make_model())
        logits, attn = snap.forward([1, 2, 3])
        assert not logits.requires_grad and not attn.requires_grad
        assert all(p.grad is None and not p.requires_grad for p in snap.parameters())


def test_end_to_end_gradient():
    m = make_model(seed=3, layers=1, heads=2, d_model=8, d_ff=8)
    ids = np.array([2, 5, 9])
    target = np.array([0, 2, 1])

    def loss():
        logits, _ = m.forward(ids)
        return balanced_pseudo_ce(logits, target)

    ad.backward(loss())
    for name, p in m.params.items():
        num = ad.numerical_grad(lambda: loss().item(), p.data)
        err = np.abs(num - p.grad).max() / max(np.abs(num).max(), 1e-8)
        assert err < 1e-3, name
