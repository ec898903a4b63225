"""Low-rank adapters: zero-init equivalence, freezing, merge, bookkeeping."""

import numpy as np
import pytest

from tokentrace.errors import StateError
from tokentrace.nn.lora import LoraModel, attach_lora, merge_lora, params_hash
from tokentrace.nn.tensor import Tensor
from tokentrace.nn.transformer import Transformer, TransformerConfig

CFG = TransformerConfig(
    n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=19, max_positions=24
)
IDS = [1, 2, 3, 4, 5, 6]


def readout(logits: Tensor) -> Tensor:
    w = np.random.default_rng((7,) + logits.shape).normal(size=logits.shape)
    return (logits * Tensor(w)).sum()


class TestAttach:
    def test_zero_b_makes_adapted_equal_base(self):
        """Before any step the adapted model is the base model exactly."""
        plain = Transformer(CFG, seed=4).forward(IDS).data
        model = attach_lora(Transformer(CFG, seed=4), rank=4, alpha=8.0, seed=0)
        np.testing.assert_array_equal(model.forward(IDS).data, plain)

    def test_every_targeted_projection_gets_factors(self):
        model = attach_lora(Transformer(CFG, seed=0), targets=("wq", "wv"), rank=4, alpha=8.0)
        expected = {f"layer{i}.{k}" for i in range(2) for k in ("wq", "wv")}
        assert set(model.base.adapters) == expected
        names = set(model.trainable_parameters())
        assert names == {f"{n}.lora_{f}" for n in expected for f in ("a", "b")}

    def test_factor_shapes_scale_and_init(self):
        model = attach_lora(Transformer(CFG, seed=0), rank=4, alpha=8.0, seed=1)
        ad = model.base.adapters["layer0.wq"]
        assert ad.a.data.shape == (16, 4)
        assert ad.b.data.shape == (4, 16)
        assert ad.scale == 2.0  # alpha / rank
        np.testing.assert_array_equal(ad.b.data, 0.0)
        assert ad.a.data.any()

    def test_trainable_count_counts_only_factors(self):
        model = attach_lora(Transformer(CFG, seed=0), targets=("wq", "wv"), rank=4, alpha=8.0)
        # 2 layers x 2 targets x (16*4 + 4*16)
        assert model.trainable_count() == 2 * 2 * (64 + 64)

    def test_base_is_frozen(self):
        model = attach_lora(Transformer(CFG, seed=0), rank=4, alpha=8.0)
        assert all(not p.requires_grad for p in model.base.params.values())
        assert all(t.requires_grad for t in model.trainable_parameters().values())

    def test_rejects_bad_targets_and_rank(self):
        with pytest.raises(ValueError):
            attach_lora(Transformer(CFG, seed=0), targets=("conv",), rank=4)
        with pytest.raises(ValueError):
            attach_lora(Transformer(CFG, seed=0), rank=0)
        with pytest.raises(ValueError):
            attach_lora(Transformer(CFG, seed=0), rank=17)  # > d_model
        with pytest.raises(StateError):
            attach_lora(attach_lora(Transformer(CFG, seed=0), rank=2).base, rank=2)


class TestGradientFlow:
    def test_only_factors_receive_gradients(self):
        """Backward touches A and B, never the frozen base."""
        model = attach_lora(Transformer(CFG, seed=2), rank=4, alpha=8.0, seed=3)
        readout(model.forward(IDS)).backward()
        for name, t in model.trainable_parameters().items():
            assert t.grad is not None, name
        assert all(p.grad is None for p in model.base.params.values())

    def test_a_gradient_is_nonzero_at_zero_b(self):
        """With B = 0, dL/dB != 0 while dL/dA == 0: training can start."""
        model = attach_lora(Transformer(CFG, seed=2), rank=4, alpha=8.0, seed=3)
        readout(model.forward(IDS)).backward()
        ad = model.base.adapters["layer0.wq"]
        assert np.abs(ad.b.grad).max() > 0
        np.testing.assert_allclose(ad.a.grad, 0.0, atol=1e-12)

    def test_factor_gradients_match_finite_differences(self):
        """Adapter gradients agree with central differences on a f64 base."""
        h = 1e-4
        model = attach_lora(
            Transformer(CFG, seed=2, dtype=np.float64), rank=2, alpha=4.0, seed=3
        )
        # move B off zero so dL/dA is nonzero too
        rng = np.random.default_rng(11)
        for ad in model.base.adapters.values():
            ad.b.data = rng.normal(0.0, 0.01, size=ad.b.data.shape)
        readout(model.forward(IDS)).backward()

        def value() -> float:
            return float(readout(model.forward(IDS)).data)

        for name, t in model.trainable_parameters().items():
            flat = t.data.reshape(-1)
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = value()
                flat[i] = orig - h
                fm = value()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2 * h)
            np.testing.assert_allclose(
                t.grad.reshape(-1), numeric, rtol=1e-4, atol=1e-7, err_msg=name
            )


class TestMerge:
    def _trained_model(self) -> LoraModel:
        model = attach_lora(Transformer(CFG, seed=4), rank=4, alpha=8.0, seed=5)
        rng = np.random.default_rng(6)
        for t in model.trainable_parameters().values():
            t.data = rng.normal(0.0, 0.02, size=t.data.shape).astype(t.data.dtype)
        return model

    def test_merged_model_matches_adapted_forward(self):
        """Dense W + scale * A @ B reproduces the adapter path closely."""
        model = self._trained_model()
        adapted = model.forward(IDS).data
        merged = merge_lora(model).forward(IDS).data
        np.testing.assert_allclose(merged, adapted, atol=1e-5)

    def test_merged_model_has_no_adapters(self):
        merged = merge_lora(self._trained_model())
        assert merged.adapters == {}

    def test_double_merge_raises(self):
        model = self._trained_model()
        merge_lora(model)
        with pytest.raises(StateError):
            merge_lora(model)


class TestFreezeHash:
    def test_hash_is_order_independent(self, rng):
        a = {"x": rng.normal(size=(3, 3)), "y": rng.normal(size=(2,))}
        b = dict(reversed(list(a.items())))
        assert params_hash(a) == params_hash(b)

    def test_hash_detects_value_dtype_and_name_changes(self, rng):
        base = {"x": rng.normal(size=(3, 3))}
        assert params_hash(base) != params_hash({"x": base["x"] + 1e-12})
        assert params_hash(base) != params_hash({"x": base["x"].astype(np.float32)})
        assert params_hash(base) != params_hash({"y": base["x"]})

    def test_training_steps_leave_base_hash_unchanged(self):
        """Optimizing the factors never perturbs the frozen weights."""
        from tokentrace.training import AdamW

        model = attach_lora(Transformer(CFG, seed=8), rank=2, alpha=4.0, seed=9)
        before = params_hash(model.base.state_dict())
        opt = AdamW(model.trainable_parameters(), weight_decay=0.01)
        rng = np.random.default_rng(10)
        for _ in range(5):
            ids = rng.integers(0, CFG.vocab_size, size=8)
            model.zero_grad()
            readout(model.forward(ids)).backward()
            opt.step(2e-4)
        assert params_hash(model.base.state_dict()) == before
        assert any(t.data.any() for n, t in model.trainable_parameters().items() if n.endswith("lora_b"))


class TestAdapterState:
    def test_round_trip(self):
        model = attach_lora(Transformer(CFG, seed=4), rank=4, alpha=8.0, seed=5)
        rng = np.random.default_rng(12)
        for t in model.trainable_parameters().values():
            t.data = rng.normal(size=t.data.shape).astype(t.data.dtype)
        state = model.adapter_state()
        clone = attach_lora(Transformer(CFG, seed=4), rank=4, alpha=8.0, seed=99)
        clone.load_adapter_state(state)
        np.testing.assert_array_equal(clone.forward(IDS).data, model.forward(IDS).data)

    def test_load_rejects_mismatched_names(self):
        model = attach_lora(Transformer(CFG, seed=4), rank=4, alpha=8.0)
        state = model.adapter_state()
        del state[next(iter(state))]
        with pytest.raises(ValueError):
            model.load_adapter_state(state)
