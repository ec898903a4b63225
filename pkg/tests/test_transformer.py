"""Causal transformer: shapes, determinism, causality, gradients, state."""

import numpy as np
import pytest

from tokentrace.errors import StateError
from tokentrace.nn.tensor import Tensor
from tokentrace.nn.transformer import Transformer, TransformerConfig, gelu, layer_norm

TINY = TransformerConfig(
    n_layers=1, n_heads=2, d_model=4, d_ff=8, vocab_size=7, max_positions=6
)
SMALL = TransformerConfig(
    n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=19, max_positions=24
)


def readout(logits: Tensor) -> Tensor:
    w = np.random.default_rng((99,) + logits.shape).normal(size=logits.shape)
    return (logits * Tensor(w)).sum()


class TestConfig:
    def test_rejects_indivisible_heads(self):
        with pytest.raises(ValueError):
            TransformerConfig(n_heads=3, d_model=16)

    def test_round_trips_through_dict(self):
        assert TransformerConfig(**SMALL.to_dict()) == SMALL


class TestForward:
    def test_output_shapes(self):
        model = Transformer(TINY, seed=0)
        assert model.forward([1, 2, 3]).shape == (3, 7)
        assert model.forward([[1, 2, 3], [4, 5, 6]]).shape == (2, 3, 7)

    def test_deterministic_in_seed(self):
        a = Transformer(SMALL, seed=5).forward([1, 2, 3, 4]).data
        b = Transformer(SMALL, seed=5).forward([1, 2, 3, 4]).data
        np.testing.assert_array_equal(a, b)

    def test_seed_changes_parameters(self):
        a = Transformer(SMALL, seed=5)
        b = Transformer(SMALL, seed=6)
        assert not np.array_equal(a.params["tok_emb"].data, b.params["tok_emb"].data)

    def test_rejects_bad_inputs(self):
        model = Transformer(TINY, seed=0)
        with pytest.raises(ValueError):
            model.forward([7])  # id == vocab_size
        with pytest.raises(ValueError):
            model.forward([-1])
        with pytest.raises(ValueError):
            model.forward([0] * 7)  # exceeds max_positions
        with pytest.raises(ValueError):
            model.forward([])
        with pytest.raises(ValueError):
            model.forward([[[0]]])

    def test_default_dtype_is_float32_end_to_end(self):
        model = Transformer(SMALL, seed=0)
        logits = model.forward([1, 2, 3])
        assert logits.dtype == np.float32
        readout(logits).backward()
        assert model.params["layer0.wq"].grad.dtype == np.float32

    def test_untrainable_forward_builds_no_tape(self):
        """Eval mode: no gradients anywhere, backward refuses to run."""
        model = Transformer(TINY, seed=0)
        model.set_trainable(False)
        logits = model.forward([1, 2, 3])
        assert not logits.requires_grad
        with pytest.raises(StateError):
            logits.sum().backward()


class TestCausality:
    def test_future_tokens_cannot_move_past_logits(self, rng):
        """Changing token j leaves logits at positions < j bit-identical."""
        model = Transformer(SMALL, seed=3)
        model.set_trainable(False)
        T = 12
        for _ in range(10):
            ids = rng.integers(0, SMALL.vocab_size, size=T)
            j = int(rng.integers(1, T))
            mutated = ids.copy()
            mutated[j] = (mutated[j] + 1 + rng.integers(SMALL.vocab_size - 1)) % SMALL.vocab_size
            base = model.forward(ids).data
            moved = model.forward(mutated).data
            np.testing.assert_array_equal(base[:j], moved[:j])
            assert not np.array_equal(base[j:], moved[j:])


class TestGradients:
    def test_all_parameters_match_finite_differences(self):
        """Analytic grads of every parameter agree with central differences."""
        h = 1e-4
        ids = np.array([1, 2, 3, 0, 5])
        model = Transformer(TINY, seed=1, dtype=np.float64)
        readout(model.forward(ids)).backward()

        def value() -> float:
            clean = Transformer(TINY, seed=1, dtype=np.float64)
            clean.set_trainable(False)
            for name, t in model.params.items():
                clean.params[name].data = t.data
            return float(readout(clean.forward(ids)).data)

        for name, t in model.params.items():
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
                t.grad.reshape(-1),
                numeric,
                rtol=1e-4,
                atol=1e-7,
                err_msg=f"gradient mismatch in {name}",
            )


class TestBuildingBlocks:
    def test_layer_norm_normalizes(self, rng):
        x = Tensor(rng.normal(size=(3, 8)) * 4 + 2)
        g = Tensor(np.ones(8))
        b = Tensor(np.zeros(8))
        y = layer_norm(x, g, b).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-7)
        np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-3)

    def test_gelu_matches_tanh_approximation(self, rng):
        x = rng.normal(size=(5,))
        expected = (
            0.5 * x * (1.0 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
        )
        np.testing.assert_allclose(gelu(Tensor(x)).data, expected, rtol=1e-12)


class TestState:
    def test_state_dict_round_trip_reproduces_logits(self):
        source = Transformer(SMALL, seed=7)
        clone = Transformer(SMALL, seed=99)
        clone.load_state_dict(source.state_dict())
        ids = [1, 2, 3, 4, 5]
        np.testing.assert_array_equal(
            source.forward(ids).data, clone.forward(ids).data
        )

    def test_state_dict_copies_are_independent(self):
        model = Transformer(TINY, seed=0)
        state = model.state_dict()
        state["head"][:] = 0.0
        assert model.params["head"].data.any()

    def test_load_rejects_wrong_keys_and_shapes(self):
        model = Transformer(TINY, seed=0)
        state = model.state_dict()
        bad = dict(state)
        del bad["head"]
        with pytest.raises(ValueError):
            model.load_state_dict(bad)
        bad = dict(state)
        bad["head"] = bad["head"][:, :-1]
        with pytest.raises(ValueError):
            model.load_state_dict(bad)
