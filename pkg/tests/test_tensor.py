# tests/test_tensor.py
import threading

import numpy as np
import pytest

from app.errors import MaskError, NonFiniteError, ShapeError
from app.layers import Dropout, LayerNorm, Linear, Module, ResidualBlock
from app.tensor import (
    RngStream,
    Tensor,
    backward,
    concatenate,
    dropout,
    grad_check,
    grad_check_parameter,
    is_grad_enabled,
    layer_norm,
    matmul,
    no_grad,
    softmax,
    stack,
)


@pytest.mark.unit
class TestBackward:
    """Reverse-mode gradients of single operations"""

    def test_sum_gives_ones(self):
        """Gradient of sum(x) is all ones"""
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gives_twice_x(self):
        """Gradient of x.x is 2x"""
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])

    def test_fan_out_accumulates(self):
        """A tensor used twice receives both contributions"""
        x = Tensor([2.0], requires_grad=True)
        backward((x * 3.0 + x * x).sum())
        np.testing.assert_allclose(x.grad, [3.0 + 4.0])

    def test_broadcast_reduces_to_operand_shape(self):
        """Broadcast operands get gradients summed back to their own shape"""
        x = Tensor(np.ones((4, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        backward((x + b).sum())
        assert b.grad.shape == (3,)
        np.testing.assert_array_equal(b.grad, [4.0, 4.0, 4.0])

    def test_leaf_gradients_accumulate_until_zeroed(self):
        """Two backward passes add up on leaves"""
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(x.sum())
        backward(x.sum())
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])
        x.zero_grad()
        assert x.grad is None

    def test_non_scalar_loss_rejected(self):
        """backward needs a scalar"""
        with pytest.raises(ShapeError):
            backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)

    def test_gather_with_repeated_indices(self):
        """Fancy indexing scatters gradients with repetition"""
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(x[np.array([0, 0, 2])].sum())
        np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])

    def test_deep_chain_does_not_recurse(self):
        """Topological order is iterative, so long graphs are fine"""
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        backward(y.sum())
        np.testing.assert_array_equal(x.grad, [1.0])

    def test_no_grad_records_nothing(self):
        """Inside no_grad results carry no parents"""
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            assert not is_grad_enabled()
            y = (x * 2.0).sum()
        assert is_grad_enabled()
        assert not y.requires_grad

    def test_no_grad_is_thread_local(self):
        """Disabling gradients in one thread leaves others untouched"""
        seen = []

        def worker():
            seen.append(is_grad_enabled())

        with no_grad():
            thread = threading.Thread(target=worker)
            thread.start()
            thread.join()
        assert seen == [True]


@pytest.mark.unit
class TestTensorErrors:
    """Shape and finiteness errors"""

    def test_non_finite_rejected(self):
        """NaN and infinity raise"""
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])
        with pytest.raises(NonFiniteError):
            Tensor([0.0]).log()

    def test_matmul_shape_mismatch(self):
        """Inner dimensions must agree"""
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

    def test_bad_reshape(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones(6)).reshape(4, 2)

    def test_fully_masked_softmax_slice(self):
        """A row with every entry masked is an error"""
        with pytest.raises(MaskError):
            softmax(Tensor(np.zeros((2, 3))), mask=np.array([[1, 0, 0], [0, 0, 0]]))

    def test_dropout_probability_range(self):
        with pytest.raises(ValueError):
            dropout(Tensor(np.ones(3)), 1.0, RngStream(0))


@pytest.mark.unit
class TestSoftmax:
    """Masked, numerically stable softmax"""

    def test_rows_sum_to_one(self, np_rng):
        """Normalization holds for large logits"""
        x = np_rng.normal(0.0, 50.0, (20, 7))
        w = softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)
        assert (w >= 0).all()

    def test_masked_entries_exactly_zero(self, np_rng):
        """Masked keys get zero weight and the rest renormalize"""
        mask = np.array([1, 0, 1, 0])
        w = softmax(Tensor(np_rng.normal(size=(3, 4))), mask=mask).data
        assert (w[:, [1, 3]] == 0.0).all()
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


@pytest.mark.unit
class TestGradCheck:
    """Finite-difference agreement for ops and layers"""

    def test_sum_of_squares(self, np_rng):
        assert grad_check(lambda x: (x * x).sum(), np_rng.normal(size=(3, 4))) < 1e-6

    def test_softmax_then_pick(self, np_rng):
        assert grad_check(lambda x: softmax(x, axis=-1)[1, 2], np_rng.normal(size=(3, 5))) < 1e-4

    def test_constant_function(self):
        """Both gradients are zero"""
        assert grad_check(lambda x: (x * 0.0).sum(), np.ones(4)) == 0.0

    @pytest.mark.parametrize(
        "op",
        [
            lambda x: x.exp(),
            lambda x: (x * x + 1.0).log(),
            lambda x: x.sigmoid(),
            lambda x: x.softplus(),
            lambda x: x.tanh(),
            lambda x: (x * x + 1.0) ** 1.5,
            lambda x: 1.0 / (x * x + 1.0),
            lambda x: x.transpose(1, 0) @ x,
            lambda x: x.swapaxes(0, 1).reshape(-1),
            lambda x: concatenate([x, x * 2.0], axis=1),
            lambda x: stack([x, x.exp()], axis=0),
            lambda x: x.mean(axis=0, keepdims=True) - x,
            lambda x: softmax(x, axis=0, mask=np.array([[1], [0], [1]])),
        ],
    )
    def test_elementwise_and_structural_ops(self, op, np_rng):
        """Weighted sums of every op agree with central differences"""
        x = np_rng.normal(size=(3, 2))
        weights = np_rng.normal(size=op(Tensor(x)).shape)
        assert grad_check(lambda t: (op(t) * weights).sum(), x, step=1e-5) < 1e-4

    def test_layer_norm(self, np_rng):
        gain, bias = np_rng.normal(size=4), np_rng.normal(size=4)
        weights = np_rng.normal(size=(3, 4))
        assert grad_check(lambda x: (layer_norm(x, gain, bias) * weights).sum(), np_rng.normal(size=(3, 4)), step=1e-5) < 1e-4

    def test_layer_parameters(self, rng, np_rng):
        """Gradients with respect to parameters of a residual block"""
        block = ResidualBlock(4, rng, hidden=6)
        x = np_rng.normal(size=(5, 4))
        weights = np_rng.normal(size=(5, 4))
        for _, parameter in block.named_parameters():
            assert grad_check_parameter(lambda: (block(Tensor(x)) * weights).sum(), parameter, step=1e-5) < 1e-4


@pytest.mark.unit
class TestRngStream:
    """Seeded counter-based streams"""

    def test_same_seed_same_draws(self):
        np.testing.assert_array_equal(RngStream(5, 1).normal(size=10), RngStream(5, 1).normal(size=10))

    def test_substreams_are_independent(self):
        """Drawing from one substream does not shift another"""
        parent = RngStream(5)
        first = parent.substream(1).normal(size=4)
        parent.substream(2).normal(size=100)
        np.testing.assert_array_equal(parent.substream(1).normal(size=4), first)
        assert not np.array_equal(parent.substream(2).normal(size=4), first)


@pytest.mark.unit
class TestModule:
    """Parameter discovery and state dictionaries"""

    def test_named_parameters_in_definition_order(self, rng):
        class Pair(Module):
            def __init__(self):
                super().__init__()
                self.first = Linear(2, 3, rng)
                self.rest = [LayerNorm(3)]

        names = [name for name, _ in Pair().named_parameters()]
        assert names == ["first.weight", "first.bias", "rest.0.gain", "rest.0.shift"]

    def test_state_dict_round_trip(self, rng):
        source, target = Linear(3, 2, rng), Linear(3, 2, RngStream(99))
        target.load_state_dict(source.state_dict())
        np.testing.assert_array_equal(target.weight.data, source.weight.data)

    def test_load_state_dict_rejects_mismatch(self, rng):
        layer = Linear(3, 2, rng)
        state = layer.state_dict()
        state["weight"] = np.zeros((2, 3))
        with pytest.raises(ShapeError):
            layer.load_state_dict(state)
        with pytest.raises(ShapeError):
            layer.load_state_dict({"weight": np.zeros((3, 2))})

    def test_eval_disables_dropout(self, rng):
        layer = Dropout(0.5, rng)
        x = Tensor(np.ones((4, 4)))
        assert not np.array_equal(layer(x).data, x.data)
        layer.eval()
        np.testing.assert_array_equal(layer(x).data, x.data)

    def test_linear_width_mismatch(self, rng):
        with pytest.raises(ShapeError):
            Linear(3, 2, rng)(Tensor(np.ones((1, 4))))
