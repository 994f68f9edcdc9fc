"""Unit tests for the tensor_diff module.

Covers the parameter layout, the forward pass and both reverse-mode
gradients against central finite differences.
"""

import numpy as np
import pytest

from controllers.selfcheck_controller import central_difference, relative_error
from core.tensor_diff import (
    DimensionMismatchError, LabelError, MlpArchitecture, ParamVector, UnknownHeadError,
    backward_params, check_one_hot, forward, grad_input,
)


class TestLayout:
    """Flat parameter layout tests."""

    def test_segments_are_contiguous(self, small_arch):
        segments = small_arch.layout.segments
        offset = 0
        for seg in segments:
            assert seg.offset == offset
            offset += seg.length
        assert offset == small_arch.num_params

    def test_parameter_count(self, small_arch):
        # trunk 3*4+4 + 4*3+3, heads 3*3+3 and 3*2+2
        assert small_arch.num_params == 16 + 15 + 12 + 8

    def test_shared_head_has_single_head(self):
        arch = MlpArchitecture(5, (4,), {1: 10, 2: 10, 3: 10}, shared_head=True)
        assert arch.head_keys() == [0]
        assert arch.head_key(3) == 0
        assert arch.num_params == 5 * 4 + 4 + 4 * 10 + 10

    def test_masks_partition_the_vector(self, small_arch):
        layout = small_arch.layout
        total = layout.trunk_mask().astype(int) + layout.head_mask(1) + layout.head_mask(2)
        assert np.all(total == 1)

    def test_layout_serialization(self, small_arch):
        from core.tensor_diff import ParamLayout
        assert ParamLayout.from_list(small_arch.layout.to_list()) == small_arch.layout

    def test_invalid_architectures(self):
        with pytest.raises(ValueError):
            MlpArchitecture(3, (), {1: 2})
        with pytest.raises(ValueError):
            MlpArchitecture(3, (4,), {1: 1})
        with pytest.raises(ValueError):
            MlpArchitecture(3, (4,), {1: 2, 2: 3}, shared_head=True)


class TestForward:
    """Forward pass tests."""

    def test_output_shape(self, small_arch, random_params, rng):
        x = rng.uniform(size=(5, 3))
        assert forward(random_params, small_arch, x, 1).shape == (5, 3)
        assert forward(random_params, small_arch, x, 2).shape == (5, 2)

    def test_zero_parameters_give_zero_logits(self, small_arch, rng):
        params = ParamVector.zeros(small_arch.layout)
        assert np.all(forward(params, small_arch, rng.uniform(size=(4, 3)), 1) == 0.0)

    def test_single_hidden_unit_by_hand(self):
        arch = MlpArchitecture(1, (1,), {1: 2})
        # trunk weight 2, bias -1; head weights (3, -1), biases (0.5, 0)
        params = ParamVector(np.array([2.0, -1.0, 3.0, -1.0, 0.5, 0.0]), arch.layout)
        logits = forward(params, arch, np.array([[1.0], [0.25]]), 1)
        np.testing.assert_allclose(logits, [[3.5, -1.0], [0.5, 0.0]])

    def test_unknown_head(self, small_arch, random_params, rng):
        with pytest.raises(UnknownHeadError, match="unknown head"):
            forward(random_params, small_arch, rng.uniform(size=(2, 3)), 7)

    def test_input_dimension_mismatch(self, small_arch, random_params, rng):
        with pytest.raises(DimensionMismatchError, match="dimension mismatch"):
            forward(random_params, small_arch, rng.uniform(size=(2, 4)), 1)

    def test_parameter_dimension_mismatch(self, small_arch, rng):
        other = MlpArchitecture(3, (5,), {1: 3})
        params = ParamVector(rng.normal(size=other.num_params), other.layout)
        with pytest.raises(DimensionMismatchError):
            forward(params, small_arch, rng.uniform(size=(2, 3)), 1)


class TestGradients:
    """Reverse mode against central differences."""

    def test_backward_params_matches_finite_differences(self, small_arch, rng):
        for _ in range(20):
            theta = ParamVector(rng.normal(0.0, 0.7, small_arch.num_params), small_arch.layout)
            x = rng.uniform(size=(3, 3))
            upstream = rng.normal(size=(3, 3))

            def objective(values):
                return float(np.sum(upstream * forward(theta.with_values(values), small_arch, x, 1)))

            analytic = backward_params(theta, small_arch, x, 1, upstream).values
            assert relative_error(analytic, central_difference(objective, theta.values)) < 1e-4

    def test_grad_input_matches_finite_differences(self, small_arch, rng):
        for _ in range(20):
            theta = ParamVector(rng.normal(0.0, 0.7, small_arch.num_params), small_arch.layout)
            x = rng.uniform(size=(2, 3))
            y = np.eye(2)[rng.integers(0, 2, 2)]

            def energy(flat):
                return float(np.sum(y * forward(theta, small_arch, flat.reshape(2, 3), 2)))

            analytic = grad_input(theta, small_arch, x, 2, y)
            assert relative_error(analytic.ravel(), central_difference(energy, x.ravel())) < 1e-4

    def test_other_heads_get_zero_gradient(self, small_arch, random_params, rng):
        grad = backward_params(random_params, small_arch, rng.uniform(size=(4, 3)), 1, rng.normal(size=(4, 3)))
        assert np.all(grad.values[small_arch.layout.head_mask(2)] == 0.0)

    def test_batch_contributions_are_summed(self, small_arch, random_params, rng):
        x = rng.uniform(size=(2, 3))
        up = rng.normal(size=(2, 3))
        together = backward_params(random_params, small_arch, x, 1, up).values
        apart = sum(backward_params(random_params, small_arch, x[i:i + 1], 1, up[i:i + 1]).values for i in range(2))
        np.testing.assert_allclose(together, apart, rtol=1e-12, atol=1e-14)

    def test_linear_in_the_upstream_gradient(self, small_arch, random_params, rng):
        x = rng.uniform(size=(5, 3))
        u1, u2 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        a, b = 1.7, -0.4
        combined = backward_params(random_params, small_arch, x, 1, a * u1 + b * u2).values
        separate = (a * backward_params(random_params, small_arch, x, 1, u1).values
                    + b * backward_params(random_params, small_arch, x, 1, u2).values)
        np.testing.assert_allclose(combined, separate, rtol=1e-10, atol=1e-12)

    def test_upstream_shape_checked(self, small_arch, random_params, rng):
        with pytest.raises(DimensionMismatchError):
            backward_params(random_params, small_arch, rng.uniform(size=(2, 3)), 1, np.ones((2, 2)))


class TestLabels:
    """One-hot label validation."""

    def test_accepts_one_hot(self):
        check_one_hot(np.eye(3)[[0, 2, 1]], 3)

    @pytest.mark.parametrize("labels", [
        np.array([[1.0, 1.0]]),
        np.array([[0.5, 0.5]]),
        np.array([[0.0, 0.0]]),
    ])
    def test_rejects_non_one_hot(self, labels):
        with pytest.raises(LabelError, match="labels must be one-hot"):
            check_one_hot(labels)

    def test_grad_input_validates_labels(self, small_arch, random_params, rng):
        with pytest.raises(LabelError):
            grad_input(random_params, small_arch, rng.uniform(size=(1, 3)), 2, np.array([[0.3, 0.7]]))
