import numpy as np
import pytest

from flowunfold.diff import ParamStore, grad_check, zero_grads
from flowunfold.errors import GradCheckError
from flowunfold.numerics import Prng


def quadratic(store):
    """f(p) = 0.5 * ||p||^2 with analytic gradient p."""
    total = 0.0
    for p in store:
        total += 0.5 * float(np.sum(p.value**2))
        p.grad += p.value
    return total


class TestParamStore:
    def test_insertion_order(self):
        s = ParamStore()
        s.add("b.x", np.zeros(2))
        s.add("a.y", np.zeros(3))
        assert s.names() == ["b.x", "a.y"]

    def test_duplicate_name_rejected(self):
        s = ParamStore()
        s.add("w", np.zeros(1))
        with pytest.raises(ValueError, match="duplicate"):
            s.add("w", np.zeros(1))

    def test_grad_mirrors_value_shape(self):
        s = ParamStore()
        p = s.add("w", np.ones((2, 3)))
        assert p.grad.shape == (2, 3)
        assert np.all(p.grad == 0)

    def test_snapshot_restore(self):
        s = ParamStore()
        p = s.add("w", np.arange(4.0))
        snap = s.snapshot()
        p.value[...] = -1.0
        s.restore(snap)
        assert np.array_equal(p.value, np.arange(4.0))


class TestZeroGrads:
    def test_zeroes_grads(self):
        s = ParamStore()
        p = s.add("w", np.zeros(2))
        p.grad[...] = np.array([3.0, -1.0])
        zero_grads(s)
        assert np.array_equal(p.grad, np.zeros(2))

    def test_empty_store_noop(self):
        zero_grads(ParamStore())

    def test_values_untouched(self):
        s = ParamStore()
        p = s.add("w", np.array([1.5, -2.5]))
        before = p.value.copy()
        p.grad[...] = 7.0
        zero_grads(s)
        assert np.array_equal(p.value, before)


class TestGradCheck:
    def test_quadratic_exact(self):
        s = ParamStore()
        s.add("a", Prng(1).gauss_array((3, 3)))
        s.add("b", Prng(2).gauss_array(5))
        assert grad_check(quadratic, s, probes=16) < 1e-9

    def test_accumulation_doubles(self):
        s = ParamStore()
        p = s.add("a", np.array([2.0, -1.0]))
        quadratic(s)
        once = p.grad.copy()
        quadratic(s)
        assert np.array_equal(p.grad, 2.0 * once)

    def test_wrong_gradient_detected(self):
        def broken(store):
            total = 0.0
            for p in store:
                total += 0.5 * float(np.sum(p.value**2))
                p.grad += 1.1 * p.value  # deliberately off
            return total

        s = ParamStore()
        s.add("a", np.array([1.0, 2.0, 3.0]))
        assert grad_check(broken, s, probes=8) > 1e-2

    def test_nonfinite_raises_with_name(self):
        def exploding(store):
            v = float(store["w"].value[0])
            return float("inf") if abs(v - 1.0) > 1e-7 else 0.0

        s = ParamStore()
        s.add("w", np.array([1.0]))
        with pytest.raises(GradCheckError, match=r"w\[0\]"):
            grad_check(exploding, s, probes=1)

    def test_eps_bounds(self):
        s = ParamStore()
        s.add("a", np.ones(1))
        with pytest.raises(ValueError):
            grad_check(quadratic, s, probes=1, eps=1e-2)
