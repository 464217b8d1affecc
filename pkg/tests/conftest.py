"""Shared test helpers: finite-difference oracles and random tiny models."""

import numpy as np
import pytest

from pfpl.numeric_core import Batch, Model, cross_entropy, forward_features, forward_logits, init_model


def flat_params(model: Model) -> np.ndarray:
    return np.concatenate([a.ravel() for a in model.parameter_arrays()])


def set_flat_params(model: Model, vec: np.ndarray) -> None:
    offset = 0
    for array in model.parameter_arrays():
        array[...] = vec[offset : offset + array.size].reshape(array.shape)
        offset += array.size
    assert offset == vec.size


def fd_gradient(loss_fn, model: Model, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of loss_fn(model) over every parameter."""
    base = flat_params(model)
    probe = model.copy()
    grad = np.empty_like(base)
    for i in range(base.size):
        vec = base.copy()
        vec[i] = base[i] + step
        set_flat_params(probe, vec)
        hi = loss_fn(probe)
        vec[i] = base[i] - step
        set_flat_params(probe, vec)
        lo = loss_fn(probe)
        grad[i] = (hi - lo) / (2.0 * step)
    return grad


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    # Denominator floor keeps exactly-zero components (dead ReLU paths) from
    # reporting spurious relative error.
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-6)
    return float(np.max(np.abs(a - b) / denom))


def mean_ce(model: Model, inputs: np.ndarray, labels: np.ndarray) -> float:
    logits = forward_logits(model, forward_features(model, inputs))
    return cross_entropy(logits, labels)[0]


def random_tiny_case(seed: int, max_tries: int = 50):
    """A tiny random model + batch whose pre-activations sit clear of the
    ReLU kink, so central differences stay on one side of it."""
    for attempt in range(max_tries):
        rng = np.random.default_rng(10_000 + seed + 1_000 * attempt)
        p = int(rng.integers(2, 6))
        hidden = int(rng.integers(3, 9))
        d = int(rng.integers(2, 7))
        classes = int(rng.integers(2, 5))
        n = int(rng.integers(1, 9))
        model = init_model([p, hidden, d], d, classes, seed=int(rng.integers(0, 2**31)))
        inputs = rng.normal(size=(n, p))
        labels = rng.integers(0, classes, size=n)
        margin = _min_preactivation(model, inputs)
        if margin > 1e-3:
            return model, Batch(inputs, labels)
    raise AssertionError("could not find a kink-free test case")


def _min_preactivation(model: Model, inputs: np.ndarray) -> float:
    from pfpl.numeric_core import _stack_forward

    margin = np.inf
    acts, pres, h = _stack_forward(model.features, np.asarray(inputs, dtype=float))
    for layer, z in zip(model.features, pres):
        if layer.activation == "relu":
            margin = min(margin, float(np.min(np.abs(z))) if z.size else np.inf)
    return margin


@pytest.fixture
def rng():
    return np.random.default_rng(0)
