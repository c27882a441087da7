import numpy as np
import pytest

from hybridkit import tensor as T


@pytest.fixture(autouse=True)
def extended_precision():
    """Oracle-grade f64 by default; tests that want f32 switch explicitly."""
    T.set_precision("extended")
    yield
    T.set_precision("extended")


def max_rel_err(got: np.ndarray, ref: np.ndarray) -> float:
    """Max |got - ref| normalized by the reference tensor's magnitude."""
    got, ref = np.asarray(got), np.asarray(ref)
    denom = np.abs(ref).max()
    if denom == 0.0:
        return float(np.abs(got - ref).max())
    return float(np.abs(got - ref).max() / denom)
