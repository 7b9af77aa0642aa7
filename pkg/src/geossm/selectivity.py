"""Selective responses from an LTI system via unobservable invariant subspaces.

A blank token excites an A-invariant subspace that C cannot see, so blank
inputs leave no trace in the output. A data token produces a one-step
response and then its state is pushed into that same blank subspace.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lti import StateSpaceSystem, simulate_ss

DATA_VECTOR = np.array([-4.11, 4.58, 0.60])
BLANK_VECTOR = np.array([9.05, -11.34, -0.04])

_EXAMPLE_A = np.array([
    [1.48, 1.14, 0.42],
    [-1.36, -1.04, -0.16],
    [0.01, 0.01, 0.46],
])
_EXAMPLE_C = np.array([[0.1270, 0.0975, 0.9575]])

BLANK, DATA = 0, 1


class IllConditionedDesignError(ValueError):
    pass


@dataclass(frozen=True)
class TokenPairEmbedding:
    data_vector: np.ndarray
    blank_vector: np.ndarray

    @classmethod
    def paper(cls) -> "TokenPairEmbedding":
        return cls(DATA_VECTOR.copy(), BLANK_VECTOR.copy())

    def vector(self, label: int) -> np.ndarray:
        return self.data_vector if label == DATA else self.blank_vector

    def embed(self, labels) -> np.ndarray:
        """(length,) labels -> (length, dim) input vectors."""
        labels = np.asarray(labels)
        return np.where(labels[..., None] == DATA, self.data_vector, self.blank_vector)


def paper_example_system() -> StateSpaceSystem:
    """The three-state example with B = I, printed to two/four decimals."""
    return StateSpaceSystem(_EXAMPLE_A.copy(), np.eye(3), _EXAMPLE_C.copy(), np.zeros((1, 3)))


def _sin_angle(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    cos = np.clip(abs(a @ b) / (na * nb), 0.0, 1.0)
    return float(np.sqrt(1.0 - cos * cos))


def design_selective_system(emb: TokenPairEmbedding, response: float, lam: float,
                            mu: float = 0.0, tol: float = 1e-6) -> StateSpaceSystem:
    """Build (A, B=I, C) that outputs ``response`` one step after a data token.

    In the basis [blank, data, complement]: A maps blank -> lam*blank,
    data -> mu*blank and the orthogonal complement to zero; C is zero on
    blank and on the complement and equals ``response`` on data.
    """
    blank = np.asarray(emb.blank_vector, dtype=float)
    data = np.asarray(emb.data_vector, dtype=float)
    if abs(lam) >= 1:
        raise ValueError("|lam| must be < 1")
    if _sin_angle(blank, data) < tol:
        raise IllConditionedDesignError("blank and data vectors are (nearly) parallel")
    dim = blank.shape[0]
    pair = np.column_stack([blank, data])
    # orthonormal complement of span{blank, data}
    u, _, _ = np.linalg.svd(pair, full_matrices=True)
    basis = np.column_stack([pair, u[:, 2:]])
    images = np.zeros((dim, dim))
    images[:, 0] = lam * blank
    images[:, 1] = mu * blank
    out = np.zeros((1, dim))
    out[0, 1] = response
    inv = np.linalg.inv(basis)
    A = images @ inv
    C = out @ inv
    return StateSpaceSystem(A, np.eye(dim), C, np.zeros((1, dim)))


def gen_selective_copying(length: int, seed: int) -> np.ndarray:
    """Fair, independent blank/data labels (0 = blank, 1 = data)."""
    if length < 1:
        raise ValueError("length must be >= 1")
    return np.random.default_rng(seed).integers(0, 2, size=length)


def run_selective_demo(length: int, seed: int, system: StateSpaceSystem | None = None,
                       emb: TokenPairEmbedding | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Simulate a random blank/data stream; returns (labels, outputs).

    ``outputs[t]`` is y(t), so it should reflect ``labels[t-1]``.
    """
    if length < 2:
        raise ValueError("length must be >= 2")
    system = paper_example_system() if system is None else system
    emb = TokenPairEmbedding.paper() if emb is None else emb
    labels = gen_selective_copying(length, seed)
    y = simulate_ss(system, emb.embed(labels))
    return labels, y[:, 0]


def demo_errors(labels: np.ndarray, outputs: np.ndarray, response: float = 0.5) -> tuple[float, float]:
    """Worst deviation after blank inputs (from 0) and after data inputs (from response)."""
    prev = labels[:-1]
    after = outputs[1:]
    blank_err = np.abs(after[prev == BLANK]).max(initial=0.0)
    data_err = np.abs(after[prev == DATA] - response).max(initial=0.0)
    return float(blank_err), float(data_err)
