"""Discrete-time LTI systems: state-space recursion and rational transfer functions.

Signals are arrays shaped ``(batch, length, channels)``; a 2-D ``(length,
channels)`` array is accepted wherever a single trajectory makes sense.

Transfer functions use a common monic denominator shared by every entry::

    H(z) = D + (N_1 z^-1 + ... + N_q z^-q) / (1 + a_1 z^-1 + ... + a_q z^-q)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SINGULAR_TOL = 1e-12


class DimensionError(ValueError):
    """Input shapes are inconsistent with the system dimensions."""


class SingularGridError(ValueError):
    """The denominator vanishes (numerically) at a point of the FFT grid."""


def _fit(x, shape, name) -> np.ndarray:
    # vectors may stand in for single-row/column matrices; 2-d shapes must match
    x = np.asarray(x, dtype=float)
    if x.size != int(np.prod(shape)) or (x.ndim == 2 and x.size and x.shape != shape) or x.ndim > 2:
        raise DimensionError(f"{name} has shape {x.shape}, expected {shape}")
    return x.reshape(shape)


@dataclass
class StateSpaceSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        p_out, p_in = self.D.shape
        n = self.A.shape[0] if self.A.size else 0
        self.A = _fit(self.A, (n, n), "A")
        self.B = _fit(self.B, (n, p_in), "B")
        self.C = _fit(self.C, (p_out, n), "C")

    @property
    def n_states(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.D.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.D.shape[0]

    def spectral_radius(self) -> float:
        if self.n_states == 0:
            return 0.0
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))


@dataclass
class TransferFunction:
    """MIMO rational transfer function with a shared monic denominator.

    ``num`` has shape ``(q, p_out, p_in)`` (coefficient of z^-1 first),
    ``den`` has shape ``(q,)`` and holds a_1..a_q, ``D`` is the feedthrough.
    """

    num: np.ndarray
    den: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        self.den = np.asarray(self.den, dtype=float).reshape(-1)
        q = self.den.shape[0]
        self.num = np.asarray(self.num, dtype=float).reshape(q, *self.D.shape)

    @property
    def order(self) -> int:
        return self.den.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.D.shape

    def n_params(self) -> int:
        p_out, p_in = self.D.shape
        return p_out * p_in * self.order + self.order + p_out * p_in

    @classmethod
    def zeros(cls, p_out: int, p_in: int, q: int) -> "TransferFunction":
        return cls(np.zeros((q, p_out, p_in)), np.zeros(q), np.zeros((p_out, p_in)))

    @classmethod
    def random_stable(cls, rng: np.random.Generator, p_out: int, p_in: int, q: int,
                      radius: float = 0.8) -> "TransferFunction":
        """Random tf whose poles all lie in a disk of the given radius."""
        poles = []
        while len(poles) < q:
            if q - len(poles) >= 2 and rng.random() < 0.5:
                z = radius * np.sqrt(rng.random()) * np.exp(1j * np.pi * rng.random())
                poles += [z, np.conj(z)]
            else:
                poles.append(radius * rng.uniform(-1.0, 1.0))
        den = np.real(np.poly(poles))[1:] if q else np.zeros(0)
        return cls(rng.normal(size=(q, p_out, p_in)), den, rng.normal(size=(p_out, p_in)))


def project_poles(den: np.ndarray, max_radius: float) -> np.ndarray:
    """Monic denominator with every root of modulus above ``max_radius`` pulled radially onto it."""
    den = np.asarray(den, dtype=float)
    if den.size == 0:
        return den.copy()
    roots = np.roots(np.r_[1.0, den])
    mag = np.abs(roots)
    # slack keeps a second projection from moving roots already on the circle
    outside = mag > max_radius * (1 + 1e-9)
    if not np.any(outside):
        return den.copy()
    roots = np.where(outside, roots / np.maximum(mag, 1e-300) * max_radius, roots)
    return np.real(np.poly(roots))[1:]


def _as_batch(u: np.ndarray) -> tuple[np.ndarray, bool]:
    u = np.asarray(u, dtype=float)
    if u.ndim == 2:
        return u[None], True
    if u.ndim != 3:
        raise DimensionError(f"signal must be (batch, length, channels), got shape {u.shape}")
    return u, False


def simulate_ss(sys: StateSpaceSystem, u: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """Run h(t+1) = A h(t) + B u(t), y(t) = C h(t) + D u(t) from h(0) = h0."""
    ub, squeeze = _as_batch(u)
    if ub.shape[2] != sys.n_inputs:
        raise DimensionError(f"input has {ub.shape[2]} channels, system expects {sys.n_inputs}")
    n = sys.n_states
    if h0 is None:
        h = np.zeros((ub.shape[0], n))
    else:
        h0 = np.asarray(h0, dtype=float)
        if h0.shape[-1] != n:
            raise DimensionError(f"initial state has length {h0.shape[-1]}, system has {n} states")
        h = np.broadcast_to(h0, (ub.shape[0], n)).copy()
    y = ub @ sys.D.T
    if n:
        AT, BT, CT = sys.A.T, sys.B.T, sys.C.T
        for t in range(ub.shape[1]):
            y[:, t] += h @ CT
            h = h @ AT + ub[:, t] @ BT
    return y[0] if squeeze else y


def impulse_response(tf: TransferFunction, L: int) -> np.ndarray:
    """First ``L`` Markov parameters of ``tf`` as an ``(L, p_out, p_in)`` array."""
    if L < 1:
        raise ValueError("L must be positive")
    q = tf.order
    h = np.zeros((L, *tf.shape))
    for t in range(1, L):
        acc = tf.num[t - 1].copy() if t <= q else np.zeros(tf.shape)
        for k in range(1, min(q, t - 1) + 1):
            acc -= tf.den[k - 1] * h[t - k]
        h[t] = acc
    h[0] = tf.D
    return h


def grid_powers(K: int, q: int, n_freq: int | None = None) -> np.ndarray:
    """z_k^-j for z_k = exp(2 pi i k / K); rows k < n_freq, columns j = 1..q."""
    k = np.arange(K if n_freq is None else n_freq)
    j = np.arange(1, q + 1)
    return np.exp(-2j * np.pi * np.outer(k, j) / K)


def _grid_parts(tf: TransferFunction, K: int, n_freq: int | None = None):
    zp = grid_powers(K, tf.order, n_freq)
    den = 1.0 + zp @ tf.den
    if np.min(np.abs(den)) < SINGULAR_TOL:
        k = int(np.argmin(np.abs(den)))
        raise SingularGridError(f"denominator vanishes at grid point k={k} of K={K}")
    numz = np.tensordot(zp, tf.num, axes=(1, 0))
    return zp, den, numz


def tf_eval_grid(tf: TransferFunction, K: int) -> np.ndarray:
    """H(z_k) at z_k = exp(2 pi i k / K), i.e. the DFT grid e^{-2 pi i k/K} in z^-1."""
    if K < 1:
        raise ValueError("K must be positive")
    _, den, numz = _grid_parts(tf, K)
    return tf.D + numz / den[:, None, None]


def truncate_taps(H: np.ndarray, K: int, ell: int) -> np.ndarray:
    """Half-spectrum of the K-aliased impulse response with taps >= ell zeroed.

    Multiplying a zero-padded length-``ell`` signal by this spectrum is an
    exact linear convolution (no circular wrap) as long as K >= 2 * ell.
    """
    h = np.fft.irfft(H, n=K, axis=0)
    h[ell:] = 0.0
    return np.fft.rfft(h, n=K, axis=0)


def fft_apply(tf: TransferFunction, u: np.ndarray, pad_factor: int = 2) -> np.ndarray:
    """Filter ``u`` through ``tf`` by frequency-domain multiplication.

    The input is zero-padded to ``K = pad_factor * length``. The result is the
    linear convolution of ``u`` with the K-aliased impulse response
    h_K(j) = sum_i h(j + iK), so the only error against exact filtering is the
    impulse-response tail beyond K.
    """
    if pad_factor < 2:
        raise ValueError("pad_factor must be at least 2")
    ub, squeeze = _as_batch(u)
    p_out, p_in = tf.shape
    if ub.shape[2] != p_in:
        raise DimensionError(f"input has {ub.shape[2]} channels, tf expects {p_in}")
    ell = ub.shape[1]
    K = pad_factor * ell
    n_freq = K // 2 + 1
    _, den, numz = _grid_parts(tf, K, n_freq)
    H = truncate_taps(tf.D + numz / den[:, None, None], K, ell)
    U = np.fft.rfft(ub, n=K, axis=1)
    Y = np.einsum("fij,bfj->bfi", H, U)
    y = np.fft.irfft(Y, n=K, axis=1)[:, :ell]
    return y[0] if squeeze else y


def realize_ccf(tf: TransferFunction) -> StateSpaceSystem:
    """Block controllable canonical realization with p_in * q states."""
    p_out, p_in = tf.shape
    q = tf.order
    n = p_in * q
    A = np.zeros((n, n))
    B = np.zeros((n, p_in))
    if q:
        eye = np.eye(p_in)
        A[:p_in] = np.hstack([-a * eye for a in tf.den])
        A[p_in:, :-p_in] = np.eye(n - p_in)
        B[:p_in] = eye
    C = np.hstack(list(tf.num)) if q else np.zeros((p_out, 0))
    return StateSpaceSystem(A, B, C, tf.D.copy())


def realize_ocf(tf: TransferFunction) -> StateSpaceSystem:
    """Block observable canonical realization with p_out * q states."""
    p_out, p_in = tf.shape
    q = tf.order
    n = p_out * q
    A = np.zeros((n, n))
    if q:
        eye = np.eye(p_out)
        A[:, :p_out] = np.vstack([-a * eye for a in tf.den])
        A[:-p_out, p_out:] = np.eye(n - p_out)
    B = np.vstack(list(tf.num)) if q else np.zeros((0, p_in))
    C = np.zeros((p_out, n))
    C[:, :p_out] = np.eye(p_out) if q else 0.0
    return StateSpaceSystem(A, B, C, tf.D.copy())


def realize_canonical(tf: TransferFunction) -> StateSpaceSystem:
    """Whichever canonical form has fewer states (controllable on ties)."""
    p_out, p_in = tf.shape
    return realize_ccf(tf) if p_in <= p_out else realize_ocf(tf)


def compose_series(g: StateSpaceSystem, f: StateSpaceSystem) -> StateSpaceSystem:
    """Cascade u -> f -> g; the composite state is [h_f, h_g]."""
    if f.n_outputs != g.n_inputs:
        raise DimensionError(f"f has {f.n_outputs} outputs but g takes {g.n_inputs} inputs")
    nf, ng = f.n_states, g.n_states
    A = np.zeros((nf + ng, nf + ng))
    A[:nf, :nf] = f.A
    A[nf:, :nf] = g.B @ f.C
    A[nf:, nf:] = g.A
    B = np.vstack([f.B, g.B @ f.D])
    C = np.hstack([g.D @ f.C, g.C])
    return StateSpaceSystem(A, B, C, g.D @ f.D)


def ss_eval(sys: StateSpaceSystem, z: complex) -> np.ndarray:
    """C (zI - A)^-1 B + D at a single complex point."""
    n = sys.n_states
    if n == 0:
        return sys.D.astype(complex)
    return sys.C @ np.linalg.solve(z * np.eye(n) - sys.A, sys.B) + sys.D
