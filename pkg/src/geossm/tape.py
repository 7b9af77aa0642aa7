"""Reverse-mode differentiation over the fixed set of ops both models use.

A :class:`Tape` records each primitive together with the arrays its backward
pass needs. Only those saved arrays count as retained activations, which is
how the memory footprint of a training step is measured.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.signal import lfilter

from .lti import TransferFunction, _grid_parts, realize_canonical, simulate_ss, truncate_taps


class Var:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var({self.name or '?'}, shape={self.shape})"


@dataclass
class Node:
    kind: str
    out: Var
    inputs: tuple
    backward: Callable
    saved: tuple


class Tape:
    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.nodes: list[Node] = []
        self.params: dict[str, Var] = {}

    def param(self, value, name: str) -> Var:
        v = Var(value, requires_grad=self.enabled, name=name)
        self.params[name] = v
        return v

    def const(self, value, name=None) -> Var:
        return Var(value, name=name)

    def record(self, kind, value, inputs, backward, saved=()) -> Var:
        needs = self.enabled and any(x.requires_grad for x in inputs)
        out = Var(value, requires_grad=needs)
        if needs:
            self.nodes.append(Node(kind, out, tuple(inputs), backward, tuple(saved)))
        return out

    def backward(self, out: Var, seed=None) -> dict[str, np.ndarray]:
        out.grad = np.ones_like(out.value) if seed is None else seed
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for x, gx in zip(node.inputs, grads):
                if gx is None or not x.requires_grad:
                    continue
                x.grad = gx if x.grad is None else x.grad + gx
        return {k: (np.zeros_like(v.value) if v.grad is None else v.grad) for k, v in self.params.items()}

    def retained_elements(self) -> int:
        """Elements held by the tape for the backward sweep (activations only)."""
        return int(sum(np.size(a) for node in self.nodes for a in node.saved))

    def retained_by_kind(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for node in self.nodes:
            out[node.kind] = out.get(node.kind, 0) + int(sum(np.size(a) for a in node.saved))
        return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementary ops ----------------------------------------------------------

def embed(tape: Tape, table: Var, ids: np.ndarray) -> Var:
    ids = np.asarray(ids)
    n = table.value.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"token id out of range [0, {n})")

    def back(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return tape.record("embed", table.value[ids], (table,), back, saved=(ids,))


def linear(tape: Tape, x: Var, W: Var, b: Var | None = None) -> Var:
    """x @ W.T (+ b) over the last axis."""
    out = x.value @ W.value.T
    if b is not None:
        out = out + b.value

    def back(g):
        gx = g @ W.value
        gW = g.reshape(-1, g.shape[-1]).T @ x.value.reshape(-1, x.value.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b is not None else None
        return gx, gW, gb

    inputs = (x, W) if b is None else (x, W, b)
    return tape.record("affine", out, inputs, back, saved=(x.value,))


def sub(tape: Tape, a: Var, b: Var) -> Var:
    sa, sb = np.shape(a.value), np.shape(b.value)
    return tape.record("subtract", a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def scale(tape: Tape, x: Var, c: float) -> Var:
    return tape.record("scale", c * x.value, (x,), lambda g: (c * g,))


def sigmoid_value(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(tape: Tape, x: Var) -> Var:
    s = sigmoid_value(x.value)
    return tape.record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),), saved=(s,))


def softplus_value(x):
    """log(1 + e^x) without overflow; exact asymptote x for x > 30."""
    x = np.asarray(x, dtype=float)
    return np.where(x > 30, x, np.log1p(np.exp(np.minimum(x, 30))))


def softplus(tape: Tape, x: Var) -> Var:
    v = x.value

    def back(g):
        return (g / (1.0 + np.exp(-v)),)

    return tape.record("softplus", softplus_value(v), (x,), back, saved=(v,))


def exp(tape: Tape, x: Var) -> Var:
    e = np.exp(x.value)
    return tape.record("exp", e, (x,), lambda g: (g * e,), saved=(e,))


def take_last(tape: Tape, x: Var) -> Var:
    shape = x.value.shape

    def back(g):
        gx = np.zeros(shape)
        gx[:, -1] = g
        return (gx,)

    return tape.record("take_last", x.value[:, -1], (x,), back)


def mean_time(tape: Tape, x: Var) -> Var:
    shape = x.value.shape

    def back(g):
        return (np.broadcast_to(g[:, None] / shape[1], shape).copy(),)

    return tape.record("mean_time", x.value.mean(axis=1), (x,), back)


def log_softmax_value(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_xent(tape: Tape, logits: Var, target: np.ndarray) -> Var:
    """Mean cross-entropy of ``logits`` (batch, classes) against integer targets."""
    target = np.asarray(target)
    logp = log_softmax_value(logits.value)
    B = logp.shape[0]
    loss = -logp[np.arange(B), target].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(B), target] -= 1.0
        return (g * p / B,)

    return tape.record("softmax_xent", np.asarray(loss), (logits,), back, saved=(logp,))


# --- transfer-function filtering -----------------------------------------------

def _tf_from_vars(num: Var, den: Var, D: Var) -> TransferFunction:
    return TransferFunction(num.value, den.value, D.value)


def tf_apply_fft(tape: Tape, u: Var, num: Var, den: Var, D: Var, pad_factor: int = 2) -> Var:
    """Frequency-domain filtering; backward multiplies by the conjugate grid.

    Only the input spectrum is retained, so memory is O(length * channels)
    whatever the filter order.
    """
    tf = _tf_from_vars(num, den, D)
    B, ell, _ = u.value.shape
    K = pad_factor * ell
    F = K // 2 + 1
    zp, a_k, numz = _grid_parts(tf, K, F)
    Ht = truncate_taps(tf.D + numz / a_k[:, None, None], K, ell)
    U = np.fft.rfft(u.value, n=K, axis=1)
    y = np.fft.irfft(np.einsum("fij,bfj->bfi", Ht, U), n=K, axis=1)[:, :ell]

    def back(g):
        zp, a_k, numz = _grid_parts(_tf_from_vars(num, den, D), K, F)
        Ht = truncate_taps(D.value + numz / a_k[:, None, None], K, ell)
        G = np.fft.rfft(g, n=K, axis=1)
        gu = np.fft.irfft(np.einsum("fij,bfi->bfj", Ht.conj(), G), n=K, axis=1)[:, :ell]
        w = np.full(F, 2.0)
        w[0] = 1.0
        if K % 2 == 0:
            w[-1] = 1.0
        # dL = sum_f Re(P_f dHt_f); pull back through the tap truncation:
        # time-domain gradient on the kept taps, then onto the grid values H_f
        P = np.einsum("bfi,bfj->fij", G.conj(), U) * (w / K)[:, None, None]
        c = np.fft.fft(P, n=K, axis=0).real
        c[ell:] = 0.0
        P = np.fft.rfft(c, n=K, axis=0).conj() * (w / K)[:, None, None]
        gD = P.sum(axis=0).real
        Pa = P / a_k[:, None, None]
        gnum = np.einsum("fj,fab->jab", zp, Pa).real
        gden = -np.einsum("fj,f->j", zp, np.einsum("fab,fab->f", Pa, numz) / a_k).real
        return gu, gnum, gden, gD

    return tape.record("freq_multiply", y, (u, num, den, D), back, saved=(U,))


def _allpole(x: np.ndarray, den: np.ndarray, reverse: bool = False) -> np.ndarray:
    a = np.concatenate([[1.0], den])
    if reverse:
        return lfilter([1.0], a, x[:, ::-1], axis=1)[:, ::-1]
    return lfilter([1.0], a, x, axis=1)


def tf_apply_recurrent(tape: Tape, u: Var, num: Var, den: Var, D: Var) -> Var:
    """State-space filtering through the canonical realization (exact, no aliasing).

    The backward pass uses the equivalent split H = D + N(z) * (1/a(z)): the
    all-pole part is run anti-causally for the adjoint.
    """
    tf = _tf_from_vars(num, den, D)
    y = simulate_ss(realize_canonical(tf), u.value)
    q = tf.order

    def back(g):
        x = u.value
        ell = x.shape[1]
        w = _allpole(x, den.value)
        gD = np.einsum("bti,btj->ij", g, x)
        gnum = np.zeros_like(num.value)
        gw = np.zeros_like(w)
        for j in range(1, q + 1):
            if j >= ell:
                break
            gnum[j - 1] = np.einsum("bti,btj->ij", g[:, j:], w[:, :-j])
            gw[:, :-j] += g[:, j:] @ num.value[j - 1]
        lam = _allpole(gw, den.value, reverse=True)
        gden = np.array([-np.sum(lam[:, k:] * w[:, :-k]) if k < ell else 0.0 for k in range(1, q + 1)])
        gu = g @ D.value + lam
        return gu, gnum, gden, gD

    return tape.record("state_space", y, (u, num, den, D), back, saved=(u.value,))


# --- scans -------------------------------------------------------------------

def gate_scan_value(ys: np.ndarray, s: np.ndarray, y0: np.ndarray) -> np.ndarray:
    """y(t+1) = y(t) + (ys(t) - y(t)) s(t); returns y(1..length)."""
    B, ell, m = ys.shape
    out = np.empty((B, ell, m))
    y = np.broadcast_to(y0, (B, m)).astype(float)
    for t in range(ell):
        y = y + (ys[:, t] - y) * s[:, t]
        out[:, t] = y
    return out


def gate_scan(tape: Tape, ys: Var, s: Var, y0: np.ndarray) -> Var:
    Y = gate_scan_value(ys.value, s.value, y0)
    B, ell, m = Y.shape
    y0b = np.broadcast_to(y0, (B, m))

    def back(g):
        sv, yv = s.value, ys.value
        gys = np.empty_like(yv)
        gs = np.empty_like(sv)
        carry = np.zeros((B, m))
        for t in range(ell - 1, -1, -1):
            a = g[:, t] + carry
            prev = Y[:, t - 1] if t else y0b
            gys[:, t] = a * sv[:, t]
            gs[:, t] = np.sum(a * (yv[:, t] - prev), axis=-1, keepdims=True) \
                if sv.shape[-1] == 1 else a * (yv[:, t] - prev)
            carry = a * (1.0 - sv[:, t])
        return gys, gs

    return tape.record("gate_scan", Y, (ys, s), back, saved=(Y,))


def selective_scan(tape: Tape, u: Var, delta: Var, Bbar: Var, Cbar: Var, abar: Var):
    """m parallel SISO recursions with ZOH-discretized, input-dependent (A_t, B_t).

    Shapes: u, delta (batch, length, m); Bbar, Cbar (batch, length, n);
    abar (m, n), negative. Output y_i(t) = C_t h^i(t) uses the state before
    the update at t. The full state trajectory is retained for backward.
    """
    uv, dv, bv, cv, av = u.value, delta.value, Bbar.value, Cbar.value, abar.value
    Bsz, ell, m = uv.shape
    n = av.shape[1]
    keep = tape.enabled and any(x.requires_grad for x in (u, delta, Bbar, Cbar, abar))
    Hs = np.empty((Bsz, ell, m, n)) if keep else None
    y = np.empty((Bsz, ell, m))
    h = np.zeros((Bsz, m, n))
    for t in range(ell):
        if keep:
            Hs[:, t] = h
        y[:, t] = np.einsum("bk,bik->bi", cv[:, t], h)
        dA = np.exp(dv[:, t, :, None] * av)
        phi = (dA - 1.0) / av
        h = dA * h + phi * bv[:, t, None, :] * uv[:, t, :, None]

    def back(g):
        gu = np.zeros_like(uv)
        gd = np.zeros_like(dv)
        gb = np.zeros_like(bv)
        gc = np.zeros_like(cv)
        ga = np.zeros_like(av)
        carry = np.zeros((Bsz, m, n))
        for t in range(ell - 1, -1, -1):
            h = Hs[:, t]
            d = dv[:, t, :, None]
            dA = np.exp(d * av)
            phi = (dA - 1.0) / av
            bu = bv[:, t, None, :] * uv[:, t, :, None]
            gc[:, t] = np.einsum("bi,bik->bk", g[:, t], h)
            g_dA = carry * h
            g_phi = carry * bu
            gb[:, t] = np.einsum("bik,bik,bi->bk", carry, phi, uv[:, t])
            gu[:, t] = np.einsum("bik,bik,bk->bi", carry, phi, bv[:, t])
            # d phi/d delta = dA ; d phi/d a = (delta dA - phi) / a
            gdelta = g_dA * dA * av + g_phi * dA
            gd[:, t] = gdelta.sum(axis=-1)
            ga += np.sum(g_dA * dA * d + g_phi * (d * dA - phi) / av, axis=0)
            carry = carry * dA + g[:, t][:, :, None] * cv[:, t, None, :]
        return gu, gd, gb, gc, ga

    return tape.record("selective_scan", y, (u, delta, Bbar, Cbar, abar), back,
                       saved=(Hs, uv, dv, bv, cv))
