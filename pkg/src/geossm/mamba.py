"""Selective SSM baseline: the isolated Mamba selection core, run recurrently.

For each channel i of the embedded input u(t) in R^m:

    delta_i(t) = softplus(W_delta[i] . u(t))
    A_t^i = exp(delta_i(t) * abar_i),  B_t^i = (exp(delta_i(t) * abar_i) - 1) / abar_i * (W_B u(t))
    h^i(t+1) = A_t^i h^i(t) + B_t^i u_i(t),   y_i(t) = (W_C u(t)) . h^i(t)

with abar_i = -exp(log_neg_a[i]) diagonal and strictly negative.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tape as T
from .tape import softplus_value

SSM_KEYS = ("log_neg_a", "W_delta", "W_B", "W_C")


def softplus(x):
    return softplus_value(x)


def discretize_zoh(abar: np.ndarray, bbar: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold of a diagonal system: (exp(delta*a), (exp(delta*a) - 1)/a * b)."""
    abar = np.asarray(abar, dtype=float)
    if delta <= 0:
        raise ValueError("sampling step delta must be positive")
    if np.any(abar >= 0):
        raise ValueError("diagonal entries must be negative")
    A = np.exp(delta * abar)
    return A, np.expm1(delta * abar) / abar * np.asarray(bbar, dtype=float)


@dataclass
class MambaConfig:
    n: int = 8
    m: int = 16
    N: int = 8
    n_classes: int | None = None
    readout: str = "last"
    init_scale: float = 0.1

    def __post_init__(self):
        if self.readout not in ("last", "mean"):
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.n_classes is None:
            self.n_classes = self.N

    def to_dict(self) -> dict:
        return asdict(self)


class SelectiveSSM:
    kind = "selective_ssm"

    def __init__(self, config: MambaConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        self.params = self.init_params(config, seed) if params is None else params

    @staticmethod
    def init_params(cfg: MambaConfig, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        m, n = cfg.m, cfg.n
        return {
            # abar_i = -(1, 2, ..., n) for every channel
            "log_neg_a": np.tile(np.log(np.arange(1, n + 1, dtype=float)), (m, 1)),
            "W_delta": rng.normal(size=(m, m)) / np.sqrt(m),
            "W_B": rng.normal(size=(n, m)) / np.sqrt(m),
            "W_C": rng.normal(size=(n, m)) / np.sqrt(m),
            "embeddings": rng.normal(size=(cfg.N, m)),
            "readout": cfg.init_scale * rng.normal(size=(cfg.n_classes, m)),
            "bias": np.zeros(cfg.n_classes),
        }

    @property
    def abar(self) -> np.ndarray:
        return -np.exp(self.params["log_neg_a"])

    def n_params(self, ssm_only: bool = False) -> int:
        keys = SSM_KEYS if ssm_only else self.params
        return int(sum(self.params[k].size for k in keys))

    def selection(self, tokens: np.ndarray) -> dict[str, np.ndarray]:
        """Per-step (delta, Bbar, Cbar); each is a function of u(t) alone."""
        p = self.params
        u = p["embeddings"][np.asarray(tokens)]
        return {"delta": softplus(u @ p["W_delta"].T), "Bbar": u @ p["W_B"].T, "Cbar": u @ p["W_C"].T}

    def graph(self, tape: T.Tape, tokens: np.ndarray, mode: str | None = None):
        # time-varying: always the sequential recurrence; ``mode`` is accepted for
        # interface parity with the LTI model and ignored
        P = {k: tape.param(v, k) for k, v in self.params.items()}
        u = T.embed(tape, P["embeddings"], tokens)
        delta = T.softplus(tape, T.linear(tape, u, P["W_delta"]))
        Bbar = T.linear(tape, u, P["W_B"])
        Cbar = T.linear(tape, u, P["W_C"])
        abar = T.scale(tape, T.exp(tape, P["log_neg_a"]), -1.0)
        y = T.selective_scan(tape, u, delta, Bbar, Cbar, abar)
        feat = T.take_last(tape, y) if self.config.readout == "last" else T.mean_time(tape, y)
        logits = T.linear(tape, feat, P["readout"], P["bias"])
        return logits, {"u": u, "delta": delta, "Bbar": Bbar, "Cbar": Cbar, "y": y}

    def forward(self, tokens: np.ndarray, mode: str | None = None):
        logits, trace = self.graph(T.Tape(enabled=False), np.asarray(tokens), mode)
        return logits.value, {k: v.value for k, v in trace.items()}

    def logits(self, tokens: np.ndarray, mode: str | None = None) -> np.ndarray:
        return self.forward(tokens, mode)[0]
