"""Geometric SSM: LTI candidate filter, LTI residual generator, sigmoid gate.

Pipeline for a token sequence:

    u   = embed(tokens)
    y_s = Sigma(u)                      m x m transfer function, order nu_f + nu_M
    r   = Sigma_r(y_s - u)              1 x m transfer function, order nu_r
    s   = sigmoid(r)                    one scalar gate per step
    y(t+1) = y(t) + (y_s(t) - y(t)) s(t),   y(0) = 0
    logits = W y(L) + b                 (or W mean_t y(t) + b)
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tape as T
from .lti import TransferFunction, project_poles, realize_canonical

SIGMA_KEYS = ("sigma.num", "sigma.den", "sigma.D")
SIGMA_R_KEYS = ("sigma_r.num", "sigma_r.den", "sigma_r.D")


@dataclass
class GeometricConfig:
    m: int = 2
    nu_f: int = 2
    nu_M: int = 2
    nu_r: int = 4
    N: int = 8
    n_classes: int | None = None
    readout: str = "last"  # or "mean"
    pad_factor: int = 2
    init_scale: float = 0.1

    def __post_init__(self):
        if self.nu_f + self.nu_M < 1 or self.nu_r < 1:
            raise ValueError("need nu_f + nu_M >= 1 and nu_r >= 1")
        if self.readout not in ("last", "mean"):
            raise ValueError(f"unknown readout {self.readout!r}")
        if self.n_classes is None:
            self.n_classes = self.N

    @property
    def q_sigma(self) -> int:
        return self.nu_f + self.nu_M

    def to_dict(self) -> dict:
        return asdict(self)


def gate_scan(y_s: np.ndarray, s: np.ndarray, y0=None) -> np.ndarray:
    """Convex-combination scan; ``s`` must lie strictly inside (0, 1)."""
    y_s = np.asarray(y_s, dtype=float)
    s = np.asarray(s, dtype=float)
    squeeze = y_s.ndim == 2
    if squeeze:
        y_s, s = y_s[None], s[None]
    if s.ndim == 2:
        s = s[..., None]
    if np.any(s <= 0) or np.any(s >= 1):
        raise ValueError("gate values must lie in the open interval (0, 1)")
    y0 = np.zeros(y_s.shape[-1]) if y0 is None else np.asarray(y0, dtype=float)
    out = T.gate_scan_value(y_s, s, y0)
    return out[0] if squeeze else out


class GeometricSSM:
    kind = "geometric_ssm"

    def __init__(self, config: GeometricConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        self.params = self.init_params(config, seed) if params is None else params

    @staticmethod
    def init_params(cfg: GeometricConfig, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        m, q, qr, c = cfg.m, cfg.q_sigma, cfg.nu_r, cfg.init_scale
        return {
            "sigma.num": c * rng.normal(size=(q, m, m)),
            "sigma.den": np.zeros(q),
            "sigma.D": np.eye(m) + c * rng.normal(size=(m, m)),
            "sigma_r.num": c * rng.normal(size=(qr, 1, m)),
            "sigma_r.den": np.zeros(qr),
            "sigma_r.D": c * rng.normal(size=(1, m)),
            "embeddings": rng.normal(size=(cfg.N, m)),
            "readout": c * rng.normal(size=(cfg.n_classes, m)),
            "bias": np.zeros(cfg.n_classes),
        }

    @property
    def sigma(self) -> TransferFunction:
        return TransferFunction(*(self.params[k] for k in SIGMA_KEYS))

    @property
    def sigma_r(self) -> TransferFunction:
        return TransferFunction(*(self.params[k] for k in SIGMA_R_KEYS))

    def n_params(self, ssm_only: bool = False) -> int:
        keys = SIGMA_KEYS + SIGMA_R_KEYS if ssm_only else self.params
        return int(sum(self.params[k].size for k in keys))

    def project_stable(self, max_radius: float) -> bool:
        """Clip both denominators' poles into the disk; True if anything moved."""
        moved = False
        for key in ("sigma.den", "sigma_r.den"):
            new = project_poles(self.params[key], max_radius)
            if not np.array_equal(new, self.params[key]):
                self.params[key][...] = new
                moved = True
        return moved

    def graph(self, tape: T.Tape, tokens: np.ndarray, mode: str = "fft"):
        """Build the forward pass on ``tape``; returns (logits, trace of Vars)."""
        cfg = self.config
        P = {k: tape.param(v, k) for k, v in self.params.items()}
        u = T.embed(tape, P["embeddings"], tokens)
        if mode == "fft":
            apply = lambda x, keys: T.tf_apply_fft(tape, x, *(P[k] for k in keys), pad_factor=cfg.pad_factor)
        elif mode == "recurrent":
            apply = lambda x, keys: T.tf_apply_recurrent(tape, x, *(P[k] for k in keys))
        else:
            raise ValueError(f"unknown mode {mode!r}")
        y_s = apply(u, SIGMA_KEYS)
        resid = T.sub(tape, y_s, u)
        r = apply(resid, SIGMA_R_KEYS)
        s = T.sigmoid(tape, r)
        y = T.gate_scan(tape, y_s, s, np.zeros(cfg.m))
        feat = T.take_last(tape, y) if cfg.readout == "last" else T.mean_time(tape, y)
        logits = T.linear(tape, feat, P["readout"], P["bias"])
        return logits, {"u": u, "y_s": y_s, "r": r, "s": s, "y": y}

    def forward(self, tokens: np.ndarray, mode: str = "fft") -> tuple[np.ndarray, dict[str, np.ndarray]]:
        logits, trace = self.graph(T.Tape(enabled=False), np.asarray(tokens), mode)
        return logits.value, {k: v.value for k, v in trace.items()}

    def logits(self, tokens: np.ndarray, mode: str = "fft") -> np.ndarray:
        return self.forward(tokens, mode)[0]

    def stream(self) -> "GeometricStream":
        return GeometricStream(self)


class GeometricStream:
    """Token-by-token inference through the canonical state-space realizations.

    State: Sigma states (m * q_sigma), Sigma_r states (nu_r), gate output (m).
    """

    def __init__(self, model: GeometricSSM):
        self.model = model
        self.sys = realize_canonical(model.sigma)
        self.sys_r = realize_canonical(model.sigma_r)
        m = model.config.m
        self.h = np.zeros(self.sys.n_states)
        self.h_r = np.zeros(self.sys_r.n_states)
        self.y = np.zeros(m)
        self._sum = np.zeros(m)
        self._count = 0

    @property
    def state_size(self) -> int:
        return self.h.size + self.h_r.size + self.y.size

    def step(self, token: int) -> np.ndarray:
        p = self.model.params
        u = p["embeddings"][token]
        sys, sr = self.sys, self.sys_r
        y_s = sys.C @ self.h + sys.D @ u
        self.h = sys.A @ self.h + sys.B @ u
        e = y_s - u
        r = sr.C @ self.h_r + sr.D @ e
        self.h_r = sr.A @ self.h_r + sr.B @ e
        s = T.sigmoid_value(r)
        self.y = self.y + (y_s - self.y) * s
        self.last = {"u": u, "y_s": y_s, "r": r, "s": s, "y": self.y}
        self._sum += self.y
        self._count += 1
        feat = self.y if self.model.config.readout == "last" else self._sum / self._count
        return p["readout"] @ feat + p["bias"]
