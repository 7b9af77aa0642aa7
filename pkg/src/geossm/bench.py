"""Scaling measurements: activation memory and step time of fft-mode training."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tape as T
from .geometric import GeometricConfig, GeometricSSM
from .mamba import MambaConfig, SelectiveSSM
from .tasks import TaskSpec
from .train import Adam, TrainConfig, loss_and_grad


@dataclass
class BenchSpec:
    m: int = 2
    nu_r: int = 4
    batch: int = 8
    seed: int = 0
    repeats: int = 3
    lengths: list[int] = field(default_factory=lambda: [256, 512, 1024, 2048, 4096])
    q_sigma: list[int] = field(default_factory=lambda: [4, 16, 64])
    q_length: int = 1024
    baseline_n: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    baseline_m: int = 16
    baseline_length: int = 128

    def to_dict(self) -> dict:
        return asdict(self)


def loglog_slope(x, y) -> float:
    """Least-squares exponent b in y ~ c * x**b."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def _geometric(spec: BenchSpec, q: int) -> GeometricSSM:
    cfg = GeometricConfig(m=spec.m, nu_f=q - q // 2, nu_M=q // 2, nu_r=spec.nu_r)
    return GeometricSSM(cfg, seed=spec.seed)


def _batch(spec: BenchSpec, L: int):
    return TaskSpec("induction_head", N=8, L=L, placement="center").generate(spec.batch, spec.seed)


def retained_elements(model, batch, mode: str = "fft") -> int:
    tape = T.Tape()
    logits, _ = model.graph(tape, batch.tokens, mode)
    T.softmax_xent(tape, logits, batch.target)
    return tape.retained_elements()


def step_time(model, batch, repeats: int, mode: str | None = "fft") -> float:
    """Best-of-``repeats`` wall time of one forward + backward + Adam update."""
    opt = Adam(model.params, TrainConfig(lr=1e-9))
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        _, grads = loss_and_grad(model, batch, mode)
        opt.step(model.params, grads)
        best = min(best, time.perf_counter() - t0)
    return float(best)


def run_bench(spec: BenchSpec) -> dict:
    q_rows = []
    for q in spec.q_sigma:
        model = _geometric(spec, q)
        batch = _batch(spec, spec.q_length)
        q_rows.append({"q_sigma": q, "retained": retained_elements(model, batch),
                       "seconds": step_time(model, batch, spec.repeats)})
    l_rows = []
    q0 = spec.q_sigma[0] if spec.q_sigma else 4
    for L in spec.lengths:
        model, batch = _geometric(spec, q0), _batch(spec, L)
        l_rows.append({"length": L, "retained": retained_elements(model, batch),
                       "seconds": step_time(model, batch, spec.repeats)})
    n_rows = []
    for n in spec.baseline_n:
        model = SelectiveSSM(MambaConfig(n=n, m=spec.baseline_m), seed=spec.seed)
        batch = _batch(spec, spec.baseline_length)
        n_rows.append({"n": n, "seconds": step_time(model, batch, spec.repeats, None)})

    retained = [r["retained"] for r in q_rows]
    summary = {
        "retained_variation_q": (max(retained) - min(retained)) / max(retained) if retained else 0.0,
        "time_slope_length": loglog_slope(spec.lengths, [r["seconds"] for r in l_rows]) if len(l_rows) > 1 else float("nan"),
        "retained_slope_length": loglog_slope(spec.lengths, [r["retained"] for r in l_rows]) if len(l_rows) > 1 else float("nan"),
        "baseline_time_slope_n": loglog_slope(spec.baseline_n, [r["seconds"] for r in n_rows]) if len(n_rows) > 1 else float("nan"),
    }
    return {"by_q_sigma": q_rows, "by_length": l_rows, "baseline_by_n": n_rows, "summary": summary}
