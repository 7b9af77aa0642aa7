from __future__ import annotations

import numpy as np
import pytest

from geossm import tape as T
from geossm.geometric import GeometricConfig, GeometricSSM
from geossm.mamba import MambaConfig, SelectiveSSM
from geossm.tasks import SequenceBatch, TaskSpec
from geossm.train import (Adam, NonFiniteLossError, TrainConfig, _lr_at, evaluate, loss_and_grad,
                          train)


def small_geometric(seed, radius=0.5):
    model = GeometricSSM(GeometricConfig(m=2, nu_f=2, nu_M=1, nu_r=2, N=5), seed=seed)
    rng = np.random.default_rng(seed + 7)
    p = model.params
    for k in p:
        p[k] = p[k] + 0.3 * rng.normal(size=p[k].shape)
    p["sigma.den"][:] = np.real(np.poly(radius * rng.uniform(-1, 1, 3)))[1:]
    p["sigma_r.den"][:] = np.real(np.poly(radius * rng.uniform(-1, 1, 2)))[1:]
    return model


def small_selective(seed):
    model = SelectiveSSM(MambaConfig(n=3, m=4, N=5), seed=seed)
    rng = np.random.default_rng(seed + 7)
    for k, v in model.params.items():
        model.params[k] = v + 0.3 * rng.normal(size=v.shape)
    return model


def batch_for(seed, B=3, L=16, N=5):
    rng = np.random.default_rng(seed)
    return SequenceBatch(rng.integers(0, N, (B, L)), rng.integers(0, N, B), "x", N)


def finite_difference(model, batch, mode, h=1e-5):
    out = {}
    for k, v in model.params.items():
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + h
            lp, _ = loss_and_grad(model, batch, mode)
            v[idx] = old - h
            lm, _ = loss_and_grad(model, batch, mode)
            v[idx] = old
            g[idx] = (lp - lm) / (2 * h)
        out[k] = g
    return out


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


@pytest.mark.parametrize("mode", ["fft", "recurrent"])
@pytest.mark.parametrize("seed", range(2))
def test_geometric_gradients_match_finite_differences(mode, seed):
    model, batch = small_geometric(seed), batch_for(seed)
    _, grads = loss_and_grad(model, batch, mode)
    num = finite_difference(model, batch, mode)
    for k in grads:
        assert rel_err(grads[k], num[k]) <= 1e-4, k


@pytest.mark.parametrize("seed", range(2))
def test_selective_gradients_match_finite_differences(seed):
    model, batch = small_selective(seed), batch_for(seed)
    _, grads = loss_and_grad(model, batch)
    num = finite_difference(model, batch, None)
    for k in grads:
        assert rel_err(grads[k], num[k]) <= 1e-4, k


def test_fft_and_recurrent_gradients_agree():
    model, batch = small_geometric(3), batch_for(3, L=32)
    _, ga = loss_and_grad(model, batch, "fft")
    _, gb = loss_and_grad(model, batch, "recurrent")
    for k in ga:
        assert np.max(np.abs(ga[k] - gb[k])) < 1e-5, k


def test_zero_model_bias_gradient():
    model = GeometricSSM(GeometricConfig(N=5), seed=0)
    for v in model.params.values():
        v[...] = 0.0
    model.params["bias"][:] = [0.1, -0.2, 0.3, 0.0, 0.5]
    batch = batch_for(1, B=6)
    _, grads = loss_and_grad(model, batch, "fft")
    p = np.exp(model.params["bias"]) / np.exp(model.params["bias"]).sum()
    expect = np.mean(p[None] - np.eye(5)[batch.target], axis=0)
    assert np.allclose(grads["bias"], expect, atol=1e-14)


def test_absent_tokens_have_zero_embedding_gradient():
    model = small_geometric(0)
    batch = SequenceBatch(np.array([[0, 1, 2, 1] * 4]), np.array([1]), "x", 5)
    _, grads = loss_and_grad(model, batch, "fft")
    assert np.all(grads["embeddings"][3:] == 0)
    assert np.any(grads["embeddings"][:3] != 0)


def test_non_finite_loss_names_block():
    model = small_geometric(0)
    model.params["readout"][0, 0] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        loss_and_grad(model, batch_for(0), "fft")
    assert info.value.block == "readout"


def test_tape_retains_only_activations_independent_of_order():
    sizes = []
    for q in (4, 16, 64):
        model = GeometricSSM(GeometricConfig(m=2, nu_f=q // 2, nu_M=q - q // 2), seed=0)
        tape = T.Tape()
        logits, _ = model.graph(tape, np.zeros((2, 128), dtype=int))
        T.softmax_xent(tape, logits, np.zeros(2, dtype=int))
        sizes.append(tape.retained_elements())
    assert len(set(sizes)) == 1


def test_disabled_tape_records_nothing():
    tape = T.Tape(enabled=False)
    small_selective(0).graph(tape, np.zeros((2, 8), dtype=int))
    assert tape.nodes == [] and tape.retained_elements() == 0


# --- Adam ---------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(p, TrainConfig(lr=0.1))
    opt.step(p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"], [1.0, -2.0])


@pytest.mark.parametrize("g", [1e-3, 0.5, -7.0, 300.0])
def test_adam_first_step_magnitude_is_lr(g):
    p = {"w": np.array([0.0])}
    opt = Adam(p, TrainConfig(lr=0.01, clip=None))
    opt.step(p, {"w": np.array([g])})
    assert p["w"][0] == pytest.approx(-0.01 * np.sign(g), rel=1e-4)


def test_adam_clipping_and_shape_check():
    p = {"w": np.zeros(4)}
    opt = Adam(p, TrainConfig(lr=0.01, clip=1.0))
    norm = opt.step(p, {"w": np.full(4, 10.0)})
    assert norm == pytest.approx(20.0)
    assert np.allclose(opt.m["w"], 0.1 * 0.5)
    with pytest.raises(ValueError):
        opt.step(p, {"w": np.zeros(3)})


def test_adam_deterministic():
    runs = []
    for _ in range(2):
        p = {"w": np.linspace(-1, 1, 5)}
        opt = Adam(p, TrainConfig(lr=0.05))
        rng = np.random.default_rng(0)
        for _ in range(10):
            opt.step(p, {"w": rng.normal(size=5)})
        runs.append(p["w"].copy())
    assert np.array_equal(*runs)


def test_lr_schedule():
    cfg = TrainConfig(lr=1.0, steps=100, lr_decay="cosine", warmup=10)
    assert _lr_at(cfg, 0) == pytest.approx(0.1 * 1.0)
    assert _lr_at(cfg, 50) == pytest.approx(0.5)
    assert _lr_at(TrainConfig(lr=0.3), 77) == 0.3
    with pytest.raises(ValueError):
        TrainConfig(lr_decay="step")
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


# --- training loop -------------------------------------------------------------

def test_train_deterministic_and_learns():
    task = TaskSpec("induction_head", N=8, L=16)
    cfg = TrainConfig(steps=60, lr=3e-2, batch=32, seed=4)
    hists = []
    for _ in range(2):
        model = GeometricSSM(GeometricConfig(), seed=4)
        hists.append(train(model, task, cfg, log_every=0))
    assert [r["loss"] for r in hists[0]] == [r["loss"] for r in hists[1]]
    assert np.mean([r["loss"] for r in hists[0][-10:]]) < np.mean([r["loss"] for r in hists[0][:10]])


def test_zero_steps_is_chance():
    task = TaskSpec("induction_head", N=8, L=16)
    model = GeometricSSM(GeometricConfig(), seed=0)
    train(model, task, TrainConfig(steps=0), log_every=0)
    acc = evaluate(model, task, [16, 64], n_samples=2000, seed=1)
    for a in acc.values():
        assert abs(a - 1 / 8) < 0.05


def test_train_eval_hook_and_fixed_dataset():
    data = TaskSpec("induction_head", N=8, L=16).generate(40, 0)
    model = SelectiveSSM(MambaConfig(n=2, m=4), seed=0)
    calls = []
    hist = train(model, None, TrainConfig(steps=4, batch=8, eval_every=2), data=data,
                 eval_fn=lambda m: calls.append(1) or {"acc": 0.0}, log_every=0)
    assert len(calls) == 3 and "acc" in hist[1] and "acc" in hist[-1]


def test_divergence_reports_last_good():
    task = TaskSpec("induction_head", N=8, L=16)
    model = GeometricSSM(GeometricConfig(), seed=0)
    model.params["readout"][0, 0] = np.inf
    with pytest.raises(NonFiniteLossError) as info:
        train(model, task, TrainConfig(steps=3), log_every=0)
    assert info.value.last_good is not None and "readout" in info.value.last_good
