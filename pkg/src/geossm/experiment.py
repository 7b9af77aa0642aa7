"""Train/eval orchestration behind the command line."""
from __future__ import annotations

import logging
from pathlib import Path

from .io import (ConfigError, ExperimentConfig, dumps, load_checkpoint, save_checkpoint,
                 write_csv)
from .tasks import SequenceBatch, TaskSpec, load_mnist_idx
from .train import accuracy, evaluate, train

log = logging.getLogger(__name__)


class TaskMismatchError(ValueError):
    pass


def load_smnist(cfg: ExperimentConfig) -> tuple[SequenceBatch, SequenceBatch]:
    d = cfg.data
    if d is None or not d.images or not d.labels:
        raise ConfigError("data: smnist needs data.images and data.labels")
    train_set = load_mnist_idx(d.images, d.labels, d.limit)
    test_set = load_mnist_idx(d.test_images, d.test_labels, d.test_limit) if d.test_images else None
    return train_set, test_set


def check_compatible(model, task: TaskSpec) -> None:
    cfg = model.config
    if task.kind == "smnist":
        if cfg.N != 256 or cfg.n_classes != 10:
            raise TaskMismatchError(f"smnist needs N=256 and n_classes=10, model has N={cfg.N}, n_classes={cfg.n_classes}")
        return
    if cfg.N != task.N or cfg.n_classes != task.N:
        raise TaskMismatchError(f"task vocabulary N={task.N} but model has N={cfg.N}, n_classes={cfg.n_classes}")


def run_train(cfg: ExperimentConfig, out_dir: Path | None = None, log_every: int = 100) -> dict:
    """Train per ``cfg``; writes config.json, checkpoint.json, metrics.csv (and eval.csv)."""
    out = Path(out_dir) if out_dir is not None else cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    model = cfg.build_model()
    check_compatible(model, cfg.task)
    tc = cfg.train
    mode = tc.mode if model.kind == "geometric_ssm" else "recurrent"
    data = test = None
    if cfg.task.kind == "smnist":
        data, test = load_smnist(cfg)
        eval_fn = (lambda mdl: {"test_acc": accuracy(mdl, test, mode)}) if test is not None else None
        eval_cols = ["test_acc"] if test is not None else []
    else:
        eval_fn = lambda mdl: {f"acc_{L}": a for L, a in
                               evaluate(mdl, cfg.task, tc.eval_lengths, tc.eval_samples, tc.seed, mode).items()}
        eval_cols = [f"acc_{L}" for L in tc.eval_lengths]
    history = train(model, cfg.task, tc, data=data, eval_fn=eval_fn, log_every=log_every)

    meta = {"config": cfg.to_tree(), "seed": tc.seed}
    (out / "config.json").write_text(dumps(cfg.to_tree()))
    save_checkpoint(out / "checkpoint.json", model, cfg, step=tc.steps)
    header = ["step", "loss"] + eval_cols
    write_csv(out / "metrics.csv", header, [[row.get(k, "") for k in header] for row in history], meta)
    final = history[-1] if history else {}
    if cfg.task.kind != "smnist" and tc.eval_lengths:
        write_csv(out / "eval.csv", [str(L) for L in tc.eval_lengths],
                  [[final.get(f"acc_{L}", "") for L in tc.eval_lengths]],
                  {**meta, "models": [model.kind], "samples": tc.eval_samples})
    return {"out_dir": str(out), "final": final, "n_params_ssm": model.n_params(ssm_only=True),
            "n_params": model.n_params()}


def run_eval(checkpoints, lengths, n_samples: int = 2000, seed: int = 0,
             task_override: dict | None = None) -> tuple[list[list[float]], dict]:
    """Accuracy table: one row per checkpoint, one column per length."""
    rows, models, tasks = [], [], []
    for path in checkpoints:
        model, tree, _ = load_checkpoint(path)
        ttree = dict(tree.get("task") or {})
        ttree.update(task_override or {})
        if not ttree:
            raise TaskMismatchError(f"{path}: checkpoint has no task; pass --task")
        task = TaskSpec(**ttree)
        if task.kind not in ("induction_head", "extended_induction_head"):
            raise TaskMismatchError(f"{path}: length sweep needs a synthetic recall task, not {task.kind!r}")
        check_compatible(model, task)
        acc = evaluate(model, task, lengths, n_samples, seed, mode="recurrent")
        rows.append([acc[L] for L in lengths])
        models.append({"path": str(path), "kind": model.kind, "config": tree})
        tasks.append(ttree)
    return rows, {"models": models, "tasks": tasks, "seed": seed, "samples": n_samples}
