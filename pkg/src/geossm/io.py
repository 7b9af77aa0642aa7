"""Config and checkpoint files.

Both use one text format: JSON key trees whose array leaves are written as
``{"dtype": ..., "shape": [...], "data": [...]}`` in row-major order. Floats
are emitted with the shortest repr that round-trips, so save -> load -> save
reproduces the file byte for byte.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .geometric import GeometricConfig, GeometricSSM
from .mamba import MambaConfig, SelectiveSSM
from .tasks import TaskSpec
from .train import TrainConfig

FORMAT_VERSION = 1
OUTPUT_ROOT_ENV = "GEOSSM_OUTPUT_ROOT"

MODEL_KINDS = {
    "geometric_ssm": (GeometricSSM, GeometricConfig),
    "selective_ssm": (SelectiveSSM, MambaConfig),
}


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a)
    return {"dtype": str(a.dtype), "shape": list(a.shape), "data": a.reshape(-1).tolist()}


def decode_array(obj: dict) -> np.ndarray:
    return np.array(obj["data"], dtype=obj["dtype"]).reshape(obj["shape"])


def dumps(tree: dict) -> str:
    return json.dumps(tree, indent=1, sort_keys=True, allow_nan=True) + "\n"


def _loads(text: str, source: str, error=ConfigError) -> dict:
    try:
        tree = json.loads(text)
    except json.JSONDecodeError as exc:
        raise error(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(tree, dict):
        raise error(f"{source}: top level must be an object")
    return tree


def _build(cls, tree: dict, where: str):
    if not isinstance(tree, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(tree) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key {where}.{unknown[0]}")
    try:
        return cls(**tree)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


# --- experiment config --------------------------------------------------------

@dataclass
class DataConfig:
    """sMNIST files; ``limit``/``test_limit`` cap how many images are used."""

    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    limit: int | None = None
    test_limit: int | None = None


@dataclass
class ExperimentConfig:
    model_kind: str
    model: GeometricConfig | MambaConfig
    task: TaskSpec
    train: TrainConfig
    output_dir: str = "runs/default"
    data: DataConfig | None = None
    extra: dict = field(default_factory=dict)

    def to_tree(self) -> dict:
        tree = {
            "model": {"kind": self.model_kind, **self.model.to_dict()},
            "task": {f.name: getattr(self.task, f.name) for f in fields(self.task)},
            "train": self.train.to_dict(),
            "output_dir": self.output_dir,
        }
        if self.data is not None:
            tree["data"] = {f.name: getattr(self.data, f.name) for f in fields(self.data)}
        return tree

    @classmethod
    def from_tree(cls, tree: dict) -> "ExperimentConfig":
        unknown = sorted(set(tree) - {"model", "task", "train", "output_dir", "data"})
        if unknown:
            raise ConfigError(f"config: unknown key {unknown[0]}")
        for key in ("model", "task", "train"):
            if key not in tree:
                raise ConfigError(f"config: missing key {key}")
        model = dict(tree["model"])
        kind = model.pop("kind", None)
        if kind not in MODEL_KINDS:
            raise ConfigError(f"model: unknown key model.kind={kind!r} (expected one of {sorted(MODEL_KINDS)})")
        return cls(
            model_kind=kind,
            model=_build(MODEL_KINDS[kind][1], model, "model"),
            task=_build(TaskSpec, tree["task"], "task"),
            train=_build(TrainConfig, tree["train"], "train"),
            output_dir=str(tree.get("output_dir", "runs/default")),
            data=_build(DataConfig, tree["data"], "data") if tree.get("data") is not None else None,
        )

    def resolved_output_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        out = Path(self.output_dir)
        return Path(root) / out if root and not out.is_absolute() else out

    def build_model(self, seed: int | None = None):
        cls = MODEL_KINDS[self.model_kind][0]
        return cls(self.model, seed=self.train.seed if seed is None else seed)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return ExperimentConfig.from_tree(_loads(text, str(path)))


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg.to_tree()))


# --- checkpoints -------------------------------------------------------------

def checkpoint_tree(model, cfg: ExperimentConfig | None, step: int) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "model_kind": model.kind,
        "step": int(step),
        "config": cfg.to_tree() if cfg is not None else {"model": {"kind": model.kind, **model.config.to_dict()}},
        "params": {k: encode_array(v) for k, v in model.params.items()},
    }


def save_checkpoint(path, model, cfg: ExperimentConfig | None = None, step: int = 0) -> None:
    Path(path).write_text(dumps(checkpoint_tree(model, cfg, step)))


def load_checkpoint(path):
    """Returns (model, config tree, step)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    tree = _loads(text, str(path), CheckpointError)
    version = tree.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version!r}, expected {FORMAT_VERSION}")
    kind = tree.get("model_kind")
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    model_cls, cfg_cls = MODEL_KINDS[kind]
    mtree = dict(tree["config"]["model"])
    mtree.pop("kind", None)
    model_cfg = cfg_cls(**mtree)
    params = {k: decode_array(v) for k, v in tree["params"].items()}
    expected = model_cls.init_params(model_cfg, 0)
    if set(params) != set(expected) or any(params[k].shape != expected[k].shape for k in expected):
        raise CheckpointError(f"{path}: parameter blocks do not match a {kind} with this config")
    return model_cls(model_cfg, params), tree["config"], int(tree.get("step", 0))


# --- CSV ---------------------------------------------------------------------

def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return f"{float(x):.6g}"


def write_csv(path, header: list[str], rows: list[list], meta: dict | None = None) -> None:
    """Comma-separated with a header row; ``meta`` goes first as ``# key: json`` lines."""
    buf = io.StringIO()
    for k, v in (meta or {}).items():
        buf.write(f"# {k}: {json.dumps(v, sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(x) if isinstance(x, (int, float, np.number)) else x for x in row])
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> tuple[dict, list[str], list[list[str]]]:
    meta, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            key, _, val = line[2:].partition(": ")
            meta[key] = json.loads(val)
        else:
            body.append(line)
    rows = list(csv.reader(body))
    return meta, rows[0], rows[1:]
