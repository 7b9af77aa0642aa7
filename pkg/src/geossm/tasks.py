"""Synthetic recall tasks and the sequential-MNIST pixel stream.

All generators are pure functions of their arguments and seed.
"""
from __future__ import annotations

import gzip
import importlib.util
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MAX_RESAMPLE = 1000
# the fixed extended-task trigger is drawn from this seed, never the batch seed
TRIGGER_PATTERN_SEED = 20250101

_MASK64 = (1 << 64) - 1
PLACEMENTS = ("random", "center")


class GenerationError(RuntimeError):
    pass


class IdxFormatError(ValueError):
    pass


def derive_seed(seed: int, index: int) -> int:
    """splitmix64 finalizer over (seed, index); used for per-batch seeds."""
    z = (seed * 0x9E3779B97F4A7C15 + (index + 1) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) >> 1


@dataclass
class SequenceBatch:
    tokens: np.ndarray
    target: np.ndarray
    kind: str
    vocab: int
    n_trig: int = 1
    trigger: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]


@dataclass
class TaskSpec:
    kind: str = "induction_head"
    N: int = 8
    L: int = 16
    n_trig: int = 1
    seed: int = 0
    random_trigger: bool = False
    placement: str = "random"

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")
        if self.kind not in ("induction_head", "extended_induction_head", "smnist", "selective_copying"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "extended_induction_head" and self.L < 2 * self.n_trig + 2:
            raise ValueError("extended task needs L >= 2 * n_trig + 2")

    def generate(self, batch: int, seed: int, L: int | None = None, placement: str | None = None) -> SequenceBatch:
        L = self.L if L is None else L
        placement = self.placement if placement is None else placement
        if self.kind == "induction_head":
            return gen_induction_head(self.N, L, batch, seed, placement)
        if self.kind == "extended_induction_head":
            return gen_extended_ih(self.N, L, self.n_trig, batch, seed,
                                   random_trigger=self.random_trigger, placement=placement)
        raise ValueError(f"task {self.kind!r} has no online generator")


def _first_ends(rng, batch: int, L: int, n_trig: int, placement: str) -> np.ndarray:
    """Index of the last token of the first trigger occurrence, per sample.

    "center": L//2 - 1 for every sample. "random": uniform over every position
    that leaves room for the trigger, the target, and a disjoint final trigger.
    """
    if placement == "center":
        return np.full(batch, L // 2 - 1)
    return rng.integers(n_trig - 1, L - n_trig - 1, size=batch)


def gen_induction_head(N: int, L: int, batch: int, seed: int, placement: str = "center") -> SequenceBatch:
    """Trigger N-1 in the middle and at L - 1; target is the token after the first.

    Fillers are uniform over [0, N-1). With ``placement="center"`` the first
    trigger sits at L//2 - 1.
    """
    if N < 3 or L < 4 or batch < 1:
        raise ValueError(f"invalid induction-head dims N={N}, L={L}, batch={batch}")
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, N - 1, size=(batch, L))
    ends = _first_ends(rng, batch, L, 1, placement)
    rows = np.arange(batch)
    trig = N - 1
    tokens[rows, ends] = trig
    tokens[:, L - 1] = trig
    return SequenceBatch(tokens, tokens[rows, ends + 1].copy(), "induction_head", N, 1,
                         trigger=np.array([trig]), meta={"first_end": ends})


def default_trigger(N: int, n_trig: int) -> np.ndarray:
    return np.random.default_rng([TRIGGER_PATTERN_SEED, N, n_trig]).integers(0, N, size=n_trig)


def count_occurrences(tokens: np.ndarray, pattern: np.ndarray) -> np.ndarray:
    """Contiguous occurrences of ``pattern`` in each row (per-row patterns allowed)."""
    tokens = np.atleast_2d(tokens)
    pattern = np.asarray(pattern)
    k = pattern.shape[-1]
    if tokens.shape[1] < k:
        return np.zeros(tokens.shape[0], dtype=int)
    windows = np.lib.stride_tricks.sliding_window_view(tokens, k, axis=1)
    pat = pattern[:, None, :] if pattern.ndim == 2 else pattern
    return np.all(windows == pat, axis=-1).sum(axis=1)


def gen_extended_ih(N: int, L: int, n_trig: int, batch: int, seed: int,
                    trigger: np.ndarray | None = None, random_trigger: bool = False,
                    placement: str = "center") -> SequenceBatch:
    """Multi-token trigger in the middle and ending at L - 1, occurring nowhere else.

    By default the trigger is one fixed pattern for the whole task (see
    ``default_trigger``); ``random_trigger`` draws a fresh pattern per sample.
    Filler rows are redrawn until the pattern occurs exactly twice.
    """
    if N < 2 or n_trig < 1 or L < 2 * n_trig + 2 or batch < 1:
        raise ValueError(f"invalid extended-task dims N={N}, L={L}, n_trig={n_trig}")
    rng = np.random.default_rng(seed)
    if random_trigger:
        pats = rng.integers(0, N, size=(batch, n_trig))
    else:
        base = default_trigger(N, n_trig) if trigger is None else np.asarray(trigger)
        if base.shape != (n_trig,):
            raise ValueError("trigger length must equal n_trig")
        pats = np.broadcast_to(base, (batch, n_trig))
    ends = _first_ends(rng, batch, L, n_trig, placement)
    first = ends[:, None] + np.arange(1 - n_trig, 1)
    last = slice(L - n_trig, L)
    tokens = np.empty((batch, L), dtype=np.int64)
    todo = np.arange(batch)
    for _ in range(MAX_RESAMPLE):
        rows = rng.integers(0, N, size=(todo.size, L))
        np.put_along_axis(rows, first[todo], pats[todo], axis=1)
        rows[:, last] = pats[todo]
        tokens[todo] = rows
        ok = count_occurrences(rows, pats[todo]) == 2
        todo = todo[~ok]
        if todo.size == 0:
            break
    else:
        raise GenerationError(f"could not place trigger exactly twice after {MAX_RESAMPLE} attempts "
                              f"(N={N}, L={L}, n_trig={n_trig})")
    return SequenceBatch(tokens, tokens[np.arange(batch), ends + 1].copy(), "extended_induction_head", N, n_trig,
                         trigger=None if random_trigger else np.asarray(pats[0]).copy(),
                         meta={"first_end": ends})


def check_induction_structure(batch: SequenceBatch) -> bool:
    """Positions/target validator shared by both recall tasks."""
    toks, L, k = batch.tokens, batch.length, batch.n_trig
    ends = batch.meta.get("first_end", np.full(len(batch), L // 2 - 1))
    rows = np.arange(len(batch))
    if not np.array_equal(batch.target, toks[rows, ends + 1]):
        return False
    first = np.take_along_axis(toks, ends[:, None] + np.arange(1 - k, 1), axis=1)
    if not np.array_equal(first, toks[:, L - k:]):
        return False
    return bool(np.all(count_occurrences(toks, toks[:, L - k:]) == 2))


# --- IDX files -------------------------------------------------------------

def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file into an array with its declared dims."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != 0x08:
        raise IdxFormatError(f"{path}: bad magic 0x{int.from_bytes(raw[:4], 'big'):08x}")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) - head < count:
        raise IdxFormatError(f"{path}: truncated data ({len(raw) - head} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def idx_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise IdxFormatError("only unsigned-byte IDX is supported")
    header = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def write_idx(path, arr: np.ndarray) -> None:
    data = idx_bytes(arr)
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as fh:
            fh.write(data)
    else:
        path.write_bytes(data)


def load_mnist_idx(images_path, labels_path, limit: int | None = None) -> SequenceBatch:
    """Images become raster-order pixel sequences (vocab 256); labels are targets."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected 3 dims (magic 0x{IDX_IMAGES_MAGIC:08x})")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected 1 dim (magic 0x{IDX_LABELS_MAGIC:08x})")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= 10:
        raise IdxFormatError("labels must lie in [0, 10)")
    n = images.shape[0] if limit is None else min(limit, images.shape[0])
    tokens = images[:n].reshape(n, -1).astype(np.int64)
    return SequenceBatch(tokens, labels[:n].astype(np.int64), "smnist", 256,
                         meta={"n_classes": 10, "image_shape": images.shape[1:]})


def iter_batches(data: SequenceBatch, batch: int, seed: int, shuffle: bool = True) -> Iterator[SequenceBatch]:
    """Endless minibatch stream over a fixed dataset, reshuffled each epoch."""
    rng = np.random.default_rng(seed)
    n = len(data)
    while True:
        order = rng.permutation(n) if shuffle else np.arange(n)
        for i in range(0, n - batch + 1 if n >= batch else 1, batch):
            idx = order[i:i + batch]
            yield SequenceBatch(data.tokens[idx], data.target[idx], data.kind, data.vocab, meta=data.meta)


def subset(data: SequenceBatch, idx) -> SequenceBatch:
    return SequenceBatch(data.tokens[idx], data.target[idx], data.kind, data.vocab, data.n_trig,
                         data.trigger, dict(data.meta))


# --- text dump ---------------------------------------------------------------

def format_batch(batch: SequenceBatch) -> str:
    """One sequence per line: space-separated ids, then ``-> target``."""
    lines = [" ".join(map(str, row)) + f" -> {t}" for row, t in zip(batch.tokens, batch.target)]
    return "\n".join(lines) + "\n"


def parse_batch(text: str, kind: str = "unknown", vocab: int = 0) -> SequenceBatch:
    rows, targets = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        seq, sep, tgt = line.partition("->")
        if not sep:
            raise ValueError(f"line {lineno}: missing '-> target'")
        rows.append([int(x) for x in seq.split()])
        targets.append(int(tgt))
    tokens = np.array(rows, dtype=np.int64)
    return SequenceBatch(tokens, np.array(targets, dtype=np.int64), kind,
                         vocab or int(tokens.max()) + 1)


MNIST_SAMPLE_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                      "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def mnist_sample_csv() -> Path:
    """Location of the 5000-image MNIST sample bundled with the ``mlxtend`` wheel.

    Only the data file is used; the package itself is never imported.
    """
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or spec.origin is None:
        raise FileNotFoundError("MNIST sample needs the optional 'mlxtend' package (pip install mlxtend --no-deps)")
    path = Path(spec.origin).parent / "data" / "data" / "mnist_5k.csv.gz"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing from the installed mlxtend")
    return path


def export_mnist_sample(out_dir, n_test: int = 1000, seed: int = 0) -> dict[str, Path]:
    """Write the bundled MNIST sample as shuffled train/test IDX files under ``out_dir``."""
    raw = np.loadtxt(mnist_sample_csv(), delimiter=",", dtype=np.int64)
    order = np.random.default_rng(seed).permutation(raw.shape[0])
    images = raw[order, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = raw[order, -1].astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in MNIST_SAMPLE_FILES}
    split = images.shape[0] - n_test
    write_idx(paths[MNIST_SAMPLE_FILES[0]], images[:split])
    write_idx(paths[MNIST_SAMPLE_FILES[1]], labels[:split])
    write_idx(paths[MNIST_SAMPLE_FILES[2]], images[split:])
    write_idx(paths[MNIST_SAMPLE_FILES[3]], labels[split:])
    return paths
