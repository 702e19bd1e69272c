"""Benchmark environments: synthetic two-bit correlation-shift data and CMNIST.

Colour correlation is stored as a *match probability*: the chance the colour
bit equals the label.  A reversed correlation such as "-90%" is therefore
0.1.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import Batch, one_hot

DATASET_FORMAT = "hessalign-dataset"
DATASET_VERSION = 1
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class EnvironmentSpec:
    name: str
    n_samples: int
    label_noise: float = 0.25
    color_correlation: float = 0.9
    class_balance: float = 0.5
    seed: int = 0
    input_noise: float = 0.1

    def __post_init__(self):
        if not isinstance(self.n_samples, int) or self.n_samples <= 0:
            raise ValueError(f"{self.name}: n_samples must be a positive integer, got {self.n_samples!r}")
        for f in ("label_noise", "color_correlation", "class_balance"):
            v = getattr(self, f)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{self.name}: {f} must be a probability, got {v!r}")
        if self.input_noise < 0:
            raise ValueError(f"{self.name}: input_noise must be >= 0")


@dataclass
class EnvironmentSet:
    train: list[tuple[str, Batch]]
    test: tuple[str, Batch]
    metadata: dict

    def __post_init__(self):
        batches = [b for _, b in self.train] + [self.test[1]]
        dims = {b.inputs.shape[1] for b in batches}
        classes = {b.num_classes for b in batches}
        if len(dims) != 1 or classes != {2}:
            raise ValueError(f"environments disagree: input dims {dims}, class counts {classes}")

    @property
    def input_dim(self) -> int:
        return self.test[1].inputs.shape[1]

    def train_dict(self) -> dict[str, Batch]:
        return dict(self.train)


def _flip(rng, bits, p):
    return bits ^ (rng.random(len(bits)) < p).astype(np.int64)


def sample_bits(spec: EnvironmentSpec, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw (invariant bit u, label y, colour bit v) for one environment.

    The label is drawn first with P(y=0) = class_balance and the invariant
    bit is its noisy copy; at class_balance 0.5 this is the same joint law
    as drawing u uniformly and flipping it into y.
    """
    n = spec.n_samples
    y = (rng.random(n) >= spec.class_balance).astype(np.int64)
    u = _flip(rng, y, spec.label_noise)
    v = _flip(rng, y, 1.0 - spec.color_correlation)
    return u, y, v


def _synthetic_batch(spec: EnvironmentSpec, seed_offset: int = 0) -> Batch:
    rng = np.random.default_rng([spec.seed, seed_offset])
    u, y, v = sample_bits(spec, rng)
    n = spec.n_samples
    x = np.concatenate([one_hot(u, 2), one_hot(v, 2)], axis=1)
    x = x * (1.0 + rng.normal(0.0, spec.input_noise, size=(n, 4)))
    return Batch(x, one_hot(y, 2))


def generate_synthetic(train: list[EnvironmentSpec], test: EnvironmentSpec, seed_offset: int = 0) -> EnvironmentSet:
    """4-dim inputs ``[onehot(u)(1+eps), onehot(v)(1+eps)]`` per environment.

    Each environment uses its own generator seeded by the pair
    ``(spec.seed, seed_offset)``, so streams never coincide across runs (a
    plain sum would hand run k's second environment the stream of run k+1's
    first).
    """
    if len(train) < 2:
        raise ValueError("need at least 2 training environments")
    names = [s.name for s in train] + [test.name]
    if len(set(names)) != len(names):
        raise ValueError(f"environment names must be unique, got {names}")
    meta = {
        "kind": "synthetic",
        "color_correlation": "probability that the colour bit equals the label",
        "specs": [asdict(s) for s in train + [test]],
        "seed_offset": seed_offset,
    }
    return EnvironmentSet(
        [(s.name, _synthetic_batch(s, seed_offset)) for s in train],
        (test.name, _synthetic_batch(test, seed_offset)),
        meta,
    )


def correlation_shift_specs(n_train: int = 2500, n_test: int = 10000, seed: int = 0):
    return (
        [EnvironmentSpec("env1", n_train, color_correlation=0.9, seed=seed + 1),
         EnvironmentSpec("env2", n_train, color_correlation=0.8, seed=seed + 2)],
        EnvironmentSpec("test", n_test, color_correlation=0.1, seed=seed + 3),
    )


def label_shift_specs(n_train: int = 2500, n_test: int = 10000, seed: int = 0):
    train, test = correlation_shift_specs(n_train, n_test, seed)
    train[0].class_balance = 0.95
    train[1].class_balance = 0.05
    return train, test


# ---------------------------------------------------------------------------
# MNIST IDX


class IdxFormatError(ValueError):
    pass


def _read_idx(path, magic: int, ndims: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated at offset 0, no magic number")
    got = struct.unpack_from(">i", data, 0)[0]
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    header = 4 + 4 * ndims
    if len(data) < header:
        raise IdxFormatError(f"{path}: truncated header, need {header} bytes, file has {len(data)}")
    dims = struct.unpack_from(f">{ndims}i", data, 4)
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise IdxFormatError(f"{path}: truncated at offset {len(data)}, expected {header + size} bytes")
    if len(data) - header > size:
        raise IdxFormatError(f"{path}: {len(data) - header - size} trailing bytes after offset {header + size}")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Parse IDX files into ``(images n x 28 x 28 in [0, 1], labels n)``."""
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if len(images) != len(labels):
        raise IdxFormatError(f"image count {len(images)} != label count {len(labels)}")
    if labels.size and labels.max() > 9:
        raise IdxFormatError(f"label value {int(labels.max())} outside 0-9")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def color_digits(images: np.ndarray, color: np.ndarray) -> np.ndarray:
    """2x2 mean-pool to 14x14, copy into two channels, zero channel ``1 - color``."""
    n = len(images)
    small = images.reshape(n, 14, 2, 14, 2).mean(axis=(2, 4))
    out = np.zeros((n, 2, 14, 14))
    out[np.arange(n), color] = small
    return out.reshape(n, 2 * 14 * 14)


def build_cmnist(digits: np.ndarray, labels: np.ndarray, train: list[EnvironmentSpec], test: EnvironmentSpec, seed_offset: int = 0) -> EnvironmentSet:
    """Partition ``digits`` into disjoint environments of the requested sizes.

    ``n_samples`` of each spec fixes its size; samples are taken in order
    from one seeded permutation so no image is reused.  ``class_balance``
    other than 0.5 subsamples each environment to that class-0 fraction.
    """
    specs = list(train) + [test]
    need = sum(s.n_samples for s in specs)
    rng = np.random.default_rng([specs[0].seed, seed_offset, 1])
    order = rng.permutation(len(digits))
    pool = order
    envs = []
    for s in specs:
        env_rng = np.random.default_rng([s.seed, seed_offset])
        binary = (labels[pool] >= 5).astype(np.int64)
        if s.class_balance == 0.5:
            take = np.arange(min(s.n_samples, len(pool)))
        else:
            n0 = int(round(s.n_samples * s.class_balance))
            i0 = np.flatnonzero(binary == 0)[:n0]
            i1 = np.flatnonzero(binary == 1)[: s.n_samples - n0]
            take = np.sort(np.concatenate([i0, i1]))
        if len(take) < s.n_samples:
            raise ValueError(f"{s.name}: insufficient samples, need {need} in total, {len(take)} left for {s.n_samples}")
        idx = pool[take]
        pool = np.delete(pool, take)
        y = _flip(env_rng, (labels[idx] >= 5).astype(np.int64), s.label_noise)
        color = _flip(env_rng, y, 1.0 - s.color_correlation)
        envs.append((s.name, Batch(color_digits(digits[idx], color), one_hot(y, 2))))
    meta = {
        "kind": "cmnist",
        "color_correlation": "probability that the colour bit equals the label",
        "specs": [asdict(s) for s in specs],
        "seed_offset": seed_offset,
    }
    return EnvironmentSet(envs[:-1], envs[-1], meta)


# ---------------------------------------------------------------------------
# export


def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def environment_set_dict(es: EnvironmentSet) -> dict:
    def env(name, b):
        return {"name": name, "inputs": _arr(b.inputs), "labels": _arr(b.labels)}

    return {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "metadata": es.metadata,
        "train": [env(n, b) for n, b in es.train],
        "test": env(*es.test),
    }


def environment_set_from_dict(d: dict) -> EnvironmentSet:
    if d.get("format") != DATASET_FORMAT or d.get("version") != DATASET_VERSION:
        raise ValueError(f"not a {DATASET_FORMAT} v{DATASET_VERSION} file")

    def arr(e):
        return np.array(e["data"], dtype=np.float64).reshape(e["shape"])

    def env(e):
        return e["name"], Batch(arr(e["inputs"]), arr(e["labels"]))

    return EnvironmentSet([env(e) for e in d["train"]], env(d["test"]), d.get("metadata", {}))


def save_environment_set(path, es: EnvironmentSet, extra: dict | None = None) -> None:
    d = environment_set_dict(es)
    if extra:
        d["provenance"] = extra
    Path(path).write_text(json.dumps(d, sort_keys=True) + "\n")


def load_environment_set(path) -> EnvironmentSet:
    return environment_set_from_dict(json.loads(Path(path).read_text()))
