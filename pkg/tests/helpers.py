"""Small builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from obmerge.tensor_store import Checkpoint, Tensor
from obmerge.task_vectors import TaskVector, manifest_fingerprint


def make_checkpoint(arrays: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> Checkpoint:
    return Checkpoint(
        [Tensor(name, np.asarray(data, dtype=np.float32)) for name, data in arrays.items()],
        metadata=metadata,
    )


def make_delta(arrays: dict[str, np.ndarray], fingerprint: str = "fp") -> TaskVector:
    return TaskVector(fingerprint, {k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()})


def random_checkpoint(rng: np.random.Generator, n_tensors: int = 3, max_dim: int = 8) -> Checkpoint:
    tensors = []
    for index in range(n_tensors):
        ndim = int(rng.integers(0, 3))
        shape = tuple(int(rng.integers(0, max_dim + 1)) for _ in range(ndim))
        data = rng.standard_normal(shape).astype(np.float32)
        tensors.append(Tensor(f"t{index:02d}", data))
    metadata = {f"k{i}": f"v{i}" for i in range(int(rng.integers(0, 3)))}
    return Checkpoint(tensors, metadata=metadata)


def fingerprint_of(arrays: dict[str, np.ndarray]) -> str:
    return manifest_fingerprint(make_checkpoint(arrays))
