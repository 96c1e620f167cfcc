"""Dataset containers, texmex vector files, synthetic data, and the exact oracle."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from ..errors import DatasetError, DimensionMismatchError
from ..hnsw import sq_l2_rows

PathLike = Union[str, os.PathLike]


@dataclass
class Dataset:
    base: np.ndarray
    queries: np.ndarray
    ground_truth: Optional[np.ndarray] = None
    name: str = "dataset"

    def __post_init__(self) -> None:
        self.base = np.ascontiguousarray(self.base, dtype=np.float32)
        self.queries = np.ascontiguousarray(self.queries, dtype=np.float32)
        if self.base.ndim != 2 or self.queries.ndim != 2:
            raise DatasetError("base and query sets must be 2-d arrays")
        if self.base.shape[1] != self.queries.shape[1]:
            raise DimensionMismatchError(
                f"base dim {self.base.shape[1]} differs from query dim {self.queries.shape[1]}"
            )

    @property
    def dim(self) -> int:
        return self.base.shape[1]

    def truth(self, k: int) -> np.ndarray:
        if self.ground_truth is None:
            raise DatasetError("dataset has no ground truth")
        if self.ground_truth.shape[1] < k:
            raise DatasetError(f"ground truth has {self.ground_truth.shape[1]} neighbours per query, need {k}")
        return self.ground_truth[:, :k]


def _walk_error(path: PathLike, raw: np.ndarray, dim: int) -> DatasetError:
    pos = 0
    while pos < raw.size:
        if pos + 4 > raw.size:
            return DatasetError(f"{path}: truncated record header at byte offset {pos}")
        d = int(raw[pos : pos + 4].view("<i4")[0])
        if d != dim:
            return DatasetError(f"{path}: dimension {d} at byte offset {pos} differs from {dim}")
        if pos + 4 + 4 * d > raw.size:
            return DatasetError(f"{path}: truncated record at byte offset {pos}")
        pos += 4 + 4 * d
    return DatasetError(f"{path}: malformed vector file")


def _load_vecs(path: PathLike, dtype: str) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        return np.zeros((0, 0), dtype=dtype)
    if raw.size < 4:
        raise DatasetError(f"{path}: truncated record header at byte offset 0")
    dim = int(raw[:4].view("<i4")[0])
    if dim <= 0:
        raise DatasetError(f"{path}: non-positive dimension {dim} at byte offset 0")
    stride = 4 + 4 * dim
    if raw.size % stride:
        raise _walk_error(path, raw, dim)
    table = raw.reshape(-1, stride)
    if np.any(table[:, :4].copy().view("<i4") != dim):
        raise _walk_error(path, raw, dim)
    return table[:, 4:].copy().view(dtype).astype(dtype[1:])


def load_fvecs(path: PathLike) -> np.ndarray:
    """Read a .fvecs file: records of (int32 d, d float32), little-endian."""
    return _load_vecs(path, "<f4")


def load_ivecs(path: PathLike) -> np.ndarray:
    return _load_vecs(path, "<i4")


def write_vecs(path: PathLike, rows: np.ndarray) -> None:
    rows = np.asarray(rows)
    kind = "<f4" if rows.dtype.kind == "f" else "<i4"
    with open(path, "wb") as fh:
        for row in rows:
            fh.write(np.int32(row.shape[0]).astype("<i4").tobytes())
            fh.write(row.astype(kind).tobytes())


def gaussian_mixture(
    n: int,
    dim: int,
    *,
    blobs: int = 64,
    spread: float = 1.0,
    center_scale: float = 4.0,
    seed: int = 0,
) -> np.ndarray:
    """Seeded isotropic Gaussian mixture with uniformly chosen components."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=center_scale, size=(blobs, dim))
    labels = rng.integers(0, blobs, size=n)
    return (centers[labels] + rng.normal(scale=spread, size=(n, dim))).astype(np.float32)


def synthetic_dataset(
    n: int = 20_000,
    nq: int = 2_000,
    dim: int = 32,
    *,
    blobs: int = 64,
    spread: float = 1.0,
    center_scale: float = 4.0,
    seed: int = 0,
    k: Optional[int] = 10,
) -> Dataset:
    """Base and query sets drawn from one mixture; ground truth when ``k`` is set."""
    both = gaussian_mixture(n + nq, dim, blobs=blobs, spread=spread, center_scale=center_scale, seed=seed)
    base, queries = both[:n], both[n:]
    gt = ground_truth(base, queries, k) if k else None
    return Dataset(base, queries, gt, name=f"synthetic-{n}x{dim}")


def ground_truth(base: np.ndarray, queries: np.ndarray, k: int, ids: Optional[Sequence[int]] = None) -> np.ndarray:
    """Exact top-k ids per query by exhaustive squared-L2 scan; ties go to the smaller id."""
    base = np.asarray(base, dtype=np.float32)
    queries = np.asarray(queries, dtype=np.float32)
    if base.shape[1] != queries.shape[1]:
        raise DimensionMismatchError(f"base dim {base.shape[1]} differs from query dim {queries.shape[1]}")
    ids_arr = np.arange(base.shape[0], dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    k = min(k, base.shape[0])
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for qi, q in enumerate(queries):
        d = sq_l2_rows(base, q.astype(np.float64))
        if k < d.shape[0]:
            kth = np.partition(d, k - 1)[k - 1]
            pool = np.nonzero(d <= kth)[0]
        else:
            pool = np.arange(d.shape[0])
        order = pool[np.lexsort((ids_arr[pool], d[pool]))][:k]
        out[qi] = ids_arr[order]
    return out


def recall_at_k(result_ids: Sequence, truth_ids: Sequence, k: int) -> float:
    """|result ∩ truth[:k]| / k, averaged when given one row per query."""
    res = list(result_ids)
    truth = list(truth_ids)
    if truth and not np.isscalar(truth[0]):
        if len(res) != len(truth):
            raise ValueError("result and truth batches differ in length")
        return float(np.mean([recall_at_k(r, t, k) for r, t in zip(res, truth)]))
    if len(truth) < k:
        raise DatasetError(f"truth has {len(truth)} entries, need {k}")
    top = {int(i) for i in truth[:k]}
    return len(top & {int(i) for i in res[:k]}) / k
