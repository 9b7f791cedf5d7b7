"""Box geometry, OCR line clustering and hierarchical spatial descriptors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ConfigError, EmptyInputError, PreconditionError

DEFAULT_EPSILON = 0.02
DEFAULT_POS_WIDTH = 32
_DENSE_CLOSURE_MAX = 128


@dataclass(frozen=True)
class NormBox:
    """Axis-aligned rectangle in normalized image coordinates (origin top-left)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(isinstance(v, (int, float)) and math.isfinite(v) for v in vals):
            raise PreconditionError(f"box coordinates must be finite numbers: {vals}")
        if not (0.0 <= self.x1 <= self.x2 <= 1.0 and 0.0 <= self.y1 <= self.y2 <= 1.0):
            raise PreconditionError(f"invalid normalized box {vals}")

    @classmethod
    def from_list(cls, coords: Sequence[float]) -> "NormBox":
        if len(coords) != 4:
            raise PreconditionError(f"box needs 4 coordinates, got {len(coords)}")
        return cls(*(float(c) for c in coords))

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def contains(self, other: "NormBox", slack: float = 1e-6) -> bool:
        return (
            self.x1 - slack <= other.x1
            and self.y1 - slack <= other.y1
            and other.x2 <= self.x2 + slack
            and other.y2 <= self.y2 + slack
        )

    def scaled(self, s: float) -> "NormBox":
        return NormBox(*(min(1.0, max(0.0, v * s)) for v in self.as_list()))


def union_box(boxes: Sequence[NormBox]) -> NormBox:
    if not boxes:
        raise EmptyInputError("union of zero boxes")
    return NormBox(
        min(b.x1 for b in boxes),
        min(b.y1 for b in boxes),
        max(b.x2 for b in boxes),
        max(b.y2 for b in boxes),
    )


def box_min_distance(a: NormBox, b: NormBox) -> float:
    """Smallest Euclidean distance between any point of ``a`` and any point of ``b``."""
    if not isinstance(a, NormBox) or not isinstance(b, NormBox):
        raise PreconditionError("box_min_distance expects NormBox arguments")
    dx = max(0.0, a.x1 - b.x2, b.x1 - a.x2)
    dy = max(0.0, a.y1 - b.y2, b.y1 - a.y2)
    return math.hypot(dx, dy)


def pairwise_min_distance(boxes: Sequence[NormBox]) -> np.ndarray:
    """Vectorized ``box_min_distance`` over all pairs, shape (m, m)."""
    arr = np.array([b.as_list() for b in boxes], dtype=np.float64).reshape(-1, 4)
    x1, y1, x2, y2 = (arr[:, k] for k in range(4))
    dx = np.maximum(0.0, np.maximum(x1[:, None] - x2[None, :], x1[None, :] - x2[:, None]))
    dy = np.maximum(0.0, np.maximum(y1[:, None] - y2[None, :], y1[None, :] - y2[:, None]))
    return np.hypot(dx, dy)


@dataclass(frozen=True)
class ClusterAssignment:
    cluster_of_line: tuple[int, ...]
    n_clusters: int

    def __getitem__(self, i: int) -> int:
        return self.cluster_of_line[i]

    def __len__(self) -> int:
        return len(self.cluster_of_line)

    def members(self) -> list[list[int]]:
        groups: list[list[int]] = [[] for _ in range(self.n_clusters)]
        for line, c in enumerate(self.cluster_of_line):
            groups[c].append(line)
        return groups


def canonical_labels(boxes: Sequence[NormBox], raw_labels: Sequence[int]) -> ClusterAssignment:
    """Renumber an arbitrary partition by each cluster's top-most, then left-most corner."""
    keys: dict[int, tuple[float, float]] = {}
    for box, lab in zip(boxes, raw_labels):
        k = (box.y1, box.x1)
        if lab not in keys or k < keys[lab]:
            keys[lab] = k
    order = sorted(keys, key=lambda lab: keys[lab])
    remap = {lab: new for new, lab in enumerate(order)}
    return ClusterAssignment(tuple(remap[lab] for lab in raw_labels), len(order))


def cluster_lines(boxes: Sequence[NormBox], epsilon: float = DEFAULT_EPSILON) -> ClusterAssignment:
    """DBSCAN over line boxes with minPts = 1.

    With a single-point neighbourhood requirement every line is a core point,
    so clusters are exactly the connected components of the graph linking
    lines whose boxes are within ``epsilon`` of each other. No line is noise.
    """
    if len(boxes) == 0:
        raise EmptyInputError("cluster_lines needs at least one box")
    if not epsilon > 0:
        raise PreconditionError(f"epsilon must be positive, got {epsilon}")
    for b in boxes:
        if not isinstance(b, NormBox):
            raise PreconditionError("cluster_lines expects NormBox items")
    adj = pairwise_min_distance(boxes) <= epsilon
    if len(boxes) <= _DENSE_CLOSURE_MAX:
        # Transitive closure by repeated squaring; each line is labelled by the
        # first line it reaches. Cheaper than a sparse graph for page-sized inputs.
        reach = adj.astype(np.int64)
        while True:
            nxt = ((reach @ reach) > 0).astype(np.int64)
            if np.array_equal(nxt, reach):
                break
            reach = nxt
        raw = reach.argmax(axis=1)
    else:
        _, raw = connected_components(csr_matrix(adj), directed=False)
    return canonical_labels(boxes, [int(r) for r in raw])


def sinusoidal_embedding(i: int, d: int) -> np.ndarray:
    """Transformer-style position code: sin on even slots, cos on odd slots."""
    if d < 2 or d % 2:
        raise ConfigError(f"embedding width must be even and >= 2, got {d}")
    if i < 0:
        raise PreconditionError(f"position must be nonnegative, got {i}")
    k = np.arange(d // 2, dtype=np.float64)
    angle = i / np.power(10000.0, 2 * k / d)
    out = np.empty(d, dtype=np.float64)
    out[0::2] = np.sin(angle)
    out[1::2] = np.cos(angle)
    return out


def sinusoidal_table(n: int, d: int) -> np.ndarray:
    """Rows 0..n-1 of ``sinusoidal_embedding`` stacked, shape (n, d)."""
    if d < 2 or d % 2:
        raise ConfigError(f"embedding width must be even and >= 2, got {d}")
    k = np.arange(d // 2, dtype=np.float64)
    angle = np.arange(n, dtype=np.float64)[:, None] / np.power(10000.0, 2 * k / d)[None, :]
    out = np.empty((n, d), dtype=np.float64)
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


@dataclass(frozen=True)
class SpatialDescriptor:
    cluster_id: int
    line_index: int
    token_index: int
    embedding: np.ndarray


def spatial_descriptor(cluster_id: int, line_index: int, token_index: int,
                       d: int = DEFAULT_POS_WIDTH) -> SpatialDescriptor:
    for name, v in (("cluster_id", cluster_id), ("line_index", line_index), ("token_index", token_index)):
        if v < 0:
            raise PreconditionError(f"{name} must be nonnegative, got {v}")
    emb = np.concatenate([
        sinusoidal_embedding(cluster_id, d),
        sinusoidal_embedding(line_index, d),
        sinusoidal_embedding(token_index, d),
    ])
    return SpatialDescriptor(cluster_id, line_index, token_index, emb)
