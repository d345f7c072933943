"""Per-channel segmentation of multivariate windows and segment perturbation.

Each of the F series of a window is split into contiguous segments, either of
equal size or by minimising the summed within-segment squared error. A
coalition is a binary vector over all segments; a 1 marks a segment that is
replaced by the perturbation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

PERTURBATIONS = ("zero", "one", "mean", "uniform_noise", "normal_noise")
SEGMENTATIONS = ("uniform", "l2_optimal")


def uniform_segmentation(T: int, m: int) -> list[tuple[int, int]]:
    """Windows of size ``m`` over ``[0, T)``; the last one is shorter if needed."""
    if not 1 <= m <= T:
        raise ValueError(f"window size {m} not in [1, {T}]")
    return [(i, min(i + m, T)) for i in range(0, T, m)]


def segment_cost(ts: Sequence[float], i: int, j: int) -> float:
    """Sum of squared deviations from the mean over ``ts[i:j]``."""
    if not 0 <= i < j <= len(ts):
        raise ValueError(f"empty or invalid segment [{i}, {j})")
    seg = np.asarray(ts[i:j], dtype=np.float64)
    return float(np.sum((seg - seg.mean()) ** 2))


def partition_cost(ts: Sequence[float], bounds: Sequence[tuple[int, int]]) -> float:
    return sum(segment_cost(ts, i, j) for i, j in bounds)


def _cost_table(ts: np.ndarray) -> np.ndarray:
    """``C[i, j]`` = cost of ``ts[i:j]`` from prefix sums (inf where j <= i)."""
    T = len(ts)
    c = ts - ts.mean()
    s1 = np.concatenate([[0.0], np.cumsum(c)])
    s2 = np.concatenate([[0.0], np.cumsum(c * c)])
    i = np.arange(T + 1)[:, None]
    j = np.arange(T + 1)[None, :]
    n = (j - i).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        C = (s2[j] - s2[i]) - (s1[j] - s1[i]) ** 2 / n
    C = np.maximum(C, 0.0)
    C[j - i == 1] = 0.0
    C[j <= i] = np.inf
    return C


def l2_optimal_segmentation(ts: Sequence[float], n_segments: int) -> list[tuple[int, int]]:
    """Exact minimum-cost split of ``ts`` into ``n_segments`` contiguous pieces.

    Dynamic programme over suffixes: ``best[k, i]`` is the cost of covering
    ``ts[i:]`` with k segments. Reconstruction walks left to right taking the
    smallest next boundary among equal-cost choices, which yields the
    lexicographically smallest optimal boundary vector.
    """
    ts = np.asarray(ts, dtype=np.float64)
    T = len(ts)
    if not 1 <= n_segments <= T:
        raise ValueError(f"n_segments {n_segments} not in [1, {T}]")
    C = _cost_table(ts)
    best = np.full((n_segments + 1, T + 1), np.inf)
    choice = np.zeros((n_segments + 1, T + 1), dtype=np.int64)
    best[1, :T] = C[:T, T]
    choice[1, :T] = T
    for k in range(2, n_segments + 1):
        for i in range(T - k + 1):
            # first segment [i, j), the rest covers [j, T) with k-1 segments
            cand = C[i, i + 1: T - k + 2] + best[k - 1, i + 1: T - k + 2]
            a = int(np.argmin(cand))
            best[k, i] = cand[a]
            choice[k, i] = i + 1 + a
    bounds = []
    i = 0
    for k in range(n_segments, 0, -1):
        j = int(choice[k, i])
        bounds.append((i, j))
        i = j
    return bounds


# ---------------------------------------------------------------------------
# partitions


@dataclass(frozen=True)
class SegmentPartition:
    """Segments ``(channel, start, end)`` of an ``F x T`` window, channel-major."""

    segments: tuple[tuple[int, int, int], ...]
    shape: tuple[int, int]
    kind: str = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(tuple(int(v) for v in s)
                                                   for s in self.segments))
        object.__setattr__(self, "shape", tuple(int(v) for v in self.shape))
        self.validate()

    def validate(self) -> None:
        F, T = self.shape
        per_channel: dict[int, list[tuple[int, int]]] = {f: [] for f in range(F)}
        for f, i, j in self.segments:
            if f not in per_channel:
                raise ValueError(f"segment channel {f} outside [0, {F})")
            if not 0 <= i < j <= T:
                raise ValueError(f"invalid segment [{i}, {j}) on channel {f}")
            per_channel[f].append((i, j))
        for f, segs in per_channel.items():
            pos = 0
            for i, j in sorted(segs):
                if i != pos:
                    raise ValueError(f"channel {f}: segments do not tile [0, {T})")
                pos = j
            if pos != T:
                raise ValueError(f"channel {f}: segments do not cover [0, {T})")

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def labels(self) -> np.ndarray:
        """``F x T`` matrix holding the segment index of every element."""
        lab = np.empty(self.shape, dtype=np.int64)
        for s, (f, i, j) in enumerate(self.segments):
            lab[f, i:j] = s
        return lab

    def broadcast(self, values: Sequence[float]) -> np.ndarray:
        """Spread one value per segment over its elements."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.n_segments,):
            raise ValueError("one value per segment required")
        return values[self.labels()]

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "shape": list(self.shape),
                           "segments": [list(s) for s in self.segments]})

    @classmethod
    def from_json(cls, text: str) -> "SegmentPartition":
        d = json.loads(text)
        return cls(tuple(tuple(s) for s in d["segments"]), tuple(d["shape"]), d["kind"])


def make_partition(x: np.ndarray, kind: str = "uniform", n_segments: int = 8
                   ) -> SegmentPartition:
    """Segment every channel of ``x`` into (about) ``n_segments`` pieces.

    Uniform segmentation uses window size ``ceil(T / n_segments)``, so a
    channel may end up with fewer pieces when T is not divisible.
    """
    x = np.asarray(x, dtype=np.float64)
    F, T = x.shape
    if not 1 <= n_segments <= T:
        raise ValueError(f"n_segments {n_segments} not in [1, {T}]")
    segs = []
    if kind == "uniform":
        bounds = uniform_segmentation(T, math.ceil(T / n_segments))
        for f in range(F):
            segs.extend((f, i, j) for i, j in bounds)
    elif kind == "l2_optimal":
        for f in range(F):
            segs.extend((f, i, j) for i, j in l2_optimal_segmentation(x[f], n_segments))
    else:
        raise ValueError(f"unknown segmentation {kind!r}")
    return SegmentPartition(tuple(segs), (F, T), kind)


# ---------------------------------------------------------------------------
# perturbation


@dataclass(frozen=True)
class FeatureStats:
    """Per-feature summary used by the noise perturbations (population std)."""

    mean: np.ndarray
    std: np.ndarray
    min: np.ndarray
    max: np.ndarray

    @classmethod
    def from_samples(cls, X: np.ndarray) -> "FeatureStats":
        X = np.asarray(X, dtype=np.float64)
        flat = X.transpose(1, 0, 2).reshape(X.shape[1], -1)
        return cls(flat.mean(axis=1), flat.std(axis=1), flat.min(axis=1), flat.max(axis=1))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("mean", "std", "min", "max")}


def segment_means(x: np.ndarray, partition: SegmentPartition) -> np.ndarray:
    return np.array([x[f, i:j].mean() for f, i, j in partition.segments])


def perturb_many(x: np.ndarray, partition: SegmentPartition, masks: np.ndarray, method: str,
                 stats: FeatureStats | None = None, rng: np.random.Generator | None = None
                 ) -> np.ndarray:
    """Apply coalition masks ``(N, n_segments)`` to ``x``; returns ``(N, F, T)``.

    Noise methods draw a full ``(N, F, T)`` block from ``rng`` and keep the
    masked entries, so stream consumption does not depend on the masks.
    """
    x = np.asarray(x, dtype=np.float64)
    masks = np.asarray(masks)
    if masks.ndim != 2 or masks.shape[1] != partition.n_segments:
        raise ValueError(f"masks must have shape (N, {partition.n_segments})")
    if x.shape != partition.shape:
        raise ValueError(f"sample shape {x.shape} != partition shape {partition.shape}")
    N = masks.shape[0]
    hit = masks.astype(bool)[:, partition.labels()]
    if method == "zero":
        repl = np.zeros(x.shape)
    elif method == "one":
        repl = np.ones(x.shape)
    elif method == "mean":
        repl = partition.broadcast(segment_means(x, partition))
    elif method in ("uniform_noise", "normal_noise"):
        if stats is None or rng is None:
            raise ValueError(f"{method} needs feature stats and a random generator")
        F = x.shape[0]
        if method == "uniform_noise":
            u = rng.random((N,) + x.shape)
            lo, hi = stats.min.reshape(F, 1), stats.max.reshape(F, 1)
            repl = lo + (hi - lo) * u
        else:
            repl = stats.mean.reshape(F, 1) + stats.std.reshape(F, 1) * rng.standard_normal(
                (N,) + x.shape)
    else:
        raise ValueError(f"unknown perturbation {method!r}")
    return np.where(hit, repl, x[None])


def perturb(x: np.ndarray, partition: SegmentPartition, mask: Sequence[int], method: str,
            stats: FeatureStats | None = None, rng: np.random.Generator | None = None
            ) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != (partition.n_segments,):
        raise ValueError(f"mask length {mask.shape} != {partition.n_segments} segments")
    return perturb_many(x, partition, mask[None], method, stats, rng)[0]


def sample_coalitions(n_segments: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` random masks; row 0 is always the all-zeros (unperturbed) mask."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = np.zeros((count, n_segments), dtype=np.int8)
    if count > 1:
        out[1:] = rng.integers(0, 2, size=(count - 1, n_segments), dtype=np.int8)
    return out


def all_coalitions(n_segments: int) -> np.ndarray:
    """Every mask in {0,1}^n, row r holding the binary digits of r (LSB first)."""
    r = np.arange(2 ** n_segments)[:, None]
    return ((r >> np.arange(n_segments)[None, :]) & 1).astype(np.int8)
