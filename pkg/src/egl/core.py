"""Shared domain types: evaluation points, exploration batches, the replay
buffer, run records, and seeded random streams."""

from __future__ import annotations

import csv
import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

# Fixed stream indices. New consumers get new indices so existing streams
# never shift.
STREAM_EXPLORE = 0
STREAM_MINIBATCH = 1
STREAM_INIT = 2
STREAM_BASELINE = 3
STREAM_PERTURB = 4
STREAM_X0 = 5
STREAM_WARMUP = 6


class Rng:
    """Root seed that hands out independent Philox streams by index."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def stream(self, index: int) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(int(index),))
        return np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"


@dataclass(frozen=True)
class EvalPoint:
    x: np.ndarray
    y: float

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 1 or not np.all(np.isfinite(x)):
            raise ValueError("EvalPoint.x must be a finite 1-D vector")
        if not np.isfinite(self.y):
            raise ValueError("EvalPoint.y must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", float(self.y))


@dataclass(frozen=True)
class ExplorationBatch:
    """Points sampled around ``center``.

    ``modes`` labels each row with how it was drawn: ``"box"`` rows satisfy
    ``|x - center|_inf <= epsilon``, ``"ball"`` and ``"cone"`` rows satisfy
    ``|x - center|_2 <= epsilon``. ``y`` stays ``None`` until the batch has
    been evaluated.
    """

    x: np.ndarray
    center: np.ndarray
    epsilon: float
    modes: tuple[str, ...]
    y: np.ndarray | None = None

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if len(self.modes) != len(x):
            raise ValueError("one mode label per point is required")
        if self.y is not None:
            y = np.asarray(self.y, dtype=float)
            if y.shape != (len(x),):
                raise ValueError("y must have one value per point")
            object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.x)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def with_values(self, y) -> ExplorationBatch:
        return ExplorationBatch(self.x, self.center, self.epsilon, self.modes, np.asarray(y, dtype=float))

    def head(self, k: int) -> ExplorationBatch:
        y = None if self.y is None else self.y[:k]
        return ExplorationBatch(self.x[:k], self.center, self.epsilon, self.modes[:k], y)

    @property
    def points(self) -> list[EvalPoint]:
        if self.y is None:
            raise ValueError("batch has not been evaluated")
        return [EvalPoint(xi, yi) for xi, yi in zip(self.x, self.y)]

    def within_radius(self, tol: float = 1e-12) -> np.ndarray:
        """Per-point check of the sampling-mode radius constraint."""
        d = self.x - self.center
        inf = np.max(np.abs(d), axis=1) if d.size else np.zeros(len(d))
        two = np.linalg.norm(d, axis=1)
        box = np.array([mode == "box" for mode in self.modes])
        return np.where(box, inf, two) <= self.epsilon * (1 + tol) + tol


class ReplayBuffer:
    """FIFO of the most recent evaluated exploration batches."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._batches: deque[ExplorationBatch] = deque(maxlen=self.capacity)

    def push(self, batch: ExplorationBatch) -> ReplayBuffer:
        if len(batch) == 0:
            raise ValueError("cannot push an empty batch")
        if batch.y is None:
            raise ValueError("only evaluated batches can be stored")
        self._batches.append(batch)
        return self

    def replace(self, batches: Sequence[ExplorationBatch]) -> None:
        """Swap in re-expressed batches, keeping at most ``capacity`` newest."""
        self._batches = deque((b for b in batches if len(b) > 0), maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self._batches)

    def __iter__(self) -> Iterator[ExplorationBatch]:
        return iter(self._batches)

    @property
    def batches(self) -> list[ExplorationBatch]:
        return list(self._batches)

    @property
    def n_points(self) -> int:
        return sum(len(b) for b in self._batches)

    def all_x(self) -> np.ndarray:
        return np.concatenate([b.x for b in self._batches])

    def all_y(self) -> np.ndarray:
        return np.concatenate([b.y for b in self._batches])

    def pair_counts(self) -> np.ndarray:
        sizes = np.array([len(b) for b in self._batches], dtype=np.int64)
        return sizes * (sizes - 1)


def push_batch(rb: ReplayBuffer, b: ExplorationBatch) -> ReplayBuffer:
    return rb.push(b)


def all_pairs_within_batches(rb: ReplayBuffer) -> list[tuple[EvalPoint, EvalPoint]]:
    """Every ordered pair (i, j), i != j, drawn from the same batch."""
    pairs = []
    for batch in rb:
        pts = batch.points
        for i, a in enumerate(pts):
            for j, b in enumerate(pts):
                if i != j:
                    pairs.append((a, b))
    return pairs


def pair_index_arrays(sizes: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Flat (i, j) indices of all within-batch ordered pairs, for batches laid
    out back to back."""
    first, second = [], []
    offset = 0
    for s in sizes:
        ii, jj = np.nonzero(~np.eye(s, dtype=bool))
        first.append(ii + offset)
        second.append(jj + offset)
        offset += s
    if not first:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(first), np.concatenate(second)


def config_hash(config: Any) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunRecord:
    """Full evaluation trace of one optimizer run."""

    t: np.ndarray
    y: np.ndarray
    x_best: np.ndarray
    y_best: float
    evaluations_used: int
    seed: int
    config_hash: str = ""
    events: list[dict] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def y_best_trace(self) -> np.ndarray:
        return np.minimum.accumulate(self.y) if len(self.y) else np.zeros(0)

    @property
    def y0(self) -> float:
        return float(self.y[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, RunRecord):
            return NotImplemented
        return (
            np.array_equal(self.t, other.t)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.x_best, other.x_best)
            and self.y_best == other.y_best
            and self.evaluations_used == other.evaluations_used
            and self.seed == other.seed
        )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "y", "y_best"])
            for t, y, yb in zip(self.t, self.y, self.y_best_trace):
                w.writerow([int(t), repr(float(y)), repr(float(yb))])

    def sidecar(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "x_best": [float(v) for v in self.x_best],
            "y_best": float(self.y_best),
            "evaluations_used": int(self.evaluations_used),
        }

    def save(self, csv_path: str | Path) -> None:
        csv_path = Path(csv_path)
        self.to_csv(csv_path)
        csv_path.with_suffix(".json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, csv_path: str | Path) -> RunRecord:
        csv_path = Path(csv_path)
        t, y = read_trace(csv_path)
        side_path = csv_path.with_suffix(".json")
        if side_path.exists():
            side = json.loads(side_path.read_text())
        else:
            side = {"seed": -1, "config_hash": "", "x_best": [],
                    "y_best": float(np.min(y)) if len(y) else float("nan"),
                    "evaluations_used": len(y)}
        return cls(t, y, np.asarray(side["x_best"], dtype=float), float(side["y_best"]),
                   int(side["evaluations_used"]), int(side["seed"]), side.get("config_hash", ""))


def read_trace(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    t = np.array([int(r["t"]) for r in rows], dtype=np.int64)
    y = np.array([float(r["y"]) for r in rows], dtype=float)
    return t, y
