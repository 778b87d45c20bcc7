"""Sample containers, dataset splitting, product references, and deterministic RNG.

Rows are laid out as z = (y, x): the first ``y_dim`` columns are the
conditioning block, the remaining ``x_dim`` columns the sampled block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.random import Generator, Philox, SeedSequence


class ValidationError(ValueError):
    """Bad arguments or malformed inputs (CLI exit code 2)."""


class NumericsError(RuntimeError):
    """Numerical failure at runtime (CLI exit code 1)."""


# Named sub-stream tags for RngState.generator. Keeping these fixed keeps
# every pipeline stage on its own reproducible stream.
STREAM_SPLIT = 1
STREAM_REFERENCE = 2
STREAM_CENTERS = 3
STREAM_MARKERS = 4
STREAM_SAMPLE = 5
STREAM_NOISE = 6
STREAM_ROWS = 7
STREAM_MCMC = 8
STREAM_PERMUTE = 9


@dataclass(frozen=True)
class RngState:
    """Root of all randomness: a 64-bit seed feeding counter-based Philox streams.

    Identical seeds give bit-identical streams across runs and platforms.
    Sub-streams are keyed by integer tags so independent pipeline stages
    never share a stream.
    """

    seed: int

    def __post_init__(self) -> None:
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool):
            raise ValidationError(f"seed must be an integer, got {self.seed!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError(f"seed must fit in 64 bits, got {self.seed}")

    def generator(self, *stream: int) -> Generator:
        """Return a Generator for the sub-stream keyed by (seed, *stream)."""
        for part in stream:
            if not isinstance(part, (int, np.integer)):
                raise ValidationError(f"stream tags must be integers, got {part!r}")
        key = (int(self.seed),) + tuple(int(s) for s in stream)
        return Generator(Philox(SeedSequence(key)))


def _check_points(points: np.ndarray, y_dim: int, x_dim: int, name: str) -> np.ndarray:
    if y_dim < 0:
        raise ValidationError(f"{name}: y_dim must be >= 0, got {y_dim}")
    if x_dim < 1:
        raise ValidationError(f"{name}: x_dim must be >= 1, got {x_dim}")
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name}: expected a 2-D array, got shape {arr.shape}")
    if arr.shape[1] != y_dim + x_dim:
        raise ValidationError(
            f"{name}: {arr.shape[1]} columns but y_dim + x_dim = {y_dim + x_dim}"
        )
    if not np.all(np.isfinite(arr)):
        bad = int(np.argwhere(~np.isfinite(arr).all(axis=1))[0, 0])
        raise ValidationError(f"{name}: non-finite entries (first bad row {bad})")
    return arr


@dataclass
class SampleBatch:
    """A set of rows in joint (y, x) space.

    The trailing ``marker_count`` rows are markers (appended via
    append_markers): passengers that move with the batch and raise the local
    density seen by the bandwidth rule, but stay out of the objective
    statistics. A frozen-y flow cannot repair extra y mass that the target
    does not carry, so counting markers in the moment means would bias every
    step.
    """

    points: np.ndarray
    y_dim: int
    x_dim: int
    marker_count: int = 0

    def __post_init__(self) -> None:
        self.points = _check_points(self.points, self.y_dim, self.x_dim, "SampleBatch")
        if not 0 <= self.marker_count <= self.points.shape[0]:
            raise ValidationError(
                f"marker_count {self.marker_count} out of range for "
                f"{self.points.shape[0]} rows"
            )

    @property
    def n_rows(self) -> int:
        return self.points.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.y_dim + self.x_dim

    @property
    def y(self) -> np.ndarray:
        return self.points[:, : self.y_dim]

    @property
    def x(self) -> np.ndarray:
        return self.points[:, self.y_dim :]

    @property
    def body(self) -> np.ndarray:
        """Rows excluding trailing markers."""
        n = self.points.shape[0] - self.marker_count
        return self.points[:n]

    def copy(self) -> "SampleBatch":
        return SampleBatch(self.points.copy(), self.y_dim, self.x_dim, self.marker_count)

    def save_csv(self, path: str | Path, seed: int | None = None) -> None:
        _write_csv(Path(path), self.points, self.y_dim, self.x_dim,
                   marker_count=self.marker_count, seed=seed)

    @classmethod
    def load_csv(cls, path: str | Path) -> "SampleBatch":
        points, y_dim, x_dim, meta = _read_csv(Path(path))
        return cls(points, y_dim, x_dim, marker_count=int(meta.get("marker_count", 0)))


@dataclass
class JointDataset:
    """Rows drawn jointly from mu(y, x), plus the seed that produced them."""

    pairs: np.ndarray
    y_dim: int
    x_dim: int
    seed: int | None = None

    def __post_init__(self) -> None:
        self.pairs = _check_points(self.pairs, self.y_dim, self.x_dim, "JointDataset")

    @property
    def n_rows(self) -> int:
        return self.pairs.shape[0]

    @property
    def y(self) -> np.ndarray:
        return self.pairs[:, : self.y_dim]

    @property
    def x(self) -> np.ndarray:
        return self.pairs[:, self.y_dim :]

    def as_batch(self) -> SampleBatch:
        return SampleBatch(self.pairs.copy(), self.y_dim, self.x_dim)

    def save_csv(self, path: str | Path) -> None:
        _write_csv(Path(path), self.pairs, self.y_dim, self.x_dim,
                   marker_count=0, seed=self.seed)

    @classmethod
    def load_csv(cls, path: str | Path) -> "JointDataset":
        pairs, y_dim, x_dim, meta = _read_csv(Path(path))
        seed = meta.get("seed")
        return cls(pairs, y_dim, x_dim, seed=None if seed is None else int(seed))


def split_dataset(
    joint: JointDataset, target_fraction: float, rng: Generator
) -> tuple[JointDataset, JointDataset]:
    """Randomly partition a joint dataset into (reference_source, target).

    The target side receives round(n * target_fraction) rows. Both sides must
    end up non-empty.
    """
    if not 0.0 < target_fraction < 1.0:
        raise ValidationError(f"target_fraction must be in (0, 1), got {target_fraction}")
    n = joint.n_rows
    n_target = int(round(n * target_fraction))
    if n_target == 0 or n_target == n:
        raise ValidationError(
            f"split of {n} rows at fraction {target_fraction} leaves one side empty"
        )
    perm = rng.permutation(n)
    target_rows = joint.pairs[perm[:n_target]]
    ref_rows = joint.pairs[perm[n_target:]]
    ref = JointDataset(ref_rows, joint.y_dim, joint.x_dim, seed=joint.seed)
    target = JointDataset(target_rows, joint.y_dim, joint.x_dim, seed=joint.seed)
    return ref, target


def build_product_reference(
    source: JointDataset,
    size: int | None = None,
    mode: str = "permutation",
    rng: Generator | None = None,
) -> SampleBatch:
    """Build samples of the product measure mu(y) mu(x) from joint rows.

    permutation: pair each y row with an independently shuffled x row
    (fixed points allowed). Preserves both marginals as exact multisets when
    size equals the source size; size above the source is rejected.

    tensor_subsample: draw index pairs (i, j) uniformly with replacement and
    emit rows (y_i, x_j); any size is allowed.

    tiled_permutation: concatenate floor(size / n) independent permutation
    blocks plus a without-replacement remainder, so both marginals stay exact
    multisets at any block multiple. Preferred for references much larger
    than the source: bootstrap marginal noise is what a frozen-y flow cannot
    repair, and this mode removes it.
    """
    if rng is None:
        raise ValidationError("build_product_reference requires an rng")
    n = source.n_rows
    if size is None:
        size = n
    if size < 1:
        raise ValidationError(f"size must be >= 1, got {size}")
    if mode == "permutation":
        if size > n:
            raise ValidationError(
                f"permutation mode cannot emit {size} rows from {n} source rows; "
                "use tensor_subsample"
            )
        x_perm = rng.permutation(n)
        points = np.hstack([source.y, source.x[x_perm]])
        if size < n:
            keep = rng.choice(n, size=size, replace=False)
            points = points[keep]
    elif mode == "tensor_subsample":
        idx = rng.integers(0, n, size=(2, size))
        points = np.hstack([source.y[idx[0]], source.x[idx[1]]])
    elif mode == "tiled_permutation":
        reps, rem = divmod(size, n)
        blocks = [np.hstack([source.y, source.x[rng.permutation(n)]]) for _ in range(reps)]
        if rem:
            yi = rng.choice(n, size=rem, replace=False)
            xi = rng.choice(n, size=rem, replace=False)
            blocks.append(np.hstack([source.y[yi], source.x[xi]]))
        points = np.vstack(blocks)
    else:
        raise ValidationError(f"unknown product reference mode {mode!r}")
    return SampleBatch(points, source.y_dim, source.x_dim)


def append_markers(
    batch: SampleBatch, x_samples: np.ndarray, y_star: np.ndarray
) -> SampleBatch:
    """Append rows (y_star, x_i) to a batch and extend its marker count."""
    x_samples = np.asarray(x_samples, dtype=np.float64)
    if x_samples.ndim != 2 or x_samples.shape[1] != batch.x_dim:
        raise ValidationError(
            f"x_samples must be (k, {batch.x_dim}), got shape {x_samples.shape}"
        )
    y_star = np.asarray(y_star, dtype=np.float64).reshape(-1)
    if y_star.shape[0] != batch.y_dim:
        raise ValidationError(
            f"y_star must have length {batch.y_dim}, got {y_star.shape[0]}"
        )
    k = x_samples.shape[0]
    rows = np.hstack([np.tile(y_star, (k, 1)), x_samples])
    points = np.vstack([batch.points, rows])
    return SampleBatch(points, batch.y_dim, batch.x_dim, batch.marker_count + k)


# ---------------------------------------------------------------------------
# CSV + JSON sidecar serialization


def sidecar_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def _write_csv(
    path: Path,
    points: np.ndarray,
    y_dim: int,
    x_dim: int,
    marker_count: int,
    seed: int | None,
) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    header = [f"y{i}" for i in range(y_dim)] + [f"x{i}" for i in range(x_dim)]
    lines = [",".join(header)]
    for row in points:
        # repr gives the shortest decimal that round-trips the float64 exactly
        lines.append(",".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n")
    meta = {"y_dim": y_dim, "x_dim": x_dim, "marker_count": marker_count, "seed": seed}
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def _read_csv(path: Path) -> tuple[np.ndarray, int, int, dict]:
    if not path.exists():
        raise ValidationError(f"no such file: {path}")
    text = path.read_text().strip()
    lines = text.split("\n") if text else []
    if not lines:
        raise ValidationError(f"{path}: empty file")
    header = lines[0].split(",")
    y_dim = sum(1 for h in header if h.startswith("y"))
    x_dim = sum(1 for h in header if h.startswith("x"))
    if y_dim + x_dim != len(header):
        raise ValidationError(f"{path}: unrecognized header {lines[0]!r}")
    if lines[1:]:
        points = np.array(
            [[float(v) for v in line.split(",")] for line in lines[1:]],
            dtype=np.float64,
        )
    else:
        points = np.empty((0, y_dim + x_dim), dtype=np.float64)
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    if meta:
        if int(meta.get("y_dim", y_dim)) != y_dim or int(meta.get("x_dim", x_dim)) != x_dim:
            raise ValidationError(f"{path}: sidecar dims disagree with header")
    return points, y_dim, x_dim, meta
