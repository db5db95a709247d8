"""From raw ALS points to fixed-size samples and back.

Point files are whitespace-separated text, one return per line::

    x y z intensity return_number num_returns [label]

Prediction files append a predicted-label column; error maps append a
further 0/1 mismatch column.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional

import numpy as np

BLOCK_SIZE = 30.0
STRIDE = 10.0
MIN_POINTS = 250
SAMPLE_SIZE = 1024
NUM_INPUT_CHANNELS = 9


class PointRecord(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float
    return_number: int
    num_returns: int
    label: Optional[int] = None


@dataclass
class PointCloud:
    """Column-oriented storage for a list of :class:`PointRecord`."""

    xyz: np.ndarray
    intensity: np.ndarray
    return_number: np.ndarray
    num_returns: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(self.xyz)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(n)
        self.return_number = np.asarray(self.return_number, dtype=np.int64).reshape(n)
        self.num_returns = np.asarray(self.num_returns, dtype=np.int64).reshape(n)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        if not np.all(np.isfinite(self.xyz)):
            raise ValueError("coordinates must be finite")
        bad = np.flatnonzero((self.return_number < 1) | (self.num_returns < self.return_number))
        if bad.size:
            i = int(bad[0])
            raise ValueError(
                f"point {i}: need num_returns >= return_number >= 1, got "
                f"{self.return_number[i]}/{self.num_returns[i]}"
            )

    def __len__(self):
        return len(self.xyz)

    def __iter__(self) -> Iterator[PointRecord]:
        for i in range(len(self)):
            yield self.record(i)

    def record(self, i: int) -> PointRecord:
        x, y, z = self.xyz[i]
        label = None if self.labels is None else int(self.labels[i])
        return PointRecord(float(x), float(y), float(z), float(self.intensity[i]),
                           int(self.return_number[i]), int(self.num_returns[i]), label)

    @classmethod
    def from_records(cls, records) -> "PointCloud":
        records = list(records)
        if not records:
            raise ValueError("no points")
        labelled = [r.label is not None for r in records]
        if any(labelled) and not all(labelled):
            raise ValueError("either every record carries a label or none does")
        return cls(
            xyz=[(r.x, r.y, r.z) for r in records],
            intensity=[r.intensity for r in records],
            return_number=[r.return_number for r in records],
            num_returns=[r.num_returns for r in records],
            labels=[r.label for r in records] if all(labelled) else None,
        )

    def subset(self, ids) -> "PointCloud":
        ids = np.asarray(ids)
        return PointCloud(self.xyz[ids], self.intensity[ids], self.return_number[ids],
                          self.num_returns[ids], None if self.labels is None else self.labels[ids])


def _fmt(v: float) -> str:
    return repr(float(v))


def write_pts(path, cloud: PointCloud, predictions=None, mismatch: bool = False):
    """Write ``cloud`` in the text format, optionally with prediction columns.

    ``mismatch`` adds the 0/1 error-map column and needs reference labels.
    """
    if mismatch and (predictions is None or cloud.labels is None):
        raise ValueError("an error map needs both reference labels and predictions")
    lines = []
    for i in range(len(cloud)):
        x, y, z = cloud.xyz[i]
        cols = [_fmt(x), _fmt(y), _fmt(z), _fmt(cloud.intensity[i]),
                str(cloud.return_number[i]), str(cloud.num_returns[i])]
        if cloud.labels is not None:
            cols.append(str(cloud.labels[i]))
        if predictions is not None:
            cols.append(str(int(predictions[i])))
            if mismatch:
                cols.append(str(int(predictions[i] != cloud.labels[i])))
        lines.append(" ".join(cols))
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rows.append([float(v) for v in line.split()])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no points")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: ragged rows with widths {sorted(widths)}")
    return np.array(rows)


def read_pts(path, labelled: Optional[bool] = None) -> PointCloud:
    """Read a point file. A seventh column is taken as the label.

    Extra trailing columns (predictions, error flags) are ignored here; use
    :func:`read_table` to get at them.
    """
    table = read_table(path)
    if table.shape[1] < 6:
        raise ValueError(f"{path}: need at least 6 columns, got {table.shape[1]}")
    if labelled is None:
        labelled = table.shape[1] >= 7
    if labelled and table.shape[1] < 7:
        raise ValueError(f"{path}: no label column")
    return PointCloud(table[:, :3], table[:, 3], table[:, 4].astype(np.int64),
                      table[:, 5].astype(np.int64),
                      table[:, 6].astype(np.int64) if labelled else None)


# --------------------------------------------------------------------------
# blocks


@dataclass
class NormState:
    mins: np.ndarray  # x, y, z, intensity
    maxs: np.ndarray


@dataclass
class Block:
    """A square footprint over the area and the ids of the points inside it.

    After :func:`normalize_block`, ``features`` holds one row per point:
    min-max normalized x, y, z, intensity followed by the raw return number
    and number of returns.
    """

    footprint: tuple  # (xmin, ymin, size)
    ids: np.ndarray
    labels: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    norm_state: Optional[NormState] = None

    def __len__(self):
        return len(self.ids)


def window_anchors(extent: float, size: float, stride: float) -> np.ndarray:
    """Offsets of the windows needed to cover ``[0, extent]``.

    Windows step by ``stride`` until one reaches the far edge.
    """
    count = 1 if extent <= size else math.ceil((extent - size) / stride - 1e-9) + 1
    return np.arange(count) * stride


def _window_mask(offset: np.ndarray, anchor: float, size: float, last: bool) -> np.ndarray:
    # half-open windows, except the last along an axis keeps its far edge
    upper = offset <= anchor + size if last else offset < anchor + size
    return (offset >= anchor) & upper


def block_partition(
    cloud: PointCloud,
    block_size: float = BLOCK_SIZE,
    stride: float = STRIDE,
    min_points: int = MIN_POINTS,
    drop_sparse: bool = True,
) -> list[Block]:
    """Slide a square window over the xy extent of ``cloud``.

    Training mode (``drop_sparse=True``) uses the given stride and discards
    blocks with fewer than ``min_points`` points. Test mode tiles without
    overlap (stride is forced to ``block_size``) and keeps every non-empty
    block, so each point lands in exactly one block.
    """
    if len(cloud) == 0:
        raise ValueError("block_partition: empty input")
    if block_size <= 0 or not 0 < stride <= block_size:
        raise ValueError(f"need block_size > 0 and 0 < stride <= block_size, got {block_size}, {stride}")
    if not drop_sparse:
        stride = block_size
    lo = cloud.xyz[:, :2].min(axis=0)
    offset = cloud.xyz[:, :2] - lo
    extent = offset.max(axis=0)
    ax = window_anchors(extent[0], block_size, stride)
    ay = window_anchors(extent[1], block_size, stride)
    in_x = [_window_mask(offset[:, 0], a, block_size, i == len(ax) - 1) for i, a in enumerate(ax)]
    in_y = [_window_mask(offset[:, 1], a, block_size, j == len(ay) - 1) for j, a in enumerate(ay)]
    blocks = []
    for i, a in enumerate(ax):
        for j, b in enumerate(ay):
            ids = np.flatnonzero(in_x[i] & in_y[j])
            if len(ids) == 0 or (drop_sparse and len(ids) < min_points):
                continue
            labels = None if cloud.labels is None else cloud.labels[ids]
            blocks.append(Block((float(lo[0] + a), float(lo[1] + b), float(block_size)), ids, labels))
    return blocks


def _minmax(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (values - lo) / safe, 0.0)


def normalize_block(cloud: PointCloud, block: Block) -> Block:
    """Min-max scale x, y, z and intensity to [0, 1] within the block.

    A channel with zero range maps to 0. Return counts pass through.
    """
    if len(block) == 0:
        raise ValueError("normalize_block: empty block")
    raw = np.column_stack([cloud.xyz[block.ids], cloud.intensity[block.ids]])
    mins, maxs = raw.min(axis=0), raw.max(axis=0)
    scaled = _minmax(raw, mins, maxs)
    feats = np.column_stack(
        [scaled, cloud.return_number[block.ids], cloud.num_returns[block.ids]]
    ).astype(np.float64)
    return Block(block.footprint, block.ids, block.labels, feats, NormState(mins, maxs))


def denormalize(block: Block) -> np.ndarray:
    """Recover raw x, y, z, intensity (``m x 4``) from a normalized block."""
    st = block.norm_state
    return block.features[:, :4] * (st.maxs - st.mins) + st.mins


# --------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    features: np.ndarray  # (n, 9): spatial xyz then 6 feature channels
    labels: Optional[np.ndarray]
    origin_ids: np.ndarray  # positions within the source block

    @property
    def coords(self) -> np.ndarray:
        return self.features[:, :3]


def _make_sample(block: Block, pick: np.ndarray) -> Sample:
    f = block.features[pick]
    feats = np.column_stack([f[:, :3], f])
    labels = None if block.labels is None else block.labels[pick]
    return Sample(feats, labels, pick)


def sample_fixed(block: Block, n: int = SAMPLE_SIZE, rng: np.random.Generator | None = None) -> Sample:
    """Draw exactly ``n`` points from a normalized block.

    Large blocks are sampled uniformly without replacement; small ones keep
    every point and fill up with draws with replacement.
    """
    if block.features is None:
        raise ValueError("sample_fixed needs a normalized block")
    m = len(block)
    if m == 0 or n < 1:
        raise ValueError(f"sample_fixed: block of {m} points, n={n}")
    rng = rng if rng is not None else np.random.default_rng()
    if m >= n:
        pick = rng.choice(m, size=n, replace=False)
    else:
        pick = np.concatenate([rng.permutation(m), rng.integers(0, m, size=n - m)])
    return _make_sample(block, pick)


def cover_samples(block: Block, n: int = SAMPLE_SIZE, rng: np.random.Generator | None = None) -> list[Sample]:
    """Samples of size ``n`` that together contain every point of ``block``.

    Points are shuffled and cut into chunks of ``n``; the last chunk is
    topped up with random repeats.
    """
    if block.features is None:
        raise ValueError("cover_samples needs a normalized block")
    rng = rng if rng is not None else np.random.default_rng()
    m = len(block)
    order = rng.permutation(m)
    out = []
    for start in range(0, m, n):
        pick = order[start:start + n]
        if len(pick) < n:
            pick = np.concatenate([pick, rng.integers(0, m, size=n - len(pick))])
        out.append(_make_sample(block, pick))
    return out


@dataclass
class LabelScatter:
    """Collects per-sample predictions into per-point labels of the whole cloud.

    A point predicted more than once keeps its last prediction.
    """

    size: int
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.labels = np.full(self.size, -1, dtype=np.int64)

    def add(self, block: Block, sample: Sample, predicted):
        self.labels[block.ids[sample.origin_ids]] = np.asarray(predicted, dtype=np.int64)

    def missing(self) -> np.ndarray:
        return np.flatnonzero(self.labels < 0)

    def result(self) -> np.ndarray:
        miss = self.missing()
        if miss.size:
            raise RuntimeError(f"{miss.size} points never received a prediction (first: {miss[0]})")
        return self.labels.copy()
