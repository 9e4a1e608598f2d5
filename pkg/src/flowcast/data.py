"""CSV ingestion, chronological splits, sliding windows and context tokens.

Channel independence: every variable of a multivariate series becomes its own
univariate instance stream; weights are shared across channels downstream.
Each window is z-scored by its own look-back statistics and the target is
normalized with those same statistics (never its own).

The validation/test segments include a look-back overlap into the preceding
split so their first target starts right at the boundary; window counts then
follow T_split - L - H + 1 with T_split the rows assigned to the split.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

STD_CLAMP = 1e-6
N_BINS = 16
TREND_CLASSES = 3
CONTEXT_VARIANTS = ("full", "no_domain", "no_statistics", "no_text")


@dataclass
class Dataset:
    name: str
    values: np.ndarray                     # (T, D) float64, NaN-free
    frequency: str = ""
    timestamps: list[str] | None = None
    n_dropped_rows: int = 0

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


@dataclass
class WindowPair:
    x_hist: np.ndarray                     # (L,) normalized look-back
    y_true: np.ndarray                     # (H,) normalized with look-back stats
    mean: float
    std: float
    context_tokens: np.ndarray             # (M,) int ids
    dataset_id: int
    channel: int
    origin: int                            # row index of the first look-back value
    std_clamped: bool = False

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values) * self.std + self.mean


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_csv(path, name: str | None = None) -> Dataset:
    """Parse a comma-separated numeric matrix.

    An optional header row and an optional leading timestamp column are
    auto-detected (non-numeric first column).  Rows containing NaN are dropped
    and counted; ragged rows are an error naming the line.
    """
    rows: list[list[str]] = []
    try:
        with open(path, newline="") as fh:
            for line in csv.reader(fh):
                if line and any(cell.strip() for cell in line):
                    rows.append([cell.strip() for cell in line])
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if not rows:
        raise DataError(f"{path}: empty file")

    header = not all(_is_float(c) for c in rows[0])
    data_rows = rows[1:] if header else rows
    if not data_rows:
        raise DataError(f"{path}: no data rows below header")
    first_line = 2 if header else 1

    width = len(data_rows[0])
    for i, row in enumerate(data_rows):
        if len(row) != width:
            raise DataError(
                f"{path}: line {first_line + i}: expected {width} columns, got {len(row)}")

    ts_col = not all(_is_float(r[0]) for r in data_rows)
    start = 1 if ts_col else 0
    if width - start < 1:
        raise DataError(f"{path}: no numeric columns")

    timestamps = [r[0] for r in data_rows] if ts_col else None
    values = np.empty((len(data_rows), width - start))
    for i, row in enumerate(data_rows):
        for j, cell in enumerate(row[start:]):
            if not _is_float(cell):
                raise DataError(
                    f"{path}: line {first_line + i}: non-numeric value {cell!r}")
            values[i, j] = float(cell)

    keep = ~np.isnan(values).any(axis=1)
    dropped = int((~keep).sum())
    if dropped:
        values = values[keep]
        if timestamps is not None:
            timestamps = [t for t, k in zip(timestamps, keep) if k]
    if values.shape[0] == 0:
        raise DataError(f"{path}: all rows contained NaN")
    return Dataset(name=name or os.path.splitext(os.path.basename(str(path)))[0],
                   values=values, timestamps=timestamps, n_dropped_rows=dropped)


@dataclass
class Split:
    """Row segments per split; val/test carry an L-row look-back overlap."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    look_back: int
    horizon: int

    def window_count(self, part: str, stride: int = 1) -> int:
        seg = getattr(self, part)
        n = seg.shape[0] - self.look_back - self.horizon + 1
        if n <= 0:
            return 0
        return (n - 1) // stride + 1


def split(dataset: Dataset, look_back: int, horizon: int,
          mode=("ratio", (0.7, 0.1, 0.2))) -> Split:
    """Chronological split, never shuffled.

    mode ("ratio", (a, b, c)): rows are partitioned a/b/c in order.
    mode ("counts", (n_tr, n_va, n_te)): segments are sized so each split
    yields exactly that many stride-1 windows per channel.
    """
    T = dataset.length
    L, H = look_back, horizon
    kind, spec = mode
    if kind == "ratio":
        a, b, c = spec
        if min(a, b, c) < 0 or a + b + c > 1 + 1e-9:
            raise ConfigError(f"bad split ratios {spec}")
        c1 = int(round(T * a))
        c2 = int(round(T * (a + b)))
        c3 = int(round(T * (a + b + c)))
        bounds = [(0, c1), (c1 - L, c2), (c2 - L, c3)]
    elif kind == "counts":
        n_tr, n_va, n_te = spec
        c1 = n_tr + L + H - 1
        c2 = c1 + (n_va + H - 1 if n_va else 0)
        c3 = c2 + (n_te + H - 1 if n_te else 0)
        if c3 > T:
            raise DataError(
                f"dataset {dataset.name}: {T} rows cannot host counts {spec} "
                f"(needs {c3})")
        bounds = [(0, c1), (c1 - L, c2), (c2 - L, c3)]
    else:
        raise ConfigError(f"unknown split mode {kind!r}")

    parts = []
    names = ("train", "val", "test")
    want = [s > 0 for s in (spec if kind == "counts" else spec)]
    for (lo, hi), nm, w in zip(bounds, names, want):
        lo = max(lo, 0)
        seg = dataset.values[lo:hi]
        if w and seg.shape[0] - L - H + 1 < 1:
            raise DataError(
                f"dataset {dataset.name}: {nm} split too short for one window "
                f"({seg.shape[0]} rows, need {L + H})")
        parts.append(seg)
    return Split(train=parts[0], val=parts[1], test=parts[2],
                 look_back=L, horizon=H)


class ContextTokenizer:
    """Compact context tokens: [dataset, mean, std, min, max, trend].

    Statistic bins are equal-probability (quantile) bins fit on training
    windows only.  The vocabulary is laid out as
    [dataset ids | 4 x N_BINS statistic bins | 3 trend classes] so pooled
    training shares one embedding table with per-dataset id offsets.
    """

    def __init__(self, n_datasets: int = 1, variant: str = "full"):
        if variant not in CONTEXT_VARIANTS:
            raise ConfigError(f"unknown context variant {variant!r}")
        self.n_datasets = n_datasets
        self.variant = variant
        self.edges: dict[str, np.ndarray] | None = None

    # vocabulary layout
    @property
    def vocab_size(self) -> int:
        return self.n_datasets + 4 * N_BINS + TREND_CLASSES

    @property
    def n_tokens(self) -> int:
        return {"full": 6, "no_domain": 5, "no_statistics": 1, "no_text": 0}[self.variant]

    def _offset(self, stat: str) -> int:
        idx = ("mean", "std", "min", "max").index(stat)
        return self.n_datasets + idx * N_BINS

    def fit(self, look_backs: np.ndarray) -> "ContextTokenizer":
        """``look_backs``: (n_windows, L) raw (un-normalized) training look-backs."""
        lb = np.asarray(look_backs, dtype=np.float64)
        if lb.ndim != 2 or lb.shape[0] < 1:
            raise DataError("ContextTokenizer.fit needs a (n_windows, L) matrix")
        qs = np.arange(1, N_BINS) / N_BINS
        stats = {"mean": lb.mean(axis=1), "std": lb.std(axis=1),
                 "min": lb.min(axis=1), "max": lb.max(axis=1)}
        self.edges = {k: np.quantile(v, qs) for k, v in stats.items()}
        return self

    def tokens(self, raw_look_back: np.ndarray, dataset_id: int) -> np.ndarray:
        if self.variant == "no_text":
            return np.zeros(0, dtype=np.int64)
        if self.edges is None:
            raise ConfigError("ContextTokenizer: bins not fitted")
        if not 0 <= dataset_id < self.n_datasets:
            raise ConfigError(f"dataset_id {dataset_id} outside vocab ({self.n_datasets})")
        x = np.asarray(raw_look_back, dtype=np.float64)
        out = []
        if self.variant != "no_domain":
            out.append(dataset_id)
        if self.variant in ("full", "no_domain"):
            for stat, val in (("mean", x.mean()), ("std", x.std()),
                              ("min", x.min()), ("max", x.max())):
                out.append(self._offset(stat) + int(np.searchsorted(self.edges[stat], val)))
            trend = np.sign(x[-1] - x[0])
            out.append(self.n_datasets + 4 * N_BINS + int(trend) + 1)
        return np.asarray(out, dtype=np.int64)

    def state_arrays(self) -> dict[str, np.ndarray]:
        if self.edges is None:
            return {}
        return {f"ctx.{k}_edges": v for k, v in self.edges.items()}

    @classmethod
    def from_state(cls, n_datasets: int, variant: str,
                   arrays: dict[str, np.ndarray]) -> "ContextTokenizer":
        tok = cls(n_datasets, variant)
        if arrays:
            tok.edges = {k.split(".")[1].rsplit("_", 1)[0]: np.asarray(v)
                         for k, v in arrays.items()}
        return tok


def make_windows(segment: np.ndarray, look_back: int, horizon: int,
                 stride: int = 1, channel_independent: bool = True,
                 tokenizer: ContextTokenizer | None = None,
                 dataset_id: int = 0) -> list[WindowPair]:
    """Slide (L, H) windows over a (T, D) row segment, channel by channel."""
    if look_back < 1 or horizon < 1 or stride < 1:
        raise ConfigError("look_back, horizon and stride must be >= 1")
    seg = np.asarray(segment, dtype=np.float64)
    if seg.ndim == 1:
        seg = seg[:, None]
    T, D = seg.shape
    if not channel_independent and D != 1:
        raise ConfigError("only channel-independent windowing is supported")
    out: list[WindowPair] = []
    L, H = look_back, horizon
    for d in range(D):
        col = seg[:, d]
        for o in range(0, T - L - H + 1, stride):
            raw_x = col[o:o + L]
            raw_y = col[o + L:o + L + H]
            m = raw_x.mean()
            s = raw_x.std()
            clamped = s < STD_CLAMP
            s = max(s, STD_CLAMP)
            toks = (tokenizer.tokens(raw_x, dataset_id) if tokenizer is not None
                    else np.zeros(0, dtype=np.int64))
            out.append(WindowPair(
                x_hist=(raw_x - m) / s, y_true=(raw_y - m) / s,
                mean=float(m), std=float(s), context_tokens=toks,
                dataset_id=dataset_id, channel=d, origin=o,
                std_clamped=bool(clamped)))
    return out


def synth_generate(kind: str, n: int, noise_std: float = 0.0,
                   seed: int = 0) -> Dataset:
    """Seeded synthetic series: sine (period 24), AR(1) with coefficient 0.9,
    or sine plus a 0.01/step linear trend."""
    rng = np.random.default_rng(seed)
    i = np.arange(n, dtype=np.float64)

    def noise():
        return rng.normal(0.0, noise_std, n) if noise_std > 0 else np.zeros(n)

    if kind == "sine":
        x = np.sin(2 * np.pi * i / 24.0) + noise()
    elif kind == "ar1":
        shocks = noise()
        x = np.empty(n)
        prev = 0.0
        for j in range(n):
            prev = 0.9 * prev + shocks[j]
            x[j] = prev
    elif kind == "trend_sine":
        x = 0.01 * i + np.sin(2 * np.pi * i / 24.0) + noise()
    else:
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    return Dataset(name=f"synth_{kind}", values=x[:, None])
