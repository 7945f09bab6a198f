"""Speed series ingestion, normalisation, windowing and a synthetic diffusion generator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import resources
from typing import Sequence

import numpy as np

from .graph import WeightedDigraph, build_adjacency, out_transition, read_distances, read_node_ids
from .sparse import spmm, transpose

STEP_SECONDS = 300
DAY_STEPS = 288
DEFAULT_START = 1330560000  # 2012-03-01T00:00:00Z


class DataError(ValueError):
    pass


@dataclass
class SpeedSeries:
    timestamps: np.ndarray  # (steps,) int64 epoch seconds
    values: np.ndarray  # (steps, N)
    mask: np.ndarray  # (steps, N) bool, True = observed
    node_ids: tuple[str, ...]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.node_ids = tuple(self.node_ids)
        if self.values.shape != self.mask.shape or self.values.shape != (len(self.timestamps), len(self.node_ids)):
            raise DataError(
                f"inconsistent shapes: timestamps {self.timestamps.shape}, values {self.values.shape}, "
                f"mask {self.mask.shape}, {len(self.node_ids)} nodes"
            )
        if np.any(np.diff(self.timestamps) <= 0):
            raise DataError("timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise DataError("observed values must be finite")

    @property
    def steps(self) -> int:
        return len(self.timestamps)

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def slice(self, span: range) -> SpeedSeries:
        s = slice(span.start, span.stop)
        return SpeedSeries(self.timestamps[s], self.values[s], self.mask[s], self.node_ids)


def parse_time(text: str) -> int:
    dt = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_time(ts: int) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S")


def load_series(path, missing_value: float | None = 0.0) -> SpeedSeries:
    """Read ``timestamp,<id_1>,...,<id_N>`` CSV.

    Cells equal to ``missing_value``, empty cells and ``nan`` are masked out.
    """
    times, rows, masks = [], [], []
    with open(path) as fh:
        header = fh.readline().strip()
        if not header:
            raise DataError(f"{path}: empty file")
        cols = [c.strip() for c in header.split(",")]
        if cols[0] != "timestamp" or len(cols) < 2:
            raise DataError(f"{path}:1: header must be 'timestamp,<id_1>,...'")
        node_ids = cols[1:]
        n = len(node_ids)
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != n + 1:
                raise DataError(f"{path}:{lineno}: expected {n + 1} fields, got {len(parts)}")
            try:
                ts = parse_time(parts[0])
            except ValueError:
                raise DataError(f"{path}:{lineno}: unparsable timestamp {parts[0]!r}") from None
            if times and ts <= times[-1]:
                raise DataError(f"{path}:{lineno}: timestamps must be strictly increasing")
            vals = np.empty(n)
            ok = np.ones(n, dtype=bool)
            for j, cell in enumerate(parts[1:]):
                cell = cell.strip()
                if not cell:
                    vals[j], ok[j] = 0.0, False
                    continue
                try:
                    vals[j] = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad value {cell!r}") from None
                if not math.isfinite(vals[j]) or (missing_value is not None and vals[j] == missing_value):
                    ok[j] = False
            vals[~ok] = 0.0
            times.append(ts)
            rows.append(vals)
            masks.append(ok)
    if not times:
        raise DataError(f"{path}: no data rows")
    return SpeedSeries(np.array(times), np.array(rows), np.array(masks), node_ids)


def write_series(path, series: SpeedSeries, missing_value: float = 0.0) -> None:
    with open(path, "w") as fh:
        fh.write("timestamp," + ",".join(series.node_ids) + "\n")
        for ts, vals, ok in zip(series.timestamps, series.values, series.mask):
            cells = [repr(float(v)) if m else repr(float(missing_value)) for v, m in zip(vals, ok)]
            fh.write(format_time(ts) + "," + ",".join(cells) + "\n")


# ----------------------------------------------------------------------------
# normalisation and splitting


@dataclass(frozen=True)
class ZScore:
    mean: float
    std: float

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def fit_zscore(series: SpeedSeries, train_range: range) -> ZScore:
    """Population mean/std over observed entries inside ``train_range`` only."""
    if len(train_range) == 0:
        raise DataError("training range is empty")
    s = slice(train_range.start, train_range.stop)
    obs = series.values[s][series.mask[s]]
    if obs.size == 0:
        raise DataError("no observed entries in the training range")
    std = float(np.std(obs))
    if std == 0.0:
        raise DataError("training data has zero variance")
    return ZScore(float(np.mean(obs)), std)


def chronological_split(n_steps: int, fractions: Sequence[float] = (0.7, 0.1, 0.2)) -> tuple[range, range, range]:
    """Contiguous train/val/test ranges; the first two are floor-rounded, the remainder goes to test."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    # The epsilon guards products like 0.7 * 10 landing just below an integer.
    n_train = int(math.floor(fractions[0] * n_steps + 1e-9))
    n_val = int(math.floor(fractions[1] * n_steps + 1e-9))
    return range(0, n_train), range(n_train, n_train + n_val), range(n_train + n_val, n_steps)


# ----------------------------------------------------------------------------
# windows


@dataclass
class ForecastSample:
    inputs: np.ndarray  # (T', N, P)
    targets: np.ndarray  # (T, N, 1)
    target_mask: np.ndarray  # (T, N)


class Windows:
    """Stride-1 forecast windows stored as stacked arrays.

    Indexing yields :class:`ForecastSample`; the models consume the stacked
    arrays directly.  ``aux`` carries the exogenous input channels (time of
    day) of every target step, used when predictions are fed back.
    """

    def __init__(self, inputs, targets, target_mask, aux, starts):
        self.inputs = inputs
        self.targets = targets
        self.target_mask = target_mask
        self.aux = aux
        self.starts = starts

    def __len__(self) -> int:
        return len(self.starts)

    def __getitem__(self, i) -> ForecastSample:
        return ForecastSample(self.inputs[i], self.targets[i], self.target_mask[i])

    @property
    def history(self) -> int:
        return self.inputs.shape[1]

    @property
    def horizon(self) -> int:
        return self.targets.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.inputs.shape[2]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[3]

    def subset(self, idx) -> Windows:
        idx = np.asarray(idx, dtype=np.int64)
        return Windows(self.inputs[idx], self.targets[idx], self.target_mask[idx], self.aux[idx], self.starts[idx])

    def batches(self, batch_size: int, order=None):
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for lo in range(0, len(order), batch_size):
            yield self.subset(order[lo : lo + batch_size])


def time_of_day(timestamps) -> np.ndarray:
    return (np.asarray(timestamps, dtype=np.int64) % 86400) / 86400.0


def make_windows(
    series: SpeedSeries,
    history: int,
    horizon: int,
    span: range | None = None,
    zscore: ZScore | None = None,
    time_of_day_feature: bool = False,
) -> Windows:
    """All windows whose inputs and targets lie inside ``span``.

    Yields ``len(span) - history - horizon + 1`` samples (none if the span is
    too short).  With ``zscore`` the speeds are normalised and unobserved
    input cells are set to 0 (the normalised mean).
    """
    if history < 1 or horizon < 1:
        raise DataError("history and horizon must be >= 1")
    span = range(series.steps) if span is None else span
    vals = series.values[span.start : span.stop]
    mask = series.mask[span.start : span.stop]
    ts = series.timestamps[span.start : span.stop]
    if zscore is not None:
        vals = zscore.apply(vals)
    vals = np.where(mask, vals, 0.0)
    n = series.n_nodes
    feats = vals[:, :, None]
    if time_of_day_feature:
        tod = np.broadcast_to(time_of_day(ts)[:, None, None], (len(ts), n, 1))
        feats = np.concatenate([feats, tod], axis=2)
    count = max(0, len(ts) - history - horizon + 1)
    p = feats.shape[2]
    idx_in = np.arange(count)[:, None] + np.arange(history)[None, :]
    idx_out = np.arange(count)[:, None] + history + np.arange(horizon)[None, :]
    if count == 0:
        return Windows(
            np.zeros((0, history, n, p)),
            np.zeros((0, horizon, n, 1)),
            np.zeros((0, horizon, n), dtype=bool),
            np.zeros((0, horizon, n, p - 1)),
            np.zeros(0, dtype=np.int64),
        )
    return Windows(
        feats[idx_in],
        vals[idx_out][..., None],
        mask[idx_out],
        feats[idx_out][..., 1:],
        np.arange(count, dtype=np.int64) + span.start,
    )


def write_windows(path, windows: Windows) -> None:
    """Debug dump: one ``sample,part,step,node,channel,value`` record per cell."""
    with open(path, "w") as fh:
        fh.write("sample,part,step,node,channel,value\n")
        for s in range(len(windows)):
            for t, frame in enumerate(windows.inputs[s]):
                for node, row in enumerate(frame):
                    for c, v in enumerate(row):
                        fh.write(f"{s},input,{t},{node},{c},{float(v)!r}\n")
            for t, frame in enumerate(windows.targets[s]):
                for node, row in enumerate(frame):
                    flag = "target" if windows.target_mask[s, t, node] else "target_masked"
                    fh.write(f"{s},{flag},{t},{node},0,{float(row[0])!r}\n")


# ----------------------------------------------------------------------------
# synthetic data


def seasonal_forcing(n_nodes: int, steps: int, period: int = DAY_STEPS) -> np.ndarray:
    """Fixed daily speed profile per node, shape ``(steps, n_nodes)``; node phases are staggered."""
    t = np.arange(steps)[:, None]
    phase = 2.0 * np.pi * np.arange(n_nodes)[None, :] / (8 * n_nodes)
    w = 2.0 * np.pi * t / period
    return 48.0 + 28.0 * np.sin(w + phase) + 6.0 * np.sin(2.0 * w + 2.0 * phase)


def synth_diffusion(
    graph: WeightedDigraph,
    steps: int,
    noise_std: float = 1.0,
    seed: int = 0,
    lam: float = 0.9,
    period: int = DAY_STEPS,
    start: int = DEFAULT_START,
) -> SpeedSeries:
    """Speeds following ``x(t+1) = lam P_O^T x(t) + (1 - lam) s(t+1) + noise``, clipped to ``[0, 80]``.

    ``x(0) = s(0)``; ``s`` is :func:`seasonal_forcing`.  Deterministic per seed.
    """
    if steps < 1:
        raise DataError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    forcing = seasonal_forcing(graph.n, steps, period)
    pt = transpose(out_transition(graph))
    x = np.empty((steps, graph.n))
    x[0] = np.clip(forcing[0], 0.0, 80.0)
    noise = rng.normal(0.0, noise_std, size=(steps, graph.n)) if noise_std > 0 else np.zeros((steps, graph.n))
    for t in range(steps - 1):
        nxt = lam * spmm(pt, x[t]) + (1.0 - lam) * forcing[t + 1] + noise[t + 1]
        x[t + 1] = np.clip(nxt, 0.0, 80.0)
    ts = start + STEP_SECONDS * np.arange(steps, dtype=np.int64)
    return SpeedSeries(ts, x, np.ones_like(x, dtype=bool), graph.node_ids)


BENCHMARK_KAPPA = 2.5


def benchmark_graph() -> WeightedDigraph:
    """The bundled 8-sensor directed ring road."""
    pkg = resources.files("dcrnn") / "resources"
    with resources.as_file(pkg / "bench_distances.csv") as dpath, resources.as_file(pkg / "bench_nodes.txt") as npath:
        return build_adjacency(read_distances(dpath), read_node_ids(npath), BENCHMARK_KAPPA)


def benchmark_series(seed: int = 7, steps: int = 2000) -> SpeedSeries:
    return synth_diffusion(benchmark_graph(), steps, seed=seed)
