"""Masked error metrics, the Historical Average baseline and horizon reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEEK_STEPS = 2016  # 7 days of 5-minute bins
DEFAULT_HORIZONS = (3, 6, 12)
METRIC_NAMES = ("MAE", "RMSE", "MAPE")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MaskedPair:
    """Truth and prediction arrays plus an observation mask (True = scored)."""

    truth: np.ndarray
    prediction: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.truth, dtype=np.float64)
        p = np.asarray(self.prediction, dtype=np.float64)
        m = np.asarray(self.mask, dtype=bool)
        if t.shape != p.shape or t.shape != m.shape:
            raise MetricError(f"shape mismatch: truth {t.shape}, prediction {p.shape}, mask {m.shape}")
        object.__setattr__(self, "truth", t)
        object.__setattr__(self, "prediction", p)
        object.__setattr__(self, "mask", m)

    @classmethod
    def full(cls, truth, prediction) -> MaskedPair:
        t = np.asarray(truth, dtype=np.float64)
        return cls(t, prediction, np.ones(t.shape, dtype=bool))

    def observed(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.mask.any():
            raise MetricError("mask selects no entries")
        return self.truth[self.mask], self.prediction[self.mask]


def masked_mae(p: MaskedPair) -> float:
    t, y = p.observed()
    return float(np.mean(np.abs(t - y)))


def masked_rmse(p: MaskedPair) -> float:
    t, y = p.observed()
    return float(np.sqrt(np.mean((t - y) ** 2)))


def masked_mape(p: MaskedPair) -> float:
    """Mean absolute percentage error as a fraction (0.5 == 50%)."""
    t, y = p.observed()
    if np.any(t == 0):
        raise MetricError("truth is zero at an observed entry; mask it before computing MAPE")
    return float(np.mean(np.abs((t - y) / t)))


METRICS = {"MAE": masked_mae, "RMSE": masked_rmse, "MAPE": masked_mape}


def historical_average(values, mask, eval_range, period: int = WEEK_STEPS, lookback: int = 4):
    """Seasonal mean of the ``lookback`` previous same-phase observations.

    ``values``/``mask`` are ``(steps, N)``.  Returns ``(pred, pred_mask)`` for
    the rows of ``eval_range``; entries with no prior observation are left
    unpredicted (mask False, value 0).
    """
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if values.shape != mask.shape or values.ndim != 2:
        raise MetricError(f"values {values.shape} and mask {mask.shape} must be equal 2-D shapes")
    if period < 1 or lookback < 1:
        raise MetricError("period and lookback must be positive")
    rows = np.arange(values.shape[0])[eval_range]
    total = np.zeros((len(rows), values.shape[1]))
    count = np.zeros((len(rows), values.shape[1]))
    for j in range(1, lookback + 1):
        src = rows - j * period
        ok = src >= 0
        m = np.zeros(count.shape, dtype=bool)
        v = np.zeros(count.shape)
        m[ok], v[ok] = mask[src[ok]], values[src[ok]]
        total += np.where(m, v, 0.0)
        count += m
    pred_mask = count > 0
    pred = np.divide(total, count, out=np.zeros_like(total), where=pred_mask)
    return pred, pred_mask


def horizon_report(truth, prediction, mask, horizons=DEFAULT_HORIZONS, step_minutes: int = 5) -> list[tuple[int, str, float]]:
    """Metrics per horizon for ``(S, T, N)`` arrays.

    Horizon ``h`` (in steps, 1-based) scores index ``h - 1`` of the T axis.
    MAPE additionally excludes zero truth values.
    """
    truth = np.asarray(truth, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if truth.ndim != 3:
        raise MetricError(f"expected (samples, horizon, nodes) arrays, got {truth.shape}")
    records = []
    for h in horizons:
        if not 1 <= h <= truth.shape[1]:
            raise MetricError(f"horizon {h} outside 1..{truth.shape[1]}")
        t, y, m = truth[:, h - 1], prediction[:, h - 1], mask[:, h - 1]
        pair = MaskedPair(t, y, m)
        records.append((h * step_minutes, "MAE", masked_mae(pair)))
        records.append((h * step_minutes, "RMSE", masked_rmse(pair)))
        records.append((h * step_minutes, "MAPE", masked_mape(MaskedPair(t, y, m & (t != 0)))))
    return records


def format_report(records) -> str:
    lines = ["horizon_minutes,metric,value"]
    lines += [f"{minutes},{name},{value!r}" for minutes, name, value in records]
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> list[tuple[int, str, float]]:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != "horizon_minutes,metric,value":
        raise MetricError("missing report header")
    out = []
    for ln in lines[1:]:
        minutes, name, value = ln.split(",")
        out.append((int(minutes), name, float(value)))
    return out
