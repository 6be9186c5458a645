"""Training metrics: per-iteration records, window/round aggregation and CSV I/O."""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

RAW_COLUMNS = ("round", "iter", "rate", "viol_lo", "viol_hi", "c", "power", "h")
SERIES = ("rate", "viol_lo", "viol_hi", "c", "power", "h")


class MisalignedRoundsError(ValueError):
    pass


class MetricRecord(NamedTuple):
    round: int
    iteration: int
    rate: float
    inst_violation: tuple
    avg_constraint: float
    executed_power: float
    channel: float


@dataclass
class RoundMetrics:
    """Column store for one round; row ``i`` is iteration ``iteration[i]``."""

    round_id: int
    iteration: np.ndarray
    rate: np.ndarray
    viol: np.ndarray  # (T, n_inst), positive parts of g
    c: np.ndarray  # (T,), first average constraint
    power: np.ndarray
    h: np.ndarray

    @classmethod
    def empty(cls, round_id, n, n_inst=2):
        return cls(
            round_id,
            np.zeros(n, dtype=np.int64),
            np.zeros(n),
            np.zeros((n, n_inst)),
            np.zeros(n),
            np.zeros(n),
            np.zeros(n),
        )

    def __len__(self):
        return len(self.iteration)

    def set(self, i, t, info):
        self.iteration[i] = t
        self.rate[i] = info.rate
        self.viol[i] = info.inst_violation
        self.c[i] = np.asarray(info.avg_constraint).ravel()[0]
        self.power[i] = info.power
        self.h[i] = info.channel

    def columns(self):
        """Named series matching :data:`SERIES`."""
        return {
            "rate": self.rate,
            "viol_lo": self.viol[:, 0],
            "viol_hi": self.viol[:, 1],
            "c": self.c,
            "power": self.power,
            "h": self.h,
        }

    def records(self):
        for i in range(len(self)):
            yield MetricRecord(
                self.round_id, int(self.iteration[i]), float(self.rate[i]),
                tuple(float(v) for v in self.viol[i]), float(self.c[i]),
                float(self.power[i]), float(self.h[i]),
            )


class MetricsSink:
    """Collects finished rounds from concurrent workers, keyed by round id."""

    def __init__(self):
        self._lock = threading.Lock()
        self._rounds = {}

    def append(self, metrics):
        with self._lock:
            if metrics.round_id in self._rounds:
                raise ValueError(f"round {metrics.round_id} already recorded")
            self._rounds[metrics.round_id] = metrics

    def rounds(self):
        with self._lock:
            return [self._rounds[k] for k in sorted(self._rounds)]


def window_average(values, window):
    """Non-overlapping window means; a partial trailing window is dropped.

    >>> window_average([1, 2, 3, 4], 2)
    array([1.5, 3.5])
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    values = np.asarray(values, dtype=np.float64)
    n = len(values) // window
    return values[: n * window].reshape(n, window, *values.shape[1:]).mean(axis=1)


def windowed(metrics, window):
    """Window means of every series of a :class:`RoundMetrics`.

    Also returns ``iter_end``, the last iteration of each window.
    """
    out = {name: window_average(v, window) for name, v in metrics.columns().items()}
    n = len(metrics) // window
    out["iter_end"] = metrics.iteration[window - 1 :: window][:n]
    return out


def cross_round_average(series):
    """Pointwise mean and standard error across rounds.

    ``series`` is a sequence of equal-length 1-D arrays (one per round) or a
    mapping from round id to such arrays.
    """
    if isinstance(series, dict):
        items = sorted(series.items())
    else:
        items = list(enumerate(series))
    if not items:
        raise ValueError("no rounds to average")
    length = len(items[0][1])
    for rid, s in items:
        if len(s) != length:
            raise MisalignedRoundsError(
                f"round {rid} has {len(s)} points, expected {length}"
            )
    data = np.array([np.asarray(s, dtype=np.float64) for _, s in items])
    # centring on the first round makes identical rounds average exactly
    diff = data - data[0]
    shift = diff.mean(axis=0)
    mean = data[0] + shift
    if len(data) < 2:
        return mean, np.zeros_like(mean)
    var = np.sum((diff - shift) ** 2, axis=0) / (len(data) - 1)
    return mean, np.sqrt(var / len(data))


def aggregate(rounds, window):
    """Windowed, cross-round averaged table: ``{name: (mean, se)}`` plus ``iter_end``."""
    per_round = [windowed(r, window) for r in rounds]
    for w, r in zip(per_round, rounds):
        if not np.array_equal(w["iter_end"], per_round[0]["iter_end"]):
            raise MisalignedRoundsError(f"round {r.round_id} iterations do not align")
    table = {"iter_end": per_round[0]["iter_end"]}
    for name in SERIES:
        table[name] = cross_round_average({r.round_id: w[name] for r, w in zip(rounds, per_round)})
    return table


def _fmt(v):
    return repr(float(v))


def write_raw_csv(path, rounds):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RAW_COLUMNS)
        for r in rounds:
            cols = r.columns()
            for i in range(len(r)):
                w.writerow(
                    [r.round_id, int(r.iteration[i])] + [_fmt(cols[k][i]) for k in SERIES]
                )


def read_raw_csv(path):
    """Parse :func:`write_raw_csv` output back into :class:`RoundMetrics` objects."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != RAW_COLUMNS:
            raise ValueError(f"unexpected header {header}")
        rows = {}
        for row in reader:
            rows.setdefault(int(row[0]), []).append(row)
    out = []
    for rid in sorted(rows):
        arr = np.array([[float(v) for v in row[1:]] for row in rows[rid]])
        out.append(
            RoundMetrics(
                rid, arr[:, 0].astype(np.int64), arr[:, 1], arr[:, 2:4].copy(),
                arr[:, 4], arr[:, 5], arr[:, 6],
            )
        )
    return out


def write_windowed_csv(path, table):
    header = ["window", "iter_end"]
    for name in SERIES:
        header += [f"{name}_mean", f"{name}_se"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, it in enumerate(table["iter_end"]):
            row = [i, int(it)]
            for name in SERIES:
                mean, se = table[name]
                row += [_fmt(mean[i]), _fmt(se[i])]
            w.writerow(row)


def write_policy_curve_csv(path, h, optimal, learned=None):
    """``h, optimal[, learned]`` columns; ``learned`` may be None."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["h", "optimal"] + ([] if learned is None else ["learned"]))
        for i in range(len(h)):
            row = [_fmt(h[i]), _fmt(optimal[i])]
            if learned is not None:
                row.append(_fmt(learned[i]))
            w.writerow(row)


def settling_iteration(values, iter_end, target, rel_tol):
    """First ``iter_end`` after which every window stays within ``rel_tol`` of ``target``.

    Returns ``None`` if the last window is still outside the band.

    >>> settling_iteration([0.5, 0.99, 0.9, 0.98, 1.01], [10, 20, 30, 40, 50], 1.0, 0.05)
    40
    """
    values = np.asarray(values, dtype=np.float64)
    inside = np.abs(values - target) <= rel_tol * abs(target)
    if inside.size == 0 or not inside[-1]:
        return None
    outside = np.flatnonzero(~inside)
    first = 0 if outside.size == 0 else outside[-1] + 1
    return int(iter_end[first])
