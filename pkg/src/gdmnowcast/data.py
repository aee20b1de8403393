"""Reporting triangles: ingestion, censoring at a present day, CSV formats.

Indexing is zero-based throughout the code: row ``t`` is the ``t``-th event
day after ``time_origin`` and column ``d`` holds counts reported with delay
``d + 1`` (column 0 = reported within the event's own reporting period).
A cell is visible at present day ``t0`` when ``t + d <= t0``.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "EventRecord",
    "ReportingTriangle",
    "CensoredTriangle",
    "AccessLoggingTriangle",
    "build_triangle",
    "censor_at",
    "cumulative_reported",
    "read_records",
    "write_long_csv",
]

LATE_POLICIES = ("fold_into_last", "drop")


@dataclass(frozen=True)
class EventRecord:
    region: str
    event_date: dt.date
    report_date: dt.date
    count: int | None  # None marks a lost report (cell treated as latent)

    @property
    def delay(self) -> int:
        """One-based delay: same-period reports have delay 1."""
        return (self.report_date - self.event_date).days + 1


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ReportingTriangle:
    """Counts ``z[t, s, d]`` with totals ``y[t, s] = z[t, s, :].sum()``."""

    z: np.ndarray
    time_origin: dt.date
    regions: tuple[str, ...]
    missing: np.ndarray | None = None

    def __post_init__(self):
        z = np.asarray(self.z)
        if z.ndim != 3:
            raise ValueError("z must have shape (T, S, D)")
        if np.any(z < 0):
            raise ValueError("counts must be non-negative")
        if z.shape[2] < 1:
            raise ValueError("d_max must be at least 1")
        if len(self.regions) != z.shape[1]:
            raise ValueError("one region label per column of z required")
        object.__setattr__(self, "z", _frozen(z.astype(np.int64)))
        miss = np.zeros(z.shape, dtype=bool) if self.missing is None else np.asarray(self.missing, dtype=bool)
        if miss.shape != z.shape:
            raise ValueError("missing mask must match z")
        object.__setattr__(self, "missing", _frozen(miss))
        object.__setattr__(self, "regions", tuple(self.regions))

    @property
    def y(self) -> np.ndarray:
        return self.z.sum(axis=2)

    @property
    def d_max(self) -> int:
        return self.z.shape[2]

    @property
    def n_times(self) -> int:
        return self.z.shape[0]

    @property
    def n_regions(self) -> int:
        return self.z.shape[1]

    @property
    def dates(self) -> list[dt.date]:
        return [self.time_origin + dt.timedelta(days=i) for i in range(self.n_times)]

    def to_records(self) -> list[EventRecord]:
        out = []
        for t, s, d in zip(*np.nonzero((self.z > 0) | self.missing)):
            ev = self.time_origin + dt.timedelta(days=int(t))
            rep = ev + dt.timedelta(days=int(d))
            cnt = None if self.missing[t, s, d] else int(self.z[t, s, d])
            out.append(EventRecord(self.regions[s], ev, rep, cnt))
        return out


def build_triangle(
    records: Iterable[EventRecord],
    d_max: int,
    late_policy: str = "fold_into_last",
    *,
    regions: Sequence[str] | None = None,
    time_origin: dt.date | None = None,
    n_times: int | None = None,
) -> ReportingTriangle:
    """Aggregate event/report records into a reporting triangle.

    Calendar gaps become zero rows. ``regions``/``time_origin``/``n_times``
    fix the grid explicitly; otherwise it is inferred from the records.
    """
    records = list(records)
    if d_max < 1:
        raise ValueError("d_max must be >= 1")
    if late_policy not in LATE_POLICIES:
        raise ValueError(f"late_policy must be one of {LATE_POLICIES}")
    for i, r in enumerate(records):
        if r.report_date < r.event_date:
            raise ValueError(f"record {i}: report_date {r.report_date} precedes event_date {r.event_date}")
        if r.count is not None and r.count < 0:
            raise ValueError(f"record {i}: negative count {r.count}")
    if not records and (regions is None or n_times is None):
        raise ValueError("an empty record list needs an explicit grid (regions and n_times)")

    if regions is None:
        regions = sorted({r.region for r in records})
    regions = tuple(regions)
    index = {name: i for i, name in enumerate(regions)}
    if time_origin is None:
        time_origin = min(r.event_date for r in records) if records else dt.date(1970, 1, 1)
    if n_times is None:
        n_times = (max(r.event_date for r in records) - time_origin).days + 1

    z = np.zeros((n_times, len(regions), d_max), dtype=np.int64)
    missing = np.zeros(z.shape, dtype=bool)
    for i, r in enumerate(records):
        if r.region not in index:
            raise ValueError(f"record {i}: unknown region {r.region!r}")
        t = (r.event_date - time_origin).days
        if not 0 <= t < n_times:
            raise ValueError(f"record {i}: event_date {r.event_date} outside the time grid")
        d = r.delay - 1
        if d >= d_max:
            if late_policy == "drop":
                continue
            d = d_max - 1
        if r.count is None:
            missing[t, index[r.region], d] = True
        else:
            z[t, index[r.region], d] += r.count
    return ReportingTriangle(z, time_origin, regions, missing)


@dataclass(frozen=True)
class CensoredTriangle:
    """A triangle as it looked at present day ``t0`` (zero-based row index).

    Model code must read counts through :meth:`visible_z` and the derived
    helpers, never through ``triangle.z``; :class:`AccessLoggingTriangle`
    relies on that to audit for look-ahead.
    """

    triangle: ReportingTriangle
    t0: int
    observed: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        T, D = self.triangle.n_times, self.triangle.d_max
        if not 0 <= self.t0 < T:
            raise ValueError(f"t0 must lie in [0, {T - 1}], got {self.t0}")
        t = np.arange(T)[:, None, None]
        d = np.arange(D)[None, None, :]
        obs = np.broadcast_to(t + d <= self.t0, (T, self.triangle.n_regions, D))
        object.__setattr__(self, "observed", _frozen(obs))

    # geometry -----------------------------------------------------------
    @property
    def d_max(self) -> int:
        return self.triangle.d_max

    @property
    def n_regions(self) -> int:
        return self.triangle.n_regions

    @property
    def regions(self) -> tuple[str, ...]:
        return self.triangle.regions

    @property
    def time_origin(self) -> dt.date:
        return self.triangle.time_origin

    @property
    def n_rows(self) -> int:
        """Rows up to and including the present day."""
        return self.t0 + 1

    @property
    def missing(self) -> np.ndarray:
        return self.triangle.missing

    @property
    def visible(self) -> np.ndarray:
        return self.observed & ~self.triangle.missing

    @property
    def fully_observed(self) -> np.ndarray:
        """(T, S): every delay reported by t0 and no lost cells."""
        T = self.triangle.n_times
        done = (np.arange(T) + self.d_max - 1 <= self.t0)[:, None]
        return done & ~self.triangle.missing.any(axis=2)

    def n_visible_delays(self) -> np.ndarray:
        """(T, S) number of delay columns reported by t0 (ignoring lost cells)."""
        T = self.triangle.n_times
        n = np.clip(self.t0 - np.arange(T) + 1, 0, self.d_max)
        return np.broadcast_to(n[:, None], (T, self.n_regions)).copy()

    # data access ----------------------------------------------------------
    def _read(self, mask: np.ndarray) -> np.ndarray:
        return self.triangle.z[mask]

    def visible_z(self) -> np.ndarray:
        """(T, S, D) counts with invisible and lost cells set to zero."""
        mask = self.visible
        out = np.zeros(mask.shape, dtype=np.int64)
        out[mask] = self._read(mask)
        return out

    def partial_sums(self) -> np.ndarray:
        return self.visible_z().sum(axis=2)

    def observed_totals(self) -> np.ndarray:
        """(T, S) totals where fully observed, -1 elsewhere."""
        return np.where(self.fully_observed, self.partial_sums(), -1)


def censor_at(triangle: ReportingTriangle, t0: int) -> CensoredTriangle:
    return CensoredTriangle(triangle, int(t0))


def cumulative_reported(ct: CensoredTriangle, t: int, s: int) -> np.ndarray:
    """Running sums of the visible delays of row ``(t, s)``."""
    if not (0 <= t < ct.triangle.n_times and 0 <= s < ct.n_regions):
        raise IndexError(f"row ({t}, {s}) outside the triangle")
    n = int(ct.n_visible_delays()[t, s])
    return np.cumsum(ct.visible_z()[t, s, :n])


class _LoggedTriangleView:
    """Stands in for ``ReportingTriangle``; any raw count access is logged as a full read."""

    def __init__(self, owner: AccessLoggingTriangle, inner: ReportingTriangle):
        self._owner = owner
        self._inner = inner

    @property
    def z(self):
        self._owner._log_mask(np.ones(self._inner.z.shape, dtype=bool))
        return self._inner.z

    @property
    def y(self):
        self._owner._log_mask(np.ones(self._inner.z.shape, dtype=bool))
        return self._inner.y

    def __getattr__(self, name):
        return getattr(self._inner, name)


class AccessLoggingTriangle(CensoredTriangle):
    """Censored triangle that records every cell whose count is read."""

    def __init__(self, triangle: ReportingTriangle, t0: int):
        super().__init__(triangle, t0)
        object.__setattr__(self, "_reads", np.zeros(triangle.z.shape, dtype=np.int64))

    def __getattribute__(self, name):
        if name == "triangle":
            inner = object.__getattribute__(self, "__dict__")["triangle"]
            return _LoggedTriangleView(self, inner)
        return object.__getattribute__(self, name)

    def _log_mask(self, mask):
        self._reads[mask] += 1

    def _read(self, mask):
        self._log_mask(mask)
        inner = object.__getattribute__(self, "__dict__")["triangle"]
        return inner.z[mask]

    @property
    def reads(self) -> np.ndarray:
        return self._reads.copy()

    def leaked_cells(self) -> np.ndarray:
        """Indices ``(t, s, d)`` read although invisible at t0."""
        T, S, D = self._reads.shape
        t = np.arange(T)[:, None, None]
        d = np.arange(D)[None, None, :]
        future = np.broadcast_to(t + d > self.t0, (T, S, D))
        return np.argwhere((self._reads > 0) & future)


# ---------------------------------------------------------------------------
# delimited text
# ---------------------------------------------------------------------------


def _parse_count(text: str) -> int | None:
    text = text.strip()
    if text == "" or text.upper() in {"NA", "NAN", "NULL"}:
        return None
    return int(text)


def read_records(path: str | Path) -> list[EventRecord]:
    """Read long (``region,event_date,report_date,count``) or wide (``region,event_date,d1..dK``) files."""
    path = Path(path)
    with path.open(newline="") as fh:
        sample = fh.read(4096)
        fh.seek(0)
        try:
            dialect = csv.Sniffer().sniff(sample, delimiters=",;\t")
        except csv.Error:
            dialect = csv.excel
        reader = csv.reader(fh, dialect)
        header = [h.strip().lower() for h in next(reader)]
        rows = list(reader)
    if header[:2] != ["region", "event_date"]:
        raise ValueError(f"{path}: header must start with region,event_date")
    records = []
    if header[2:4] == ["report_date", "count"]:
        for line, row in enumerate(rows, start=2):
            if not row:
                continue
            try:
                records.append(
                    EventRecord(row[0].strip(), dt.date.fromisoformat(row[1].strip()),
                                dt.date.fromisoformat(row[2].strip()), _parse_count(row[3]))
                )
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{line}: {exc}") from exc
        return records
    delays = header[2:]
    if not delays or any(h != f"d{i + 1}" for i, h in enumerate(delays)):
        raise ValueError(f"{path}: unrecognised header {header}")
    for line, row in enumerate(rows, start=2):
        if not row:
            continue
        try:
            ev = dt.date.fromisoformat(row[1].strip())
            for i, cell in enumerate(row[2:2 + len(delays)]):
                cnt = _parse_count(cell)
                if cnt == 0:
                    continue
                records.append(EventRecord(row[0].strip(), ev, ev + dt.timedelta(days=i), cnt))
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{line}: {exc}") from exc
    return records


def write_long_csv(triangle: ReportingTriangle, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["region", "event_date", "report_date", "count"])
        for r in sorted(triangle.to_records(), key=lambda r: (r.event_date, r.region, r.report_date)):
            w.writerow([r.region, r.event_date.isoformat(), r.report_date.isoformat(),
                        "NA" if r.count is None else r.count])
