"""Measurement-report records, CSV ingestion and trajectory segmentation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

MAX_ENTRIES = 7
DEFAULT_GAP_S = 3600.0

FIELDS_PER_SLOT = ("rnc", "cell", "rssi", "asu", "sig")
MR_HEADER = (
    ["timestamp", "device_id"]
    + [f"{name}{k}" for k in range(1, MAX_ENTRIES + 1) for name in FIELDS_PER_SLOT]
    + ["lon", "lat"]
)
STATION_HEADER = ["rnc", "cell", "lon", "lat"]


class MRFormatError(ValueError):
    """Raised for malformed MR or station files; carries the line number."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True, order=True)
class BaseStationId:
    rnc_id: int
    cell_id: int

    def __post_init__(self):
        if self.rnc_id < 0 or self.cell_id < 0:
            raise ValueError(f"negative station id {self.rnc_id}-{self.cell_id}")

    def __str__(self) -> str:
        return f"{self.rnc_id}-{self.cell_id}"

    @classmethod
    def parse(cls, text: str) -> "BaseStationId":
        rnc, cell = text.split("-")
        return cls(int(rnc), int(cell))


@dataclass(frozen=True)
class StationRecord:
    id: BaseStationId
    lon: float
    lat: float

    def __post_init__(self):
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} out of range for {self.id}")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} out of range for {self.id}")


@dataclass(frozen=True)
class NeighborEntry:
    station: Optional[BaseStationId]
    rssi: float
    asu_level: int
    signal_level: int


@dataclass(frozen=True)
class MRSample:
    timestamp: float
    device_id: str
    entries: tuple[NeighborEntry, ...]
    label: Optional[tuple[float, float]] = None  # (lon, lat)

    def __post_init__(self):
        if not 1 <= len(self.entries) <= MAX_ENTRIES:
            raise ValueError(f"MR sample needs 1..{MAX_ENTRIES} entries, got {len(self.entries)}")
        if self.entries[0].station is None:
            raise ValueError("serving station id missing")

    @property
    def serving(self) -> BaseStationId:
        return self.entries[0].station

    @property
    def labeled(self) -> bool:
        return self.label is not None


@dataclass(frozen=True)
class Trajectory:
    device_id: str
    times: tuple[float, ...]
    points: tuple[tuple[float, float], ...] = field(repr=False)

    def __len__(self) -> int:
        return len(self.points)


def sort_entries(entries: Iterable[NeighborEntry]) -> tuple[NeighborEntry, ...]:
    # sorted() is stable: equal rssi keeps input order
    return tuple(sorted(entries, key=lambda e: -e.rssi))


def _num(text: str, what: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise MRFormatError(f"non-numeric {what} {text!r}", line) from None
    if not math.isfinite(value):
        raise MRFormatError(f"non-finite {what} {text!r}", line)
    return value


def _int(text: str, what: str, line: int) -> int:
    value = _num(text, what, line)
    if value != int(value):
        raise MRFormatError(f"non-integer {what} {text!r}", line)
    return int(value)


def _parse_row(row: dict, line: int) -> MRSample:
    entries = []
    for k in range(1, MAX_ENTRIES + 1):
        rssi = row[f"rssi{k}"].strip()
        rnc = row[f"rnc{k}"].strip()
        cell = row[f"cell{k}"].strip()
        if not rssi:
            if rnc or cell:
                raise MRFormatError(f"slot {k} has a station id but no rssi", line)
            continue
        station = None
        if rnc or cell:
            if not (rnc and cell):
                raise MRFormatError(f"slot {k} has a partial station id", line)
            station = BaseStationId(_int(rnc, f"rnc{k}", line), _int(cell, f"cell{k}", line))
        entries.append(NeighborEntry(
            station=station,
            rssi=_num(rssi, f"rssi{k}", line),
            asu_level=_int(row[f"asu{k}"], f"asu{k}", line),
            signal_level=_int(row[f"sig{k}"], f"sig{k}", line),
        ))
    if not entries:
        raise MRFormatError("no neighbor entries", line)
    entries = sort_entries(entries)
    if entries[0].station is None:
        raise MRFormatError("missing serving-station id", line)
    lon, lat = row["lon"].strip(), row["lat"].strip()
    label = None
    if lon or lat:
        label = (_num(lon, "lon", line), _num(lat, "lat", line))
    return MRSample(
        timestamp=_num(row["timestamp"], "timestamp", line),
        device_id=row["device_id"],
        entries=entries,
        label=label,
    )


def parse_mr_csv(path) -> list[MRSample]:
    """Read an MR CSV file (header ``MR_HEADER``) into samples.

    Entries of each row are re-sorted by descending RSSI.  Every malformed row
    is collected and reported together in one ``MRFormatError``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    samples = []
    problems = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing = [h for h in MR_HEADER if h not in reader.fieldnames]
        if missing:
            raise MRFormatError(f"header lacks columns {missing}", 1)
        for line, row in enumerate(reader, start=2):
            try:
                samples.append(_parse_row(row, line))
            except MRFormatError as exc:
                problems.append(str(exc))
            except ValueError as exc:
                problems.append(f"line {line}: {exc}")
    if problems:
        raise MRFormatError("; ".join(problems))
    return samples


def _fmt(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def mr_row(sample: MRSample) -> list[str]:
    row = [_fmt(sample.timestamp), sample.device_id]
    for k in range(MAX_ENTRIES):
        if k < len(sample.entries):
            e = sample.entries[k]
            rnc = str(e.station.rnc_id) if e.station else ""
            cell = str(e.station.cell_id) if e.station else ""
            row += [rnc, cell, _fmt(e.rssi), str(e.asu_level), str(e.signal_level)]
        else:
            row += [""] * len(FIELDS_PER_SLOT)
    if sample.label is None:
        row += ["", ""]
    else:
        row += [repr(float(sample.label[0])), repr(float(sample.label[1]))]
    return row


def write_mr_csv(path, samples: Iterable[MRSample]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MR_HEADER)
        for s in samples:
            w.writerow(mr_row(s))


def parse_station_csv(path) -> dict[BaseStationId, StationRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    registry: dict[BaseStationId, StationRecord] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return registry
        missing = [h for h in STATION_HEADER if h not in reader.fieldnames]
        if missing:
            raise MRFormatError(f"header lacks columns {missing}", 1)
        for line, row in enumerate(reader, start=2):
            try:
                sid = BaseStationId(_int(row["rnc"], "rnc", line), _int(row["cell"], "cell", line))
                rec = StationRecord(sid, _num(row["lon"], "lon", line), _num(row["lat"], "lat", line))
            except MRFormatError:
                raise
            except ValueError as exc:
                raise MRFormatError(str(exc), line) from None
            if sid in registry:
                raise MRFormatError(f"duplicate station id {sid}", line)
            registry[sid] = rec
    return registry


def write_station_csv(path, registry: dict[BaseStationId, StationRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATION_HEADER)
        for sid in sorted(registry):
            rec = registry[sid]
            w.writerow([sid.rnc_id, sid.cell_id, repr(rec.lon), repr(rec.lat)])


def asu_check(sample: MRSample, tolerance: float = 0.5) -> list[bool]:
    """Flag entries whose AsuLevel disagrees with the 2G ``(RSSI+113)/2`` rule."""
    return [abs(e.asu_level - (e.rssi + 113.0) / 2.0) > tolerance for e in sample.entries]


def split_series(times: Sequence[float], gap_threshold: float) -> list[slice]:
    """Slices of a sorted time series broken wherever a gap exceeds the threshold."""
    cuts = [0]
    for i in range(1, len(times)):
        if times[i] - times[i - 1] > gap_threshold:
            cuts.append(i)
    cuts.append(len(times))
    return [slice(a, b) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]


def segment_trajectories(samples: Iterable[MRSample], gap_threshold: float = DEFAULT_GAP_S,
                         positions=None) -> list[Trajectory]:
    """Cut each device's labeled samples into trajectories at large time gaps.

    ``positions`` optionally maps a sample to the point stored in the
    trajectory (e.g. a relative position); by default the (lon, lat) label.
    Devices are emitted in sorted order.  Samples sharing a timestamp on one
    device keep only the first, since trajectory times must strictly increase.
    """
    if gap_threshold <= 0:
        raise ValueError("gap_threshold must be positive")
    by_device: dict[str, list[MRSample]] = {}
    for s in samples:
        if s.label is not None:
            by_device.setdefault(s.device_id, []).append(s)
    out = []
    for dev in sorted(by_device):
        series = sorted(by_device[dev], key=lambda s: s.timestamp)
        dedup = [series[0]]
        for s in series[1:]:
            if s.timestamp > dedup[-1].timestamp:
                dedup.append(s)
        times = [s.timestamp for s in dedup]
        for sl in split_series(times, gap_threshold):
            chunk = dedup[sl]
            pts = tuple(positions(s) if positions else s.label for s in chunk)
            out.append(Trajectory(dev, tuple(times[sl]), pts))
    return out
