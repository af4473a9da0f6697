"""Landslide event catalog: ';'-separated rows, tolerant of comma decimals
and of both MM/DD/YYYY and DD/MM/YYYY dates.
"""

from __future__ import annotations

import datetime as dt
import re
import warnings
from dataclasses import dataclass
from typing import Iterable

HEADER = ("location", "date", "size", "type", "lat", "lon", "accuracy_km", "rain_mm", "humidity_pct", "cloud_pct")

SIZE_CLASSES = ("small", "medium", "large", "very_large", "catastrophic")
_SIZE_RANK = {s: i for i, s in enumerate(SIZE_CLASSES)}


class CatalogError(ValueError):
    """Catalog could not be parsed; ``row_errors`` holds (line, reason) pairs."""

    def __init__(self, message: str, row_errors: list[tuple[int, str]] | None = None):
        self.row_errors = row_errors or []
        if self.row_errors:
            message += ": " + "; ".join(f"line {n}: {why}" for n, why in self.row_errors)
        super().__init__(message)


@dataclass(frozen=True)
class CatalogEntry:
    location_name: str
    event_date: dt.date
    size_class: str
    event_type: str
    latitude: float
    longitude: float
    location_accuracy_km: float | None = None
    rainfall_mm: float | None = None
    humidity_pct: float | None = None
    cloud_cover_pct: float | None = None

    @property
    def site_id(self) -> str:
        return site_slug(self.location_name)


def site_slug(name: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")
    return slug or "site"


def parse_number(text: str) -> float:
    """Float from '71,53659933' or '71.53659933'."""
    t = text.strip().replace(",", ".")
    if t.count(".") > 1:
        raise ValueError(f"ambiguous number {text!r}")
    return float(t)


def parse_date(text: str) -> dt.date:
    """ISO or slash dates; a component > 12 fixes day-first vs month-first,
    fully ambiguous dates read as MM/DD/YYYY."""
    t = text.strip()
    if re.fullmatch(r"\d{4}-\d{2}-\d{2}", t):
        return dt.date.fromisoformat(t)
    m = re.fullmatch(r"(\d{1,2})/(\d{1,2})/(\d{4})", t)
    if not m:
        raise ValueError(f"unrecognised date {text!r}")
    a, b, year = (int(g) for g in m.groups())
    month, day = (b, a) if a > 12 else (a, b)
    return dt.date(year, month, day)


def parse_size(text: str) -> str:
    s = re.sub(r"[\s\-]+", "_", text.strip().lower())
    if s not in _SIZE_RANK:
        raise ValueError(f"unknown size class {text!r}")
    return s


def _optional(text: str) -> float | None:
    return parse_number(text) if text.strip() else None


def _parse_row(fields: list[str]) -> CatalogEntry:
    fields = fields + [""] * (len(HEADER) - len(fields))
    name, date, size, kind, lat, lon, acc, rain, hum, cloud = (f.strip() for f in fields[: len(HEADER)])
    if not name:
        raise ValueError("empty location")
    try:
        latitude, longitude = parse_number(lat), parse_number(lon)
    except ValueError as exc:
        raise ValueError(f"unparseable coordinate: {exc}") from None
    if not -90 <= latitude <= 90:
        raise ValueError(f"latitude {latitude} outside [-90, 90]")
    if not -180 <= longitude <= 180:
        raise ValueError(f"longitude {longitude} outside [-180, 180]")
    event_date = parse_date(date)
    if not 1900 <= event_date.year <= 2100:
        raise ValueError(f"date {event_date} outside [1900, 2100]")
    if latitude == longitude:
        warnings.warn(f"{name}: latitude equals longitude ({latitude}), likely a copy error", stacklevel=3)
    return CatalogEntry(
        name, event_date, parse_size(size), kind, latitude, longitude, _optional(acc), _optional(rain), _optional(hum), _optional(cloud)
    )


def parse_catalog(text: str, strict: bool = True) -> list[CatalogEntry]:
    """Parse catalog text (header row first).

    With ``strict`` any bad row raises :class:`CatalogError` listing every
    failing line; otherwise bad rows are skipped with a warning.
    """
    lines = text.splitlines()
    if not any(l.strip() for l in lines):
        raise CatalogError("empty catalog")
    header = [h.strip().lower() for h in lines[0].split(";")]
    if header[:6] != list(HEADER[:6]):
        raise CatalogError(f"bad header {lines[0]!r}; expected {';'.join(HEADER)}")
    entries, errors = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            entries.append(_parse_row(line.split(";")))
        except ValueError as exc:
            errors.append((lineno, str(exc)))
    if errors:
        if strict:
            raise CatalogError("invalid catalog rows", errors)
        for lineno, why in errors:
            warnings.warn(f"catalog line {lineno} skipped: {why}", stacklevel=2)
    return entries


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def serialize_catalog(entries: Iterable[CatalogEntry]) -> str:
    """Normalised text form: dot decimals, ISO dates."""
    out = [";".join(HEADER)]
    for e in entries:
        out.append(
            ";".join(
                [
                    e.location_name,
                    e.event_date.isoformat(),
                    e.size_class,
                    e.event_type,
                    _fmt(e.latitude),
                    _fmt(e.longitude),
                    _fmt(e.location_accuracy_km),
                    _fmt(e.rainfall_mm),
                    _fmt(e.humidity_pct),
                    _fmt(e.cloud_cover_pct),
                ]
            )
        )
    return "\n".join(out) + "\n"


def filter_catalog(
    entries: Iterable[CatalogEntry],
    min_size_class: str | None = None,
    date_window: tuple[dt.date, dt.date] | None = None,
    max_accuracy_km: float | None = None,
) -> list[CatalogEntry]:
    """Keep entries meeting every given criterion, in input order.

    Entries without a recorded accuracy pass the accuracy criterion.
    """
    min_rank = _SIZE_RANK[parse_size(min_size_class)] if min_size_class else None
    kept = []
    for e in entries:
        if min_rank is not None and _SIZE_RANK[e.size_class] < min_rank:
            continue
        if date_window is not None and not date_window[0] <= e.event_date <= date_window[1]:
            continue
        if max_accuracy_km is not None and e.location_accuracy_km is not None and e.location_accuracy_km > max_accuracy_km:
            continue
        kept.append(e)
    return kept
