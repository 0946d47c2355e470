"""Per-location metadata and its natural-language rendering."""

from __future__ import annotations

import configparser
import csv
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from string import Template
from typing import Optional

from .errors import DataError

METADATA_COLUMNS = ["location_id", "latitude", "longitude", "city", "county", "population",
                    "freeway", "lanes", "historical_total_volume"]


def read_template(name: str) -> str:
    return resources.files("dcats").joinpath("templates", name).read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def location_templates(path: Optional[str] = None) -> dict:
    """Sentence templates for one location, from the bundled file or ``path``."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is None:
        parser.read_string(read_template("location.ini"))
    else:
        parser.read(path, encoding="utf-8")
    return dict(parser["location"])


def default_background(n_locations: int) -> str:
    return Template(read_template("background.txt")).substitute(
        n_locations=f"{n_locations:,}", max_id=f"{n_locations - 1:,}").strip()


@dataclass(frozen=True)
class LocationMeta:
    location_id: int
    latitude: float
    longitude: float
    city: str = ""
    county: str = ""
    population: Optional[int] = None
    freeway: str = ""
    lanes: Optional[int] = None
    historical_total_volume: Optional[int] = None

    def validate(self) -> None:
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude {self.longitude} outside [-180, 180]")
        if self.lanes is not None and self.lanes < 1:
            raise ValueError(f"lanes must be >= 1, got {self.lanes}")
        if self.population is not None and self.population < 0:
            raise ValueError(f"population must be >= 0, got {self.population}")


class MetadataDB:
    """Mapping location_id -> LocationMeta plus dataset-level background text."""

    def __init__(self, records: dict, background_text: str = ""):
        self.records = dict(records)
        self.background_text = background_text
        for meta in self.records.values():
            meta.validate()

    def __getitem__(self, location_id) -> LocationMeta:
        try:
            return self.records[int(location_id)]
        except KeyError:
            raise KeyError(f"unknown location_id {location_id}") from None

    def __contains__(self, location_id) -> bool:
        return int(location_id) in self.records

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> list:
        return sorted(self.records)

    def check_covers(self, store) -> None:
        missing = [i for i in store.location_ids if i not in self.records]
        if missing:
            raise DataError(f"metadata lacks records for {len(missing)} location(s), e.g. {missing[:5]}")

    def with_volumes_from(self, store, train_range) -> "MetadataDB":
        """Fill absent historical_total_volume with the train-range sum of each series."""
        lo, hi = train_range
        records = {}
        for lid, meta in self.records.items():
            if meta.historical_total_volume is None and lid in store:
                vol = int(round(float(store.series(lid)[lo:hi].sum())))
                meta = LocationMeta(**{**meta.__dict__, "historical_total_volume": vol})
            records[lid] = meta
        return MetadataDB(records, self.background_text)


def _opt_int(tok: str):
    tok = tok.strip()
    return None if tok == "" else int(float(tok))


def load_metadata(path, background_path=None) -> MetadataDB:
    path = Path(path)
    if not path.exists():
        raise DataError(f"metadata file not found: {path}")
    records = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        absent = [c for c in ("location_id", "latitude", "longitude") if c not in reader.fieldnames]
        if absent:
            raise DataError(f"{path}: header missing column(s) {absent}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                meta = LocationMeta(
                    location_id=int(rec["location_id"]),
                    latitude=float(rec["latitude"]),
                    longitude=float(rec["longitude"]),
                    city=(rec.get("city") or "").strip(),
                    county=(rec.get("county") or "").strip(),
                    population=_opt_int(rec.get("population") or ""),
                    freeway=(rec.get("freeway") or "").strip(),
                    lanes=_opt_int(rec.get("lanes") or ""),
                    historical_total_volume=_opt_int(rec.get("historical_total_volume") or ""),
                )
                meta.validate()
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if meta.location_id in records:
                raise DataError(f"{path}: line {lineno}: duplicate location_id {meta.location_id}")
            records[meta.location_id] = meta
    if background_path is not None:
        background = Path(background_path).read_text(encoding="utf-8").strip()
    else:
        background = default_background(len(records))
    return MetadataDB(records, background)


def save_metadata(db: MetadataDB, path, background_path=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METADATA_COLUMNS)
        for lid in db.ids():
            m = db[lid]
            w.writerow(["" if getattr(m, c) is None else getattr(m, c) for c in METADATA_COLUMNS])
    if background_path is not None:
        Path(background_path).write_text(db.background_text + "\n", encoding="utf-8")


def _describe(meta: LocationMeta, annotation: str, templates: dict) -> str:
    details = [annotation] if annotation else []
    if meta.historical_total_volume is not None:
        details.append(f"historical_total_volume={meta.historical_total_volume}")
    fields = {
        "location_id": str(meta.location_id),
        "details": "".join(", " + d for d in details),
        "state": templates.get("state", ""),
    }
    if meta.city:
        fields["city"] = meta.city
    if meta.county:
        fields["county"] = meta.county
    if meta.population is not None:
        fields["population"] = f"{meta.population:,}"
    if meta.freeway:
        fields["freeway"] = meta.freeway
    if meta.lanes is not None:
        fields["lanes"] = str(meta.lanes)

    sentences = [Template(templates["identity"]).substitute(fields)]
    names = ["city", "population", "freeway" if meta.lanes is not None else "freeway_no_lanes"]
    for name in names:
        tmpl = Template(templates[name])
        try:
            sentences.append(tmpl.substitute(fields))
        except KeyError:
            continue  # sentence references a missing field
    return " ".join(sentences)


def render_location(db: MetadataDB, location_id, template_path=None) -> str:
    return _describe(db[location_id], "", location_templates(template_path))


def format_annotation(kind: str, value: float) -> str:
    if kind == "similarity":
        return f"similarity={value:.4f}"
    if kind == "distance":
        return f"distance={value:.2f}km"
    raise ValueError(f"unknown annotation kind {kind!r}")


def render_neighbor_entry(db: MetadataDB, location_id, kind: str, value: float,
                          template_path=None) -> str:
    """Describe a neighbor, with its similarity or distance right after the id."""
    return _describe(db[location_id], format_annotation(kind, value),
                     location_templates(template_path))
