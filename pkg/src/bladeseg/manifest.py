"""Manifest of pipeline inputs: one CSV row per (blade, image).

Columns: ``blade_id,image_id,rgb,prob_id,prob_fh,prob_fv,prob_fhv,gt``. The
three flip columns and ``gt`` may be empty (or missing entirely); when no
flip variants are given, ``prob_id`` is treated as an already merged
probability map. Paths are resolved relative to the manifest file's
directory at load time, and the on-disk order of rows is part of the
contract: it fixes group processing order and the forest subsample.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

__all__ = ["MANIFEST_HEADER", "ManifestRow", "Manifest", "load_manifest", "save_manifest"]

MANIFEST_HEADER = (
    "blade_id",
    "image_id",
    "rgb",
    "prob_id",
    "prob_fh",
    "prob_fv",
    "prob_fhv",
    "gt",
)


@dataclass(frozen=True)
class ManifestRow:
    blade_id: str
    image_id: str
    rgb: Path
    prob_id: Path
    prob_fh: Path | None = None
    prob_fv: Path | None = None
    prob_fhv: Path | None = None
    gt: Path | None = None

    def __post_init__(self) -> None:
        flips = (self.prob_fh, self.prob_fv, self.prob_fhv)
        present = sum(p is not None for p in flips)
        if present not in (0, 3):
            raise ValueError(
                f"row {self.blade_id}/{self.image_id}: give all three flip-variant "
                "maps or none"
            )

    @property
    def has_flip_variants(self) -> bool:
        return self.prob_fh is not None


@dataclass(frozen=True)
class Manifest:
    rows: tuple[ManifestRow, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "rows", tuple(self.rows))

    def groups(self) -> dict[str, list[ManifestRow]]:
        """Rows grouped by blade_id, groups in first-appearance order."""
        grouped: dict[str, list[ManifestRow]] = {}
        for row in self.rows:
            grouped.setdefault(row.blade_id, []).append(row)
        return grouped


def _opt_path(base: Path, cell: str | None) -> Path | None:
    if cell is None or cell == "":
        return None
    return (base / cell).resolve()


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    base = path.parent
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty manifest")
        missing = {"blade_id", "image_id", "rgb", "prob_id"} - set(reader.fieldnames)
        if missing:
            raise ValueError(f"{path}: missing manifest columns {sorted(missing)}")
        for line in reader:
            rows.append(
                ManifestRow(
                    blade_id=line["blade_id"],
                    image_id=line["image_id"],
                    rgb=(base / line["rgb"]).resolve(),
                    prob_id=(base / line["prob_id"]).resolve(),
                    prob_fh=_opt_path(base, line.get("prob_fh")),
                    prob_fv=_opt_path(base, line.get("prob_fv")),
                    prob_fhv=_opt_path(base, line.get("prob_fhv")),
                    gt=_opt_path(base, line.get("gt")),
                )
            )
    if not rows:
        raise ValueError(f"{path}: manifest has no rows")
    return Manifest(tuple(rows))


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write the manifest CSV with paths relative to its directory."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path | None) -> str:
        if p is None:
            return ""
        try:
            return Path(p).resolve().relative_to(base).as_posix()
        except ValueError:
            return Path(p).resolve().as_posix()

    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.rows:
            writer.writerow(
                [
                    r.blade_id,
                    r.image_id,
                    rel(r.rgb),
                    rel(r.prob_id),
                    rel(r.prob_fh),
                    rel(r.prob_fv),
                    rel(r.prob_fhv),
                    rel(r.gt),
                ]
            )
