"""Case records and the JSON dataset manifest."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

from .volume import LabelMap, Volume, load_labelmap, load_volume

FORMAT_VERSION = 1
PROVENANCES = ("real", "synthetic")
SPLITS = ("train", "val")


class ManifestError(ValueError):
    pass


@dataclass
class CaseRecord:
    case_id: str
    volume_path: str
    lesion_mask_path: str
    organ_map_path: Optional[str] = None
    provenance: str = "real"
    split: str = "train"
    source_case_id: Optional[str] = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ManifestError(f"unknown provenance {self.provenance!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        if self.provenance == "synthetic" and not self.source_case_id:
            raise ManifestError(f"synthetic case {self.case_id} lacks a source case id")


@dataclass
class DatasetManifest:
    """A list of cases whose paths are stored relative to ``root``."""

    root: Path
    cases: List[CaseRecord] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        self.root = Path(self.root)
        ids = [c.case_id for c in self.cases]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate case ids: {dupes}")

    def __len__(self) -> int:
        return len(self.cases)

    def __iter__(self) -> Iterator[CaseRecord]:
        return iter(self.cases)

    def split(self, name: str) -> List[CaseRecord]:
        return [c for c in self.cases if c.split == name]

    @property
    def train(self) -> List[CaseRecord]:
        return self.split("train")

    @property
    def val(self) -> List[CaseRecord]:
        return self.split("val")

    def get(self, case_id: str) -> CaseRecord:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    def resolve(self, rel: str) -> Path:
        return (self.root / rel).resolve()

    def load_case(self, rec: CaseRecord) -> Tuple[Volume, LabelMap, Optional[LabelMap]]:
        volume = load_volume(self.resolve(rec.volume_path))
        lesion = load_labelmap(self.resolve(rec.lesion_mask_path))
        organs = load_labelmap(self.resolve(rec.organ_map_path)) if rec.organ_map_path else None
        return volume, lesion, organs

    def rebased(self, new_root) -> "DatasetManifest":
        """Copy of this manifest with every path re-expressed relative to ``new_root``."""
        new_root = Path(new_root).resolve()

        def rel(p):
            return None if p is None else os.path.relpath(self.resolve(p), new_root)

        cases = [
            CaseRecord(
                **{**asdict(c), "volume_path": rel(c.volume_path), "lesion_mask_path": rel(c.lesion_mask_path),
                   "organ_map_path": rel(c.organ_map_path)}
            )
            for c in self.cases
        ]
        return DatasetManifest(new_root, cases, self.format_version)

    def to_dict(self) -> dict:
        return {"format_version": self.format_version, "cases": [asdict(c) for c in self.cases]}

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    data = json.loads(path.read_text())
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise ManifestError(f"{path}: unsupported manifest format_version {version!r}")
    return DatasetManifest(path.parent, [CaseRecord(**c) for c in data["cases"]], version)
