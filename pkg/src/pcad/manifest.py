"""Dataset manifest: which cloud is a normal/anomalous, train/test sample of which category."""

from __future__ import annotations

import dataclasses
from pathlib import Path

from pcad.config import DEFECT_KINDS
from pcad.errors import DataError

HEADER = ("sample_id", "category", "split", "role", "defect_kind", "cloud_path", "label_path")


@dataclasses.dataclass(frozen=True)
class ManifestRow:
    sample_id: str
    category: str
    split: str
    role: str
    defect_kind: str
    cloud_path: str
    label_path: str = ""

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise DataError(f"{self.sample_id}: split must be train/test, got {self.split!r}")
        if self.role not in ("normal", "anomalous"):
            raise DataError(f"{self.sample_id}: role must be normal/anomalous, got {self.role!r}")
        if self.role == "normal" and self.defect_kind != "none":
            raise DataError(f"{self.sample_id}: normal sample with defect kind {self.defect_kind!r}")
        if self.role == "anomalous" and self.defect_kind not in DEFECT_KINDS:
            raise DataError(f"{self.sample_id}: unknown defect kind {self.defect_kind!r}")


@dataclasses.dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    root: Path = Path(".")

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            if row.sample_id in seen:
                raise DataError(f"duplicate sample_id {row.sample_id!r} in manifest")
            seen.add(row.sample_id)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def select(self, **conds) -> list[ManifestRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in conds.items())]

    def categories(self) -> list[str]:
        return sorted({r.category for r in self.rows})

    def subset(self, rows) -> "DatasetManifest":
        return DatasetManifest(list(rows), self.root)

    def validate(self, seen_kinds=None, check_paths: bool = True) -> None:
        """Check paths exist and, given ``seen_kinds``, the open-set split algebra."""
        if check_paths:
            for r in self.rows:
                if not self.resolve(r.cloud_path).exists():
                    raise DataError(f"manifest row {r.sample_id!r}: missing cloud file {r.cloud_path}")
                if r.label_path and not self.resolve(r.label_path).exists():
                    raise DataError(f"manifest row {r.sample_id!r}: missing label file {r.label_path}")
        if seen_kinds is not None:
            seen_kinds = set(seen_kinds)
            train_kinds = {r.defect_kind for r in self.select(split="train", role="anomalous")}
            test_kinds = {r.defect_kind for r in self.select(split="test", role="anomalous")}
            if not train_kinds <= seen_kinds:
                raise DataError(f"train anomalies of unseen kinds: {sorted(train_kinds - seen_kinds)}")
            if test_kinds & seen_kinds:
                raise DataError(f"test anomalies of seen kinds: {sorted(test_kinds & seen_kinds)}")

    def to_text(self) -> str:
        lines = ["\t".join(HEADER)]
        lines += ["\t".join(getattr(r, h) for h in HEADER) for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not lines or tuple(lines[0].split("\t")) != HEADER:
            raise DataError(f"{path}: manifest header must be {'<TAB>'.join(HEADER)}")
        rows = []
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split("\t")
            if len(parts) == len(HEADER) - 1:
                parts.append("")
            if len(parts) != len(HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(HEADER)} columns, got {len(parts)}")
            rows.append(ManifestRow(*parts))
        return cls(rows, path.parent)
