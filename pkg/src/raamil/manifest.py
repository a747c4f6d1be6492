"""Dataset manifests: the JSON index tying patients, labels and token files.

Schema (version 1):

    {
      "version": 1,
      "classes": ["Healthy", "Benign", "OPMD", "OSCC"],
      "grid": {"rows": R, "cols": C, "dim": D},
      "patients": [
        {"id": str, "label": 0..3, "path": str, "patches": P},
        ...
      ]
    }

Paths are relative to the manifest's directory.  Class order is fixed;
a manifest declaring a different order is rejected outright.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from raamil.bags import CLASS_NAMES, NUM_CLASSES, BagFormatError, TokenBag, read_bag

MANIFEST_VERSION = 1


class ManifestError(ValueError):
    """Structurally invalid manifest document."""


@dataclass
class PatientEntry:
    patient_id: str
    label: int
    path: str
    patches: int


@dataclass
class DatasetManifest:
    rows: int
    cols: int
    dim: int
    patients: list[PatientEntry] = field(default_factory=list)
    root: Path | None = None  # directory the paths are relative to

    def __post_init__(self):
        seen = set()
        for entry in self.patients:
            if entry.patient_id in seen:
                raise ManifestError(f"duplicate patient id {entry.patient_id!r}")
            seen.add(entry.patient_id)

    @property
    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    @property
    def labels(self) -> dict[str, int]:
        return {p.patient_id: p.label for p in self.patients}

    def entry(self, patient_id: str) -> PatientEntry:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(f"patient {patient_id!r} not in manifest")

    def bag_path(self, entry: PatientEntry) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / entry.path

    def load_bag(self, patient_id: str) -> TokenBag:
        entry = self.entry(patient_id)
        return read_bag(self.bag_path(entry), patient_id=entry.patient_id, label=entry.label)

    def class_counts(self, patient_ids=None) -> list[int]:
        ids = set(patient_ids) if patient_ids is not None else None
        counts = [0] * NUM_CLASSES
        for p in self.patients:
            if ids is None or p.patient_id in ids:
                counts[p.label] += 1
        return counts


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    doc = {
        "version": MANIFEST_VERSION,
        "classes": list(CLASS_NAMES),
        "grid": {"rows": manifest.rows, "cols": manifest.cols, "dim": manifest.dim},
        "patients": [
            {"id": p.patient_id, "label": p.label, "path": p.path, "patches": p.patches}
            for p in manifest.patients
        ],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ManifestError(f"{path}: not valid JSON: {err}") from err
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    if tuple(doc.get("classes", ())) != CLASS_NAMES:
        raise ManifestError(
            f"{path}: class order {doc.get('classes')!r} != {list(CLASS_NAMES)}")
    grid = doc.get("grid") or {}
    try:
        rows, cols, dim = int(grid["rows"]), int(grid["cols"]), int(grid["dim"])
        patients = [
            PatientEntry(str(p["id"]), int(p["label"]), str(p["path"]), int(p["patches"]))
            for p in doc.get("patients", [])
        ]
    except (KeyError, TypeError, ValueError) as err:
        raise ManifestError(f"{path}: malformed field: {err}") from err
    return DatasetManifest(rows=rows, cols=cols, dim=dim, patients=patients, root=path.parent)


# ------------------------------------------------------------- validation

@dataclass
class ValidationItem:
    patient_id: str
    ok: bool
    message: str


@dataclass
class ValidationReport:
    items: list[ValidationItem]
    manifest_error: str | None = None

    @property
    def passed(self) -> bool:
        return self.manifest_error is None and all(item.ok for item in self.items)

    def summary(self) -> str:
        if self.manifest_error:
            return f"FAIL manifest: {self.manifest_error}"
        lines = [
            f"{'ok  ' if item.ok else 'FAIL'} {item.patient_id}: {item.message}"
            for item in self.items
        ]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: {sum(i.ok for i in self.items)}/{len(self.items)} patients valid")
        return "\n".join(lines)


def validate_manifest(path) -> ValidationReport:
    """Check every referenced bag loads and matches the manifest contract.

    Problems become report entries, never exceptions."""
    try:
        manifest = load_manifest(path)
    except (ManifestError, OSError) as err:
        return ValidationReport(items=[], manifest_error=str(err))

    items = []
    for entry in manifest.patients:
        bag_path = manifest.bag_path(entry)
        if not 0 <= entry.label < NUM_CLASSES:
            items.append(ValidationItem(
                entry.patient_id, False,
                f"label {entry.label} outside 0..{NUM_CLASSES - 1}"))
            continue
        if not bag_path.exists():
            items.append(ValidationItem(
                entry.patient_id, False, f"missing token file {bag_path}"))
            continue
        try:
            bag = read_bag(bag_path, patient_id=entry.patient_id, label=entry.label)
        except BagFormatError as err:
            items.append(ValidationItem(entry.patient_id, False, str(err)))
            continue
        problems = []
        if (bag.rows, bag.cols) != (manifest.rows, manifest.cols):
            problems.append(
                f"grid {bag.rows}x{bag.cols} != manifest {manifest.rows}x{manifest.cols}")
        if bag.dim != manifest.dim:
            problems.append(f"dim {bag.dim} != manifest dim {manifest.dim}")
        if bag.num_patches != entry.patches:
            problems.append(f"{bag.num_patches} patches != manifest {entry.patches}")
        if problems:
            items.append(ValidationItem(entry.patient_id, False, "; ".join(problems)))
        else:
            items.append(ValidationItem(
                entry.patient_id, True,
                f"{bag.num_patches} patches of {bag.rows}x{bag.cols}x{bag.dim}"))
    return ValidationReport(items=items)
