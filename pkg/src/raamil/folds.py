"""Stratified k-fold assignment of patients.

Per class: sort patient ids, shuffle them with the seeded split stream,
then deal round-robin to folds starting at fold (class_index mod k).
Sorting before the shuffle makes the plan a function of the id *set*, not
of manifest order; the rotation of the starting fold spreads the ±1
remainders of different classes over different folds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from raamil.bags import NUM_CLASSES
from raamil.rng import stream


class FoldError(ValueError):
    pass


@dataclass
class FoldPlan:
    k: int
    seed: int
    assignment: dict[str, int] = field(default_factory=dict)

    def fold_of(self, patient_id: str) -> int:
        return self.assignment[patient_id]

    def members(self, fold: int) -> list[str]:
        return sorted(pid for pid, f in self.assignment.items() if f == fold)

    def validation_ids(self, fold: int) -> list[str]:
        return self.members(fold)

    def training_ids(self, fold: int) -> list[str]:
        return sorted(pid for pid, f in self.assignment.items() if f != fold)


def stratified_kfold(labels: dict[str, int], k: int, seed: int) -> FoldPlan:
    """Assign every patient to exactly one of k folds, class-balanced to ±1.

    Classes with fewer than k members simply leave some folds without that
    class; that is expected with scarce diagnoses and not an error.
    """
    if k < 2:
        raise FoldError(f"fold count must be >= 2, got {k}")
    if not labels:
        raise FoldError("no patients to assign")
    for pid, label in labels.items():
        if not 0 <= label < NUM_CLASSES:
            raise FoldError(f"patient {pid!r} label {label} outside 0..{NUM_CLASSES - 1}")

    assignment: dict[str, int] = {}
    for cls in range(NUM_CLASSES):
        members = sorted(pid for pid, label in labels.items() if label == cls)
        if not members:
            continue
        shuffled = stream(seed, "splits", cls).shuffle(members)
        start = cls % k
        for i, pid in enumerate(shuffled):
            assignment[pid] = (start + i) % k
    return FoldPlan(k=k, seed=seed, assignment=assignment)


def save_fold_plan(plan: FoldPlan, path) -> None:
    doc = {"k": plan.k, "seed": plan.seed, "assignment": plan.assignment}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_fold_plan(path) -> FoldPlan:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return FoldPlan(
        k=int(doc["k"]),
        seed=int(doc["seed"]),
        assignment={str(pid): int(f) for pid, f in doc["assignment"].items()},
    )
