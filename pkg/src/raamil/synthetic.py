"""Synthetic token-bag datasets with a class-coded local-contrast motif.

Every bag is i.i.d. Gaussian background noise except for one contiguous
b-by-b block of cells per motif patch, where a class-specific subset of
feature dimensions (dims with index % 4 == class) is offset by the motif
strength.  The block is coherent: neighboring cells inside it share the
offset, while cells straddling the block border differ sharply, so models
that can aggregate over a token's grid neighborhood see a cleaner version
of the same evidence a purely token-wise model gets.

At strength 0 the motif vanishes and all four classes are draws from the
same distribution, the null-signal sanity case.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from raamil.bags import CLASS_NAMES, GridTokens, TokenBag, write_bag
from raamil.manifest import DatasetManifest, PatientEntry, save_manifest
from raamil.rng import stream


@dataclass
class SynthConfig:
    patients_per_class: int = 50
    p_min: int = 2
    p_max: int = 4
    rows: int = 14
    cols: int = 14
    dim: int = 64
    block: int = 3
    strength: float = 2.0
    noise: float = 1.0
    seed: int = 7

    def __post_init__(self):
        if min(self.patients_per_class, self.p_min, self.rows, self.cols,
               self.dim, self.block) < 1:
            raise ValueError("all synthetic sizes must be positive")
        if self.p_max < self.p_min:
            raise ValueError(f"patch range [{self.p_min}, {self.p_max}] is empty")
        if self.block > min(self.rows, self.cols):
            raise ValueError(
                f"motif block {self.block} does not fit a {self.rows}x{self.cols} grid")
        if self.strength < 0 or self.noise < 0:
            raise ValueError("strength and noise must be >= 0")
        if self.dim < 4:
            raise ValueError("need at least 4 feature dims for 4 class signatures")


def class_signature_dims(cls: int, dim: int) -> np.ndarray:
    """Feature dims carrying class `cls`'s motif offset."""
    return np.arange(cls, dim, 4)


def make_bag(cfg: SynthConfig, cls: int, index: int) -> TokenBag:
    """One deterministic synthetic bag; stream depends only on (seed, cls, index)."""
    st = stream(cfg.seed, "synth", cls, index)
    p = int(st.integers(cfg.p_min, cfg.p_max, 1)[0])
    tokens = cfg.noise * st.normal_array((p, cfg.rows, cfg.cols, cfg.dim))

    # nonempty random subset of patches carries the motif
    carriers = [i for i in range(p) if st.uniform(1)[0] < 0.5]
    if not carriers:
        carriers = [st.below(p)]
    dims = class_signature_dims(cls, cfg.dim)
    for patch in carriers:
        r0 = st.below(cfg.rows - cfg.block + 1)
        c0 = st.below(cfg.cols - cfg.block + 1)
        block = tokens[patch, r0:r0 + cfg.block, c0:c0 + cfg.block]
        block[..., dims] += cfg.strength

    # storage is float32; quantize now so in-memory bags equal their files
    tokens = tokens.astype(np.float32).astype(np.float64)
    pid = f"{CLASS_NAMES[cls].lower()}-{index:03d}"
    return TokenBag(pid, cls, [GridTokens(tokens[i]) for i in range(p)])


def generate_synthetic_dataset(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Write one token file per synthetic patient plus manifest.json."""
    out_dir = Path(out_dir)
    token_dir = out_dir / "tokens"
    token_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for cls in range(len(CLASS_NAMES)):
        for index in range(cfg.patients_per_class):
            bag = make_bag(cfg, cls, index)
            rel = f"tokens/{bag.patient_id}.raab"
            write_bag(bag, out_dir / rel)
            entries.append(PatientEntry(bag.patient_id, cls, rel, bag.num_patches))

    manifest = DatasetManifest(rows=cfg.rows, cols=cfg.cols, dim=cfg.dim,
                               patients=entries, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def make_test_split(manifest: DatasetManifest, fraction: float, seed: int) -> list[str]:
    """Stratified held-out test ids: round(fraction * n_c) per class, chosen
    by the seeded split stream over sorted ids."""
    if not 0 <= fraction < 1:
        raise ValueError(f"test fraction must be in [0, 1), got {fraction}")
    test_ids: list[str] = []
    by_class: dict[int, list[str]] = {}
    for entry in manifest.patients:
        by_class.setdefault(entry.label, []).append(entry.patient_id)
    for cls in sorted(by_class):
        members = sorted(by_class[cls])
        count = int(len(members) * fraction + 0.5)
        st = stream(seed, "splits", "heldout", cls)
        test_ids.extend(st.subset(members, count))
    return sorted(test_ids)
