"""Turn directories of patch images into token bags with a frozen encoder.

Each image is resized to 224x224 (bilinear, antialiased), normalized with
the encoder's published preprocessing statistics, and embedded; the CLS
token is dropped and the remaining tokens are laid out as a 14x14 grid.
One bag file per patient, plus a manifest fragment the classifier's
`validate` command accepts as-is.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from featurizer.bagfile import write_tokens

log = logging.getLogger("featurizer")

CLASS_NAMES = ("Healthy", "Benign", "OPMD", "OSCC")
MANIFEST_VERSION = 1


class FeaturizeError(RuntimeError):
    """The encoder's output cannot satisfy the requested grid contract."""


@dataclass
class FeaturizeJob:
    """One batch of patients to embed.

    `patients` maps patient id to an ordered list of image paths.  `model`
    names the frozen encoder (hub id or local directory); there is no
    default on purpose.  `labels` may assign a class index per patient;
    unknown patients get 0.
    """

    patients: dict[str, list]
    out_dir: Path
    model: str
    resize: tuple[int, int] = (224, 224)
    rows: int = 14
    cols: int = 14
    dim: int = 384
    labels: dict[str, int] = field(default_factory=dict)
    # single-threaded inference keeps reruns byte-identical; None leaves
    # the torch global alone
    threads: int | None = 1

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)
        if not self.patients:
            raise ValueError("job has no patients")
        if not self.model:
            raise ValueError("job needs a model identifier")
        for pid, lbl in self.labels.items():
            if not 0 <= int(lbl) < len(CLASS_NAMES):
                raise ValueError(f"label {lbl} for {pid!r} outside 0..{len(CLASS_NAMES) - 1}")


def _load_image(path, size) -> np.ndarray:
    """Decode, resize, and scale to float32 HWC in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize(size, Image.Resampling.BILINEAR)
    return np.asarray(rgb, dtype=np.float32) / 255.0


def _pixel_batch(images: list[np.ndarray], mean, std) -> torch.Tensor:
    stack = np.stack(images)                                  # (P, H, W, 3)
    stack = (stack - np.asarray(mean, dtype=np.float32)) \
        / np.asarray(std, dtype=np.float32)
    return torch.from_numpy(stack.transpose(0, 3, 1, 2).copy())


def extract_tokens(job: FeaturizeJob) -> dict:
    """Embed every patient's images and write bags plus the manifest fragment.

    Unreadable images are skipped with a warning entry; a patient with no
    readable image gets an error entry and no file.  A mismatch between the
    encoder's geometry and the requested grid is a hard error.  Returns the
    fragment document (also written to out_dir/manifest.json).
    """
    from transformers import AutoImageProcessor, AutoModel

    if job.threads is not None:
        torch.set_num_threads(job.threads)
    processor = AutoImageProcessor.from_pretrained(job.model)
    mean = [float(x) for x in processor.image_mean]
    std = [float(x) for x in processor.image_std]
    model = AutoModel.from_pretrained(job.model)
    model.eval()

    out = job.out_dir
    tokens_dir = out / "tokens"
    tokens_dir.mkdir(parents=True, exist_ok=True)

    entries: list[dict] = []
    warnings: list[dict] = []
    errors: list[dict] = []
    for pid in sorted(job.patients):
        images = []
        for path in job.patients[pid]:
            try:
                images.append(_load_image(path, job.resize))
            except (OSError, UnidentifiedImageError, ValueError) as err:
                msg = f"unreadable image {path}: {err}"
                log.warning("%s: %s", pid, msg)
                warnings.append({"patient": pid, "message": msg})
        if not images:
            errors.append({"patient": pid, "message": "no readable images"})
            continue

        with torch.inference_mode():
            hidden = model(pixel_values=_pixel_batch(images, mean, std)).last_hidden_state
        p, seq, dim = hidden.shape
        if seq - 1 != job.rows * job.cols or dim != job.dim:
            raise FeaturizeError(
                f"encoder yields {seq - 1} tokens of dim {dim}, "
                f"expected {job.rows}x{job.cols} of dim {job.dim}")
        grid = hidden[:, 1:, :].numpy().reshape(p, job.rows, job.cols, job.dim)

        rel = f"tokens/{pid}.raab"
        write_tokens(out / rel, grid.astype(np.float32))
        entries.append({"id": pid, "label": int(job.labels.get(pid, 0)),
                        "path": rel, "patches": p})

    doc = {
        "version": MANIFEST_VERSION,
        "classes": list(CLASS_NAMES),
        "grid": {"rows": job.rows, "cols": job.cols, "dim": job.dim},
        "patients": entries,
        "featurizer": {
            "model": job.model,
            "resize": list(job.resize),
            "interpolation": "bilinear-antialias",
            "normalization": {"mean": mean, "std": std},
            "warnings": warnings,
            "errors": errors,
        },
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n",
                                       encoding="utf-8")
    return doc
