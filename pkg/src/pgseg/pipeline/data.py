"""Slice containers, the synthetic phantom generator and an importer for
pre-sliced abdominal CT.

A sample on disk is a JSON sidecar ``<case>.json`` plus one raw
little-endian file per array (``<case>.image.raw``, ``<case>.label.raw``).
A dataset directory adds ``dataset.json`` listing the cases.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from pgseg.vocab import CLASS_NAMES, NUM_CLASSES, ORGANS, check_organs

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_DTYPES = {"image": "<f4", "label": "|u1"}


class LoadError(IOError):
    pass


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class SegSample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    label: np.ndarray  # (H, W) uint8 class ids
    organs_present: tuple[str, ...]
    case_id: str

    def validate(self, n_classes: int = NUM_CLASSES) -> "SegSample":
        if self.image.ndim != 2 or self.image.shape != self.label.shape:
            raise ValidationError(f"{self.case_id}: image {self.image.shape} and label {self.label.shape} must be equal 2-D shapes")
        if not np.isfinite(self.image).all():
            raise ValidationError(f"{self.case_id}: non-finite intensities")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValidationError(f"{self.case_id}: intensities outside [0, 1]")
        bad = np.unique(self.label[self.label >= n_classes])
        if bad.size:
            raise ValidationError(f"{self.case_id}: label value {int(bad[0])} outside [0, {n_classes})")
        return self


def organs_in(label: np.ndarray) -> tuple[str, ...]:
    ids = np.unique(label)
    return tuple(CLASS_NAMES[i] for i in ids if 0 < i < len(CLASS_NAMES))


def save_sample(sample: SegSample, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sample.validate()
    arrays = {"image": sample.image.astype(_DTYPES["image"]), "label": sample.label.astype(_DTYPES["label"])}
    meta = {
        "version": FORMAT_VERSION,
        "case_id": sample.case_id,
        "organs_present": list(sample.organs_present),
        "class_vocabulary": list(CLASS_NAMES),
        "arrays": {},
    }
    for name, arr in arrays.items():
        fname = f"{sample.case_id}.{name}.raw"
        (directory / fname).write_bytes(arr.tobytes(order="C"))
        meta["arrays"][name] = {"file": fname, "dtype": _DTYPES[name], "shape": list(arr.shape)}
    path = directory / f"{sample.case_id}.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_sample(path: str | Path, n_classes: int = NUM_CLASSES) -> SegSample:
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"{path.name}: unreadable sidecar ({exc})") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise LoadError(f"{path.name}: unsupported format version {meta.get('version')!r}")
    arrays = {}
    for name in ("image", "label"):
        spec = meta.get("arrays", {}).get(name)
        if spec is None:
            raise LoadError(f"{path.name}: missing array entry {name!r}")
        raw_path = path.parent / spec["file"]
        dtype = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        try:
            buf = raw_path.read_bytes()
        except OSError as exc:
            raise LoadError(f"{raw_path.name}: {exc}") from exc
        expected = int(np.prod(shape)) * dtype.itemsize
        if len(buf) != expected:
            raise LoadError(f"{raw_path.name}: {len(buf)} bytes, expected {expected} for shape {shape} {dtype}")
        arrays[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    sample = SegSample(
        image=arrays["image"].astype(np.float32),
        label=arrays["label"].astype(np.uint8),
        organs_present=tuple(meta.get("organs_present", ())),
        case_id=str(meta["case_id"]),
    )
    return sample.validate(n_classes)


def write_dataset(samples: Sequence[SegSample], directory: str | Path, **extra) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_sample(s, directory)
    manifest = {"version": FORMAT_VERSION, "class_vocabulary": list(CLASS_NAMES), "cases": [s.case_id for s in samples], **extra}
    (directory / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(directory: str | Path, n_classes: int = NUM_CLASSES) -> list[SegSample]:
    directory = Path(directory)
    manifest_path = directory / "dataset.json"
    if manifest_path.exists():
        cases = json.loads(manifest_path.read_text())["cases"]
        paths = [directory / f"{c}.json" for c in cases]
    else:
        paths = sorted(p for p in directory.glob("*.json"))
    if not paths:
        raise LoadError(f"{directory}: no samples found")
    return [load_sample(p, n_classes) for p in paths]


def sample_fraction(samples: Sequence[SegSample], fraction: float, seed: int = 0) -> list[SegSample]:
    """Seeded subset of ``ceil(fraction * n)`` samples (few-shot switch); order preserved."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = len(samples)
    k = max(1, int(np.ceil(fraction * n)))
    keep = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return [samples[i] for i in keep]


# ---------------------------------------------------------------------------
# synthetic phantoms

# (row, col) centre, (semi-axis row, semi-axis col) as image fractions, base intensity,
# texture amplitude, texture frequency (cycles per image)
_PHANTOM = {
    "liver": ((0.40, 0.30), (0.20, 0.16), 0.55, 0.04, 6.0),
    "stomach": ((0.34, 0.62), (0.12, 0.11), 0.33, 0.06, 4.0),
    "spleen": ((0.42, 0.82), (0.12, 0.07), 0.64, 0.03, 8.0),
    "pancreas": ((0.52, 0.55), (0.05, 0.15), 0.46, 0.05, 12.0),
    "kidney_right": ((0.66, 0.28), (0.10, 0.07), 0.78, 0.04, 10.0),
    "kidney_left": ((0.66, 0.74), (0.10, 0.07), 0.72, 0.04, 10.0),
    "aorta": ((0.66, 0.51), (0.06, 0.06), 0.92, 0.02, 3.0),
    "gallbladder": ((0.55, 0.37), (0.08, 0.06), 0.20, 0.02, 3.0),
}
# paint order: large organs first so small ones stay whole
_PAINT_ORDER = ("liver", "stomach", "spleen", "pancreas", "kidney_right", "kidney_left", "aorta", "gallbladder")


def _blob(rng: np.random.Generator, size: int, centre, axes, jitter: float = 0.025) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    cy = centre[0] + rng.uniform(-jitter, jitter)
    cx = centre[1] + rng.uniform(-jitter, jitter)
    ay = axes[0] * rng.uniform(0.85, 1.15)
    ax = axes[1] * rng.uniform(0.85, 1.15)
    theta = rng.uniform(-0.35, 0.35)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / ax
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ay
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    radius = np.ones_like(phi)
    for k in (2, 3, 4):
        radius += rng.uniform(0.0, 0.07) * np.cos(k * phi + rng.uniform(0, 2 * np.pi))
    return rho <= radius


def synth_slice(rng: np.random.Generator, size: int, organs: Sequence[str], case_id: str, presence: float = 1.0) -> SegSample:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    image = np.zeros((size, size))
    body = ((yy - 0.5) / 0.46) ** 2 + ((xx - 0.5) / 0.47) ** 2 <= 1.0
    image[body] = 0.12
    label = np.zeros((size, size), dtype=np.uint8)
    wanted = set(organs)
    for organ in _PAINT_ORDER:
        if organ not in wanted:
            continue
        (centre, axes, base, amp, freq) = _PHANTOM[organ]
        present = rng.uniform() < presence
        mask = _blob(rng, size, centre, axes) & body
        if not present:
            continue
        angle = rng.uniform(0, np.pi)
        texture = amp * np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + rng.uniform(0, 2 * np.pi))
        image[mask] = base + texture[mask]
        label[mask] = CLASS_NAMES.index(organ)
    smooth = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=3.0)
    image = image + 0.02 * smooth / (smooth.std() + 1e-12) + 0.015 * rng.standard_normal((size, size))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SegSample(image=image, label=label, organs_present=organs_in(label), case_id=case_id)


def gen_synthetic(
    out_dir: str | Path | None,
    seed: int,
    n_cases: int,
    organs: Sequence[str] = ORGANS,
    size: int = 224,
    presence: float = 1.0,
) -> list[SegSample]:
    """Deterministic phantom slices; written to ``out_dir`` when given."""
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    organs = check_organs(organs)
    children = np.random.SeedSequence(seed).spawn(n_cases)
    samples = [
        synth_slice(np.random.default_rng(ss), size, organs, f"synth{seed:04d}_{i:04d}", presence)
        for i, ss in enumerate(children)
    ]
    if out_dir is not None:
        write_dataset(samples, out_dir, generator={"seed": seed, "n_cases": n_cases, "organs": list(organs), "size": size, "presence": presence})
    return samples


# ---------------------------------------------------------------------------
# import of pre-sliced CT (``*.npz`` with ``image`` and ``label`` arrays)

# raw 13-label abdomen annotation -> this vocabulary; unlisted labels become background
SYNAPSE13 = {1: "spleen", 2: "kidney_right", 3: "kidney_left", 4: "gallbladder", 6: "liver", 7: "stomach", 8: "aorta", 11: "pancreas"}


def _normalize(image: np.ndarray) -> np.ndarray:
    image = image.astype(np.float64)
    if image.min() < 0 or image.max() > 1:
        lo, hi = image.min(), image.max()
        image = (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)
    return image.astype(np.float32)


def _resize(image: np.ndarray, label: np.ndarray, size: int):
    if image.shape == (size, size):
        return image, label
    zy, zx = size / image.shape[0], size / image.shape[1]
    image = ndimage.zoom(image, (zy, zx), order=1)
    label = ndimage.zoom(label, (zy, zx), order=0)
    return np.clip(image, 0, 1).astype(np.float32), label


def import_external(src: str | Path, out_dir: str | Path | None = None, size: int = 224, label_map: str = "synapse8") -> list[SegSample]:
    """Read ``*.npz`` slices (``image``/``label`` keys).

    ``label_map="synapse8"`` expects ids already in this vocabulary (the
    common preprocessed layout); ``"synapse13"`` remaps raw 13-organ
    annotations and drops the organs outside the 8-class set.
    """
    src = Path(src)
    files = sorted(src.glob("*.npz"))
    if not files:
        raise LoadError(f"{src}: no .npz slices")
    samples = []
    for f in files:
        try:
            with np.load(f) as z:
                image, label = z["image"], z["label"]
        except Exception as exc:
            raise LoadError(f"{f.name}: {exc}") from exc
        label = np.asarray(label).astype(np.int64)
        if label_map == "synapse13":
            mapped = np.zeros_like(label)
            for raw, organ in SYNAPSE13.items():
                mapped[label == raw] = CLASS_NAMES.index(organ)
            label = mapped
        elif label_map != "synapse8":
            raise ValueError(f"unknown label_map {label_map!r}")
        if label.min() < 0 or label.max() >= NUM_CLASSES:
            raise ValidationError(f"{f.name}: label value {int(label.max())} outside [0, {NUM_CLASSES})")
        image, label = _resize(_normalize(np.asarray(image)), label.astype(np.uint8), size)
        samples.append(SegSample(image, label, organs_in(label), f.stem).validate())
    if out_dir is not None:
        write_dataset(samples, out_dir, source=str(src), label_map=label_map)
    return samples
