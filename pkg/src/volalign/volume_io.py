"""Volume ingestion, preprocessing, slicing and synthetic data.

Plane ``p`` always means array axis ``p``: 0 = coronal, 1 = sagittal,
2 = axial.  Every module that talks about planes goes through this mapping.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

PLANE_NAMES = ("coronal", "sagittal", "axial")
BODY_KINDS = ("sphere", "box", "ellipsoid")
SPLIT_RATIO = (7, 1, 2)
DEFAULT_SIDE = 128


class Modality(str, Enum):
    CT = "CT"
    MRI = "MRI"
    SYNTH = "SYNTH"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class VolumeRecord:
    """A preprocessed cubic volume with intensities in [0, 1]."""

    id: str
    voxels: np.ndarray
    spacing_mm: float = 1.0
    modality: Modality = Modality.SYNTH

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or len(set(v.shape)) != 1:
            raise ValueError(f"voxels must be a cube, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise ValueError(f"voxel values of {self.id!r} must lie in [0, 1]")
        if not self.spacing_mm > 0:
            raise ValueError(f"spacing_mm must be positive, got {self.spacing_mm}")
        v = np.array(v, copy=True)
        v.flags.writeable = False
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def side(self) -> int:
        return self.voxels.shape[0]


@dataclass(frozen=True)
class SliceSample:
    volume_id: str
    plane: int
    index: int
    pixels: np.ndarray

    @property
    def plane_name(self) -> str:
        return PLANE_NAMES[self.plane]


@dataclass(frozen=True)
class CaptionRecord:
    volume_id: str
    plane: int
    index: int
    text: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("caption text must be non-empty")

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.volume_id, self.plane, self.index)

    def to_json(self) -> str:
        return json.dumps(
            {"volume_id": self.volume_id, "plane": self.plane, "index": self.index, "text": self.text}
        )


@dataclass
class ManifestEntry:
    volume_path: str
    split: Split
    label_path: Optional[str] = None
    class_label: Optional[int] = None

    def to_dict(self) -> dict:
        d = {"volume_path": self.volume_path, "split": Split(self.split).value}
        if self.label_path is not None:
            d["label_path"] = self.label_path
        if self.class_label is not None:
            d["class_label"] = int(self.class_label)
        return d


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def split(self, name: str | Split) -> list[ManifestEntry]:
        name = Split(name)
        return [e for e in self.entries if Split(e.split) is name]

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_dict()) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        entries = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                d = json.loads(line)
                try:
                    entries.append(
                        ManifestEntry(
                            volume_path=d["volume_path"],
                            split=Split(d["split"]),
                            label_path=d.get("label_path"),
                            class_label=d.get("class_label"),
                        )
                    )
                except (KeyError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad manifest entry ({exc})") from exc
        return cls(entries)


def split_counts(n: int, ratio: Sequence[int] = SPLIT_RATIO) -> tuple[int, int, int]:
    """Subject counts for train/val/test; rounding remainder goes to train."""
    total = sum(ratio)
    val = int(round(n * ratio[1] / total))
    test = int(round(n * ratio[2] / total))
    return n - val - test, val, test


def assign_splits(n: int, rng: np.random.Generator | None = None) -> list[Split]:
    n_train, n_val, n_test = split_counts(n)
    splits = [Split.TRAIN] * n_train + [Split.VAL] * n_val + [Split.TEST] * n_test
    if rng is not None:
        splits = [splits[i] for i in rng.permutation(n)]
    return splits


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 0:
        return np.zeros_like(a)
    return ((a - lo) / (hi - lo)).astype(a.dtype)


def _pad_to_cube(a: np.ndarray, value: float = 0.0) -> np.ndarray:
    side = max(a.shape)
    pads = []
    for n in a.shape:
        extra = side - n
        pads.append((extra // 2, extra - extra // 2))
    return np.pad(a, pads, mode="constant", constant_values=value)


def _antialias(a: np.ndarray, factors: Sequence[float]) -> np.ndarray:
    sigma = [max(0.0, (1.0 / f - 1.0) / 2.0) for f in factors]
    if not any(sigma):
        return a
    return ndimage.gaussian_filter(a, sigma, mode="nearest")


def _resize_cube(a: np.ndarray, side: int, order: int) -> np.ndarray:
    if a.shape[0] == side:
        return a
    f = side / a.shape[0]
    if order > 0:
        a = _antialias(a, (f, f, f))
    return ndimage.zoom(a, f, order=order, mode="nearest", grid_mode=True)


def _resample_isotropic(a: np.ndarray, spacing: Sequence[float], order: int) -> np.ndarray:
    factors = [float(s) / 1.0 for s in spacing]
    if all(f == 1.0 for f in factors):
        return a
    if order > 0:
        a = _antialias(a, factors)
    return ndimage.zoom(a, factors, order=order, mode="nearest", grid_mode=True)


def _check_raw(raw: np.ndarray, spacing: Sequence[float]) -> None:
    if raw.ndim != 3:
        raise ValueError(f"expected a 3D array, got {raw.ndim} dimensions")
    if min(raw.shape) < 2:
        raise ValueError(f"degenerate volume shape {raw.shape}: every extent must be >= 2")
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive values, got {tuple(spacing)}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw volume contains non-finite values")


def preprocess_volume(
    raw: np.ndarray,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    side: int = DEFAULT_SIDE,
    volume_id: str = "volume",
    modality: Modality | str = Modality.SYNTH,
) -> VolumeRecord:
    """Resample to 1 mm, min-max normalize, zero-pad to a cube, rescale to ``side``.

    A final min-max pass restores exact [0, 1] endpoints lost to interpolation,
    which also makes the whole operation idempotent on its own output.
    Constant input maps to all zeros.
    """
    raw = np.asarray(raw, dtype=np.float32)
    _check_raw(raw, spacing)
    v = _resample_isotropic(raw, spacing, order=1)
    v = _minmax(v)
    v = _pad_to_cube(v)
    v = _resize_cube(v, side, order=1)
    v = np.clip(_minmax(v), 0.0, 1.0)
    return VolumeRecord(id=volume_id, voxels=v, spacing_mm=1.0, modality=modality)


def preprocess_labels(labels: np.ndarray, spacing: Sequence[float], side: int) -> np.ndarray:
    """Nearest-neighbour version of the intensity pipeline, for integer label maps."""
    labels = np.asarray(labels)
    _check_raw(labels, spacing)
    out = _resample_isotropic(labels, spacing, order=0)
    out = _pad_to_cube(out, 0)
    out = _resize_cube(out, side, order=0)
    return out.astype(np.int64)


# --------------------------------------------------------------------------
# slicing
# --------------------------------------------------------------------------


def extract_slice(v: VolumeRecord, plane: int, index: int) -> SliceSample:
    if plane not in (0, 1, 2):
        raise ValueError(f"plane must be 0, 1 or 2, got {plane}")
    if not 0 <= index < v.side:
        raise ValueError(f"slice index {index} out of range [0, {v.side})")
    pixels = np.take(v.voxels, index, axis=plane)
    return SliceSample(volume_id=v.id, plane=int(plane), index=int(index), pixels=pixels)


def sample_position(side: int, rng: np.random.Generator) -> tuple[int, int]:
    plane = int(rng.integers(3))
    index = int(rng.integers(side))
    return plane, index


def sample_slice(v: VolumeRecord, rng: np.random.Generator) -> SliceSample:
    """Draw a plane uniformly from {0,1,2} and a slice index uniformly from [0, S)."""
    plane, index = sample_position(v.side, rng)
    return extract_slice(v, plane, index)


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


@dataclass
class SyntheticDataset:
    volumes: list[VolumeRecord]
    labels: list[np.ndarray]
    class_labels: list[int]
    captions: list[CaptionRecord]
    splits: list[Split]

    def __len__(self) -> int:
        return len(self.volumes)

    def indices(self, split: str | Split) -> list[int]:
        split = Split(split)
        return [i for i, s in enumerate(self.splits) if s is split]

    def caption_index(self) -> dict[tuple[str, int, int], str]:
        return {c.key: c.text for c in self.captions}


def _join_kinds(kinds: Sequence[str]) -> str:
    words = [f"a {k}" if k != "ellipsoid" else f"an {k}" for k in kinds]
    if len(words) == 1:
        return words[0]
    return ", ".join(words[:-1]) + " and " + words[-1]


def caption_text(plane: int, index: int, kinds: Sequence[str]) -> str:
    """Template caption for a slice given the body kinds it intersects."""
    if not kinds:
        return f"slice {index} of plane {PLANE_NAMES[plane]} showing background"
    return f"{PLANE_NAMES[plane]} slice {index} showing {_join_kinds(kinds)}"


def kinds_in_labels(label_slice: np.ndarray) -> list[str]:
    present = set(np.unique(label_slice).tolist())
    return [k for c, k in enumerate(BODY_KINDS, 1) if c in present]


def slice_captions(volume_id: str, labels: np.ndarray) -> list[CaptionRecord]:
    out = []
    for plane in range(3):
        for index in range(labels.shape[plane]):
            kinds = kinds_in_labels(np.take(labels, index, axis=plane))
            out.append(CaptionRecord(volume_id, plane, index, caption_text(plane, index, kinds)))
    return out


def _body_mask(kind: str, grid: tuple[np.ndarray, ...], side: int, rng: np.random.Generator) -> np.ndarray:
    x, y, z = grid
    if kind == "sphere":
        r = rng.uniform(0.12, 0.22) * side
        radii = np.array([r, r, r])
    elif kind == "box":
        radii = rng.uniform(0.10, 0.22, size=3) * side
    else:
        # clearly anisotropic so it is not mistaken for a sphere
        long_axis = rng.uniform(0.22, 0.30) * side
        short = rng.uniform(0.08, 0.13, size=2) * side
        radii = np.array([long_axis, *short])[rng.permutation(3)]
    margin = radii + 1
    c = np.array([rng.uniform(m, side - 1 - m) for m in margin])
    if kind == "box":
        return (np.abs(x - c[0]) <= radii[0]) & (np.abs(y - c[1]) <= radii[1]) & (np.abs(z - c[2]) <= radii[2])
    return ((x - c[0]) / radii[0]) ** 2 + ((y - c[1]) / radii[1]) ** 2 + ((z - c[2]) / radii[2]) ** 2 <= 1.0


def synth_volume(side: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One noisy volume with 1-3 random bodies and its voxel label map."""
    grid = np.meshgrid(*(np.arange(side, dtype=np.float32),) * 3, indexing="ij")
    vol = rng.normal(0.15, 0.05, size=(side,) * 3).astype(np.float32)
    labels = np.zeros((side,) * 3, dtype=np.int64)
    n_bodies = int(rng.integers(1, 4))
    for _ in range(n_bodies):
        k = int(rng.integers(len(BODY_KINDS)))
        mask = _body_mask(BODY_KINDS[k], grid, side, rng)
        vol[mask] = rng.uniform(0.45, 0.85) + rng.normal(0.0, 0.05, size=int(mask.sum()))
        labels[mask] = k + 1
    return np.clip(vol, 0.0, 1.0), labels


def generate_synthetic_dataset(n: int, side: int = 32, seed: int | np.random.Generator = 0) -> SyntheticDataset:
    """Desk-scale stand-in for a pre-training corpus.

    Class label is 1 when the volume contains a (visible) sphere.  Splits are
    assigned 7:1:2 in shuffled order.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if side < 8:
        raise ValueError(f"side must be >= 8, got {side}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    volumes, labels, classes, captions = [], [], [], []
    width = max(4, len(str(n - 1)))
    for i in range(n):
        vid = f"synth_{i:0{width}d}"
        vol, lab = synth_volume(side, rng)
        volumes.append(VolumeRecord(id=vid, voxels=vol, spacing_mm=1.0, modality=Modality.SYNTH))
        labels.append(lab)
        classes.append(int((lab == 1).any()))
        captions.extend(slice_captions(vid, lab))
    splits = assign_splits(n, rng)
    return SyntheticDataset(volumes, labels, classes, captions, splits)


# --------------------------------------------------------------------------
# on-disk formats
# --------------------------------------------------------------------------


def write_raw(path: str | Path, array: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0),
              modality: str = "SYNTH") -> Path:
    """Little-endian float32 binary plus a ``.json`` sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f4")
    path.write_bytes(arr.tobytes(order="C"))
    sidecar = {"shape": list(arr.shape), "spacing": [float(s) for s in spacing], "modality": modality}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))
    return path


def read_raw(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float], str]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    shape = tuple(int(s) for s in meta["shape"])
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: {data.size} values do not match sidecar shape {shape}")
    return data.reshape(shape).astype(np.float32), tuple(meta["spacing"]), meta.get("modality", "SYNTH")


def read_volume_file(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float], str]:
    """Read NIfTI (.nii / .nii.gz) or raw+sidecar; returns (array, spacing, modality)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    if path.name.endswith((".nii", ".nii.gz")):
        import nibabel as nib

        img = nib.load(str(path))
        data = np.asarray(img.get_fdata(dtype=np.float32))
        if data.ndim == 4 and data.shape[3] == 1:
            data = data[..., 0]
        spacing = tuple(float(s) for s in img.header.get_zooms()[:3])
        return data, spacing, "MRI"
    return read_raw(path)


@dataclass
class LoadedVolume:
    entry: ManifestEntry
    volume: VolumeRecord
    labels: Optional[np.ndarray]


@dataclass
class LoadSummary:
    loaded: int = 0
    skipped: list[tuple[str, str]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.loaded + len(self.skipped)


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_nifti_dataset(
    manifest_path: str | Path, side: int = DEFAULT_SIDE, summary: LoadSummary | None = None
) -> tuple[DatasetManifest, Iterator[LoadedVolume]]:
    """Read a JSON-lines manifest and lazily load + preprocess its volumes.

    Bad entries (missing file, unreadable header, label/image shape mismatch)
    are logged and skipped; pass a ``LoadSummary`` to collect the tally.
    Relative paths resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.read(manifest_path)
    base = manifest_path.parent
    summary = summary if summary is not None else LoadSummary()

    def _iter() -> Iterator[LoadedVolume]:
        for entry in manifest.entries:
            try:
                raw, spacing, modality = read_volume_file(_resolve(base, entry.volume_path))
                if modality not in Modality.__members__:
                    modality = Modality.SYNTH
                labels = None
                if entry.label_path is not None:
                    lab, lab_spacing, _ = read_volume_file(_resolve(base, entry.label_path))
                    if lab.shape != raw.shape:
                        raise ValueError(f"label shape {lab.shape} != image shape {raw.shape}")
                    labels = preprocess_labels(np.rint(lab).astype(np.int64), spacing, side)
                vid = Path(entry.volume_path).name.split(".")[0]
                vol = preprocess_volume(raw, spacing, side=side, volume_id=vid, modality=modality)
            except Exception as exc:  # noqa: BLE001 - per-entry diagnostic, keep going
                logger.warning("skipping %s: %s", entry.volume_path, exc)
                summary.skipped.append((entry.volume_path, str(exc)))
                continue
            summary.loaded += 1
            yield LoadedVolume(entry, vol, labels)
        logger.info("loaded %d of %d manifest entries", summary.loaded, summary.total)

    return manifest, _iter()


def save_synthetic_dataset(ds: SyntheticDataset, out_dir: str | Path) -> Path:
    """Write volumes, labels (raw+sidecar), captions and manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for vol, lab, cls, split in zip(ds.volumes, ds.labels, ds.class_labels, ds.splits):
        vpath = Path("volumes") / f"{vol.id}.raw"
        lpath = Path("labels") / f"{vol.id}.raw"
        write_raw(out / vpath, vol.voxels, modality=vol.modality.value)
        write_raw(out / lpath, lab.astype(np.float32), modality=vol.modality.value)
        entries.append(ManifestEntry(str(vpath), split, str(lpath), cls))
    write_captions(out / "captions.jsonl", ds.captions)
    manifest_path = out / "manifest.jsonl"
    DatasetManifest(entries).write(manifest_path)
    return manifest_path


def write_captions(path: str | Path, captions: Sequence[CaptionRecord]) -> None:
    with open(path, "w") as fh:
        for c in captions:
            fh.write(c.to_json() + "\n")


def read_captions(path: str | Path) -> list[CaptionRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(CaptionRecord(d["volume_id"], int(d["plane"]), int(d["index"]), d["text"]))
    return out


def load_dataset_dir(out_dir: str | Path, side: int | None = None) -> SyntheticDataset:
    """Load a directory written by :func:`save_synthetic_dataset` back into memory."""
    out = Path(out_dir)
    manifest_path = out / "manifest.jsonl"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.jsonl in {out}")
    manifest = DatasetManifest.read(manifest_path)
    volumes, labels, classes, splits = [], [], [], []
    for e in manifest.entries:
        raw, spacing, modality = read_volume_file(out / e.volume_path)
        vid = Path(e.volume_path).name.split(".")[0]
        s = side or max(raw.shape)
        if raw.shape == (s, s, s) and tuple(spacing) == (1.0, 1.0, 1.0) and raw.min() >= 0 and raw.max() <= 1:
            vol = VolumeRecord(vid, raw, 1.0, modality)
        else:
            vol = preprocess_volume(raw, spacing, side=s, volume_id=vid, modality=modality)
        volumes.append(vol)
        if e.label_path is not None:
            lab, lsp, _ = read_volume_file(out / e.label_path)
            labels.append(preprocess_labels(np.rint(lab).astype(np.int64), lsp, s))
        else:
            labels.append(np.zeros((s,) * 3, dtype=np.int64))
        classes.append(int(e.class_label) if e.class_label is not None else -1)
        splits.append(Split(e.split))
    cap_path = out / "captions.jsonl"
    captions = read_captions(cap_path) if cap_path.exists() else []
    return SyntheticDataset(volumes, labels, classes, captions, splits)
