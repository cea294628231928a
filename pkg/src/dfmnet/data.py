"""Image ingestion: samples, dataset manifests, saliency PNG output."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, EmptyDataset, MissingFile, ShapeMismatch
from .ops import resize_bilinear
from .tensor import DTYPE, no_grad

INPUT_SIZE = 256
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".pgm", ".ppm", ".tif", ".tiff")
AUX_KINDS = ("depth8", "depth16", "flow_rgb")


@dataclass
class Sample:
    """One training/eval example as CHW float32 arrays in [0, 1]."""

    rgb: np.ndarray
    aux: np.ndarray
    gt: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ShapeMismatch(f"rgb must be 3xHxW, got {self.rgb.shape}")
        if self.aux.ndim != 3 or self.aux.shape[0] not in (1, 3):
            raise ShapeMismatch(f"aux must be 1xHxW or 3xHxW, got {self.aux.shape}")
        if self.gt.shape != (1,) + self.rgb.shape[1:] or self.aux.shape[1:] != self.rgb.shape[1:]:
            raise ShapeMismatch(f"extents disagree: {self.rgb.shape}, {self.aux.shape}, {self.gt.shape}")


def resize(arr: np.ndarray, size: int = INPUT_SIZE) -> np.ndarray:
    """Bilinear resize of a CHW array to ``size`` x ``size``."""
    if arr.shape[1:] == (size, size):
        return arr.astype(DTYPE, copy=False)
    with no_grad():
        return resize_bilinear(arr[None].astype(DTYPE), (size, size)).data[0]


def binarize(gt: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (gt >= threshold).astype(DTYPE)


def _open(path: Path) -> Image.Image:
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return img


def read_image(path, channels: int) -> np.ndarray:
    """Decode ``path`` to a CHW float array in [0, 1] with 1 or 3 channels.

    Integer images are divided by their type's maximum, so 8-bit 255 and
    16-bit 65535 both become 1.0.
    """
    img = _open(Path(path))
    if channels == 3:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        return arr.transpose(2, 0, 1).astype(DTYPE)
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.float64)
        scale = 65535.0 if img.mode.startswith("I;16") or arr.max() > 255 else 255.0
        arr = np.clip(arr / scale, 0.0, 1.0)
    elif img.mode == "F":
        arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    else:
        arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    return arr[None].astype(DTYPE)


def load_sample(rgb_path, aux_path, gt_path=None, aux_channels: int = 1, size: int = INPUT_SIZE) -> Sample:
    rgb = resize(read_image(rgb_path, 3), size)
    aux = resize(read_image(aux_path, aux_channels), size)
    gt = binarize(resize(read_image(gt_path, 1), size)) if gt_path is not None else np.zeros((1, size, size), DTYPE)
    return Sample(rgb, aux, gt, Path(rgb_path).stem)


@dataclass
class ManifestEntry:
    id: str
    rgb: Path
    aux: Path
    gt: Path | None


@dataclass
class DatasetManifest:
    """``root/RGB``, ``root/depth`` (or ``root/flow``) and ``root/GT``, matched by file stem."""

    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    aux_kind: str = "depth8"

    @property
    def aux_channels(self) -> int:
        return 3 if self.aux_kind == "flow_rgb" else 1

    def __len__(self) -> int:
        return len(self.entries)

    def load(self, i: int, size: int = INPUT_SIZE) -> Sample:
        e = self.entries[i]
        return load_sample(e.rgb, e.aux, e.gt, self.aux_channels, size)

    def __iter__(self):
        return (self.load(i) for i in range(len(self)))


def _by_stem(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _find_dir(root: Path, names) -> Path | None:
    for name in names:
        if (root / name).is_dir():
            return root / name
    return None


def scan_dataset(root, require_gt: bool = True) -> DatasetManifest:
    root = Path(root)
    if not root.is_dir():
        raise MissingFile(f"dataset root not found: {root}")
    rgb_dir = _find_dir(root, ("RGB", "rgb", "Image", "images"))
    if rgb_dir is None:
        raise MissingFile(f"{root} has no RGB/ directory")
    flow_dir = _find_dir(root, ("flow", "Flow"))
    aux_dir = flow_dir or _find_dir(root, ("depth", "Depth"))
    if aux_dir is None:
        raise MissingFile(f"{root} has no depth/ or flow/ directory")
    gt_dir = _find_dir(root, ("GT", "gt", "mask", "masks"))
    if require_gt and gt_dir is None:
        raise MissingFile(f"{root} has no GT/ directory")
    rgbs, auxs = _by_stem(rgb_dir), _by_stem(aux_dir)
    gts = _by_stem(gt_dir) if gt_dir is not None else {}
    entries = []
    for stem, rgb in rgbs.items():
        if stem not in auxs:
            raise MissingFile(f"no {aux_dir.name} image for {rgb.name}")
        if require_gt and stem not in gts:
            raise MissingFile(f"no GT image for {rgb.name}")
        entries.append(ManifestEntry(stem, rgb, auxs[stem], gts.get(stem)))
    if not entries:
        raise EmptyDataset(f"no images under {rgb_dir}")
    kind = "flow_rgb" if flow_dir is not None else "depth8"
    if kind == "depth8" and any(Image.open(e.aux).mode.startswith("I") for e in entries[:1]):
        kind = "depth16"
    return DatasetManifest(root, entries, kind)


def to_uint8(saliency: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(saliency, np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_saliency(saliency: np.ndarray, path) -> None:
    """Write an HxW (or 1xHxW) map in [0, 1] as 8-bit grayscale PNG."""
    arr = np.asarray(saliency)
    arr = arr.reshape(arr.shape[-2:])
    Image.fromarray(to_uint8(arr), mode="L").save(path, format="PNG")


def save_image(arr: np.ndarray, path) -> None:
    """Write a CHW array in [0, 1] (1 or 3 channels) as 8-bit PNG."""
    u8 = to_uint8(arr)
    if u8.shape[0] == 1:
        Image.fromarray(u8[0], mode="L").save(path)
    else:
        Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path)
