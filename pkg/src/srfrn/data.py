"""Dataset manifests, dihedral augmentation, patch extraction, and batching.

Training examples are (interpolated-LR, HR) patch pairs built from Y planes:
an HR patch is bicubic-downscaled by the target scale and upscaled back, so
the network input already has the output geometry. Planes are packed into
single-channel float32 tensors scaled to [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import Plane, bicubic_resize
from .tensor import STANDARD, Tensor

SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Manifest or patch-cache contents violate the data contracts."""


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    split: str
    dataset: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    scale: int

    def split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]


def load_manifest(path, scale: int) -> Manifest:
    """Parse the tab-separated manifest: path, split, dataset — one per line."""
    entries = []
    seen = set()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        img_path, split, dataset = parts
        if split not in SPLITS:
            raise DataError(f"{path}:{lineno}: unknown split {split!r}")
        if img_path in seen:
            raise DataError(f"{path}:{lineno}: duplicate path {img_path!r}")
        seen.add(img_path)
        entries.append(ManifestEntry(Path(img_path), split, dataset))
    return Manifest(entries, scale)


def write_manifest(entries: list[ManifestEntry], path) -> None:
    lines = [f"{e.path}\t{e.split}\t{e.dataset}" for e in entries]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def apply_dihedral(p: Plane, variant: int) -> Plane:
    """One of the 8 square symmetries: variants 0-3 rotate by 90*variant
    degrees, variants 4-7 flip horizontally first, then rotate."""
    if not 0 <= variant <= 7:
        raise ValueError(f"variant must be in 0..7, got {variant}")
    arr = p.samples
    if variant >= 4:
        arr = np.fliplr(arr)
    return Plane(np.rot90(arr, variant % 4))


def dihedral_inverse(variant: int) -> int:
    """The variant that undoes ``variant`` (reflections are involutions)."""
    if not 0 <= variant <= 7:
        raise ValueError(f"variant must be in 0..7, got {variant}")
    return (4 - variant) % 4 if variant < 4 else variant


def augment_x8(p: Plane) -> list[Plane]:
    """All 8 dihedral variants, in variant order, duplicates never removed."""
    return [apply_dihedral(p, v) for v in range(8)]


def extract_patches(hr: Plane, m: int, stride: int) -> list[tuple[Plane, int, int]]:
    """Grid-aligned m-by-m patches fully inside the plane; corners at stride
    multiples. Returns (patch, y, x) triples."""
    if m > min(hr.height, hr.width):
        raise DataError(f"patch size {m} exceeds image {hr.width}x{hr.height}")
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    patches = []
    for y in range(0, hr.height - m + 1, stride):
        for x in range(0, hr.width - m + 1, stride):
            patches.append((Plane(hr.samples[y : y + m, x : x + m]), y, x))
    return patches


@dataclass(frozen=True)
class PatchSource:
    image_id: str
    y: int
    x: int
    variant: int


@dataclass
class PatchPair:
    ilr: Plane
    hr: Plane
    source: PatchSource


def make_pair(hr_patch: Plane, scale: int, source: PatchSource | None = None) -> PatchPair:
    """Degrade an HR patch: bicubic down by ``scale``, bicubic back up."""
    m_h, m_w = hr_patch.height, hr_patch.width
    if m_h % scale or m_w % scale:
        raise DataError(f"patch {m_w}x{m_h} not divisible by scale {scale}")
    lr = bicubic_resize(hr_patch, m_w // scale, m_h // scale)
    ilr = bicubic_resize(lr, m_w, m_h)
    return PatchPair(ilr, hr_patch, source or PatchSource("", 0, 0, 0))


def planes_to_tensor(planes: list[Plane]) -> Tensor:
    """Stack planes into a (B, 1, H, W) float32 tensor scaled to [0, 1]."""
    stacked = np.stack([p.samples for p in planes])[:, None, :, :]
    return Tensor((stacked / 255.0).astype(STANDARD))


def tensor_to_planes(t: Tensor) -> list[Plane]:
    """Inverse of planes_to_tensor (values scaled back to [0, 255])."""
    arr = t.data[:, 0].astype(np.float64) * 255.0
    return [Plane(arr[i]) for i in range(arr.shape[0])]


def batch_iter(pairs: list[PatchPair], batch_size: int = 24, seed: int = 0):
    """Yield (ilr, hr) tensor batches in a seeded shuffle order.

    Every pair appears exactly once; the final short batch is emitted.
    """
    if not pairs:
        raise DataError("batch_iter received no pairs")
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng(seed).permutation(len(pairs))
    for start in range(0, len(pairs), batch_size):
        chunk = [pairs[i] for i in order[start : start + batch_size]]
        yield (
            planes_to_tensor([p.ilr for p in chunk]),
            planes_to_tensor([p.hr for p in chunk]),
        )


def pair_filename(source: PatchSource) -> str:
    return f"{source.image_id}_{source.variant}_{source.y}_{source.x}.pair"


def save_pair(pair: PatchPair, directory) -> Path:
    """Write one little-endian binary pair file: u32 m, ilr f32 plane, hr f32 plane."""
    if pair.ilr.samples.shape != pair.hr.samples.shape:
        raise DataError("pair planes must share dimensions")
    if pair.ilr.height != pair.ilr.width:
        raise DataError("cached pairs must be square")
    m = pair.ilr.height
    path = Path(directory) / pair_filename(pair.source)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", m))
        fh.write(pair.ilr.samples.astype("<f4").tobytes())
        fh.write(pair.hr.samples.astype("<f4").tobytes())
    return path


def load_pair(path) -> PatchPair:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4:
        raise DataError(f"{path}: too short for a pair header")
    (m,) = struct.unpack_from("<I", blob, 0)
    expected = 4 + 2 * m * m * 4
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes for m={m}, got {len(blob)}")
    planes = np.frombuffer(blob, dtype="<f4", count=2 * m * m, offset=4).astype(np.float64)
    stem = path.name[: -len(".pair")]
    try:
        image_id, variant, y, x = stem.rsplit("_", 3)
        source = PatchSource(image_id, int(y), int(x), int(variant))
    except ValueError as exc:
        raise DataError(f"{path}: name does not match image_variant_y_x.pair") from exc
    return PatchPair(
        Plane(planes[: m * m].reshape(m, m)),
        Plane(planes[m * m :].reshape(m, m)),
        source,
    )


def load_pair_dir(directory) -> list[PatchPair]:
    """All .pair files under a directory, sorted by filename for determinism."""
    paths = sorted(Path(directory).glob("*.pair"))
    if not paths:
        raise DataError(f"no .pair files in {directory}")
    return [load_pair(p) for p in paths]
