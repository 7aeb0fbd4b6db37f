"""CTF tensor files, synthetic four-chamber phantoms, augmentation and manifests.

CTF layout (all integers little-endian)::

    offset 0   b"CAMS"
    offset 4   u8  version (1)
    offset 5   u8  dtype code (1 = f32, 2 = f64, 3 = u8)
    offset 6   u8  ndim
    offset 7   u32 x ndim  dims
    ...        row-major payload
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor

MAGIC = b"CAMS"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
CODE_FOR = {np.dtype(v).newbyteorder("="): k for k, v in DTYPE_CODES.items()}


class CTFFormatError(ValueError):
    pass


def ctf_bytes(arr) -> bytes:
    if isinstance(arr, Tensor):
        arr = arr.data
    arr = np.asarray(arr)
    code = CODE_FOR.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise CTFFormatError(f"unsupported dtype {arr.dtype}; CTF stores float32, float64 and uint8")
    if arr.ndim > 255:
        raise CTFFormatError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()


def ctf_parse(buf: bytes) -> np.ndarray:
    if len(buf) < 7:
        raise CTFFormatError(f"header truncated: {len(buf)} bytes, need at least 7")
    if buf[:4] != MAGIC:
        raise CTFFormatError(f"bad magic {buf[:4]!r} at byte 0, expected {MAGIC!r}")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise CTFFormatError(f"unsupported version {version} at byte 4")
    if code not in DTYPE_CODES:
        raise CTFFormatError(f"unknown dtype code {code} at byte 5")
    dims_end = 7 + 4 * ndim
    if len(buf) < dims_end:
        raise CTFFormatError(f"dims truncated: header needs {dims_end} bytes, file has {len(buf)}")
    dims = struct.unpack_from(f"<{ndim}I", buf, 7)
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(buf) - dims_end
    if actual != expected:
        raise CTFFormatError(
            f"payload at byte {dims_end}: expected {expected} bytes for dims {dims}, found {actual}"
        )
    arr = np.frombuffer(buf, dtype=dtype, offset=dims_end).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def ctf_write(path, arr) -> None:
    Path(path).write_bytes(ctf_bytes(arr))


def ctf_read(path) -> np.ndarray:
    return ctf_parse(Path(path).read_bytes())


# -- phantoms ------------------------------------------------------------------

@dataclass(frozen=True)
class Chamber:
    """Ellipse ranges in units of the image size; centres are jittered uniformly."""

    label: int
    center: tuple[float, float]         # (row, col) fractions
    radii: tuple[float, float]          # (min, max) fraction for both semi-axes
    intensity: float


DEFAULT_CHAMBERS = (
    # fixed z-order: later chambers overwrite earlier ones where they overlap
    Chamber(1, (0.30, 0.66), (0.10, 0.14), 0.55),   # LA
    Chamber(2, (0.30, 0.34), (0.10, 0.14), 0.70),   # RA
    Chamber(3, (0.68, 0.66), (0.13, 0.18), 0.90),   # LV
    Chamber(4, (0.68, 0.34), (0.12, 0.16), 0.80),   # RV
)


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    chambers: tuple[Chamber, ...] = DEFAULT_CHAMBERS
    center_jitter: float = 0.04
    max_rotation: float = math.pi / 6
    background: float = 0.15
    body_intensity: float = 0.3
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.size < 4:
            raise ValueError("phantom size must be at least 4")
        for ch in self.chambers:
            if ch.radii[0] <= 0 or ch.radii[1] < ch.radii[0]:
                raise ValueError(f"degenerate radii {ch.radii} for label {ch.label}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def normalize(image: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-std per image."""
    image = np.asarray(image, dtype=np.float64)
    std = image.std()
    return ((image - image.mean()) / (std if std > 0 else 1.0)).astype(np.float32)


def generate_phantom(spec: PhantomSpec, index: int, normalized: bool = True):
    """Deterministic (image (1, H, W) float32, label (H, W) uint8) for ``(spec.seed, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    label = np.zeros((n, n), dtype=np.uint8)
    image = np.full((n, n), spec.background)
    body = ((yy / n - 0.5) / 0.46) ** 2 + ((xx / n - 0.5) / 0.44) ** 2 <= 1.0
    image[body] = spec.body_intensity
    for ch in spec.chambers:
        cy = (ch.center[0] + rng.uniform(-spec.center_jitter, spec.center_jitter)) * n
        cx = (ch.center[1] + rng.uniform(-spec.center_jitter, spec.center_jitter)) * n
        ry, rx = rng.uniform(*ch.radii, size=2) * n
        theta = rng.uniform(-spec.max_rotation, spec.max_rotation)
        dy, dx = yy - cy, xx - cx
        u = dy * math.cos(theta) + dx * math.sin(theta)
        v = -dy * math.sin(theta) + dx * math.cos(theta)
        inside = (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
        label[inside] = ch.label
        image[inside] = ch.intensity
    image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape) if spec.noise_sigma else image
    image = image.astype(np.float32)[None]
    return (normalize(image) if normalized else image), label


# -- augmentation ----------------------------------------------------------------

AUGMENTATIONS = ("hflip", "vflip", "rot90", "gauss_noise")


def augment(image: np.ndarray, label: np.ndarray, rng: np.random.Generator | None = None,
            flags=(), noise_sigma: float = 0.0):
    """Apply the requested ops in a fixed order; geometric ops act on image and label alike.

    ``rot90`` turns a quarter counter-clockwise. ``gauss_noise`` touches the
    image only and needs ``rng`` when ``noise_sigma > 0``.
    """
    unknown = set(flags) - set(AUGMENTATIONS)
    if unknown:
        raise ValueError(f"unknown augmentations {sorted(unknown)}")
    image, label = np.asarray(image), np.asarray(label)
    if "hflip" in flags:
        image, label = image[..., ::-1], label[..., ::-1]
    if "vflip" in flags:
        image, label = image[..., ::-1, :], label[..., ::-1, :]
    if "rot90" in flags:
        image, label = np.rot90(image, axes=(-2, -1)), np.rot90(label, axes=(-2, -1))
    image, label = np.ascontiguousarray(image), np.ascontiguousarray(label)
    if "gauss_noise" in flags and noise_sigma > 0:
        image = (image + rng.normal(0.0, noise_sigma, size=image.shape)).astype(image.dtype)
    return image, label


def random_augment(image, label, rng: np.random.Generator, noise_sigma: float = 0.05):
    """Each op independently with probability 1/2."""
    flags = tuple(f for f in AUGMENTATIONS if rng.random() < 0.5)
    return augment(image, label, rng, flags, noise_sigma)


# -- datasets --------------------------------------------------------------------

N_FOLDS = 5


def fold_assignment(count: int, seed: int) -> np.ndarray:
    """Shuffled indices, then position modulo 5."""
    perm = np.random.default_rng(seed).permutation(count)
    folds = np.empty(count, dtype=np.int64)
    folds[perm] = np.arange(count) % N_FOLDS
    return folds


def synth_dataset(spec: PhantomSpec, count: int, out_dir) -> Path:
    """Write ``count`` raw phantoms as CTF pairs plus ``manifest.jsonl``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    folds = fold_assignment(count, spec.seed)
    lines = []
    for i in range(count):
        image, label = generate_phantom(spec, i, normalized=False)
        sid = f"phantom_{i:05d}"
        img_path, lab_path = f"images/{sid}.ctf", f"labels/{sid}.ctf"
        ctf_write(out / img_path, image)
        ctf_write(out / lab_path, label)
        lines.append(json.dumps({"id": sid, "image": img_path, "label": lab_path, "fold": int(folds[i])}))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return out


@dataclass
class Sample:
    id: str
    image: np.ndarray     # (1, H, W) float32, normalised
    label: np.ndarray     # (H, W) uint8
    fold: int
    meta: dict = field(default_factory=dict)


def read_manifest(data_dir) -> list[dict]:
    data_dir = Path(data_dir)
    path = data_dir / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.jsonl in {data_dir}")
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        row = json.loads(line)
        missing = {"id", "image", "label", "fold"} - set(row)
        if missing:
            raise ValueError(f"{path}:{n}: missing fields {sorted(missing)}")
        rows.append(row)
    return rows


def load_dataset(data_dir, folds=None) -> list[Sample]:
    """Load manifest entries (optionally restricted to ``folds``), normalising each image."""
    data_dir = Path(data_dir)
    out = []
    for row in read_manifest(data_dir):
        if folds is not None and row["fold"] not in folds:
            continue
        for key in ("image", "label"):
            if not (data_dir / row[key]).exists():
                raise FileNotFoundError(f"{row['id']}: {row[key]} listed in manifest but missing")
        image = ctf_read(data_dir / row["image"])
        label = ctf_read(data_dir / row["label"])
        if image.ndim == 2:
            image = image[None]
        if image.shape[1:] != label.shape:
            raise ValueError(f"{row['id']}: image {image.shape} and label {label.shape} disagree")
        out.append(Sample(row["id"], normalize(image), label, int(row["fold"])))
    return out
