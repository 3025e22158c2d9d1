"""Synthetic chest phantoms, CT windowing, patch cropping and volume files.

A phantom is an elliptic body cylinder of soft tissue in air, holding two
superellipsoid lungs; lesions are ground-glass blobs placed inside the lungs.
The lesion intensity band deliberately overlaps the chest-wall band, so a
lesion touching the lung border is hard to separate from the wall by
intensity alone.
"""
import struct
from dataclasses import dataclass, field

import numpy as np

AIR_HU = -1000.0


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (16, 32, 32)  # (d, h, w) voxels
    spacing: tuple = (2.0, 1.5, 1.5)  # mm
    lung_hu: tuple = (-900.0, -750.0)
    wall_hu: tuple = (-100.0, 100.0)
    lesion_hu: tuple = (-600.0, -50.0)
    lesion_count: tuple = (1, 3)  # inclusive range
    lesion_radius: tuple = (2.5, 5.0)  # voxels
    lung_radius: tuple = (0.34, 0.42)  # fraction of d
    lung_width: tuple = (0.26, 0.32)  # fraction of h
    lung_depth: tuple = (0.13, 0.17)  # fraction of w
    lung_exponent: tuple = (2.0, 3.0)
    noise_hu: float = 20.0

    def validate(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"shape must be three positive extents, got {self.shape}")
        for name in ("lung_hu", "wall_hu", "lesion_hu", "lesion_count", "lesion_radius",
                     "lung_radius", "lung_width", "lung_depth", "lung_exponent"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.lesion_count[0] < 0:
            raise ValueError("lesion_count must be >= 0")
        d, h, w = self.shape
        radii = (self.lung_radius[0] * d, self.lung_width[0] * h, self.lung_depth[0] * w)
        if min(radii) < 1.0:
            raise ValueError(f"lungs degenerate: smallest semi-axes {radii} below one voxel")
        if self.noise_hu < 0:
            raise ValueError("noise_hu must be >= 0")
        return self


@dataclass
class VolumeSample:
    image: np.ndarray  # (d, h, w) float32, HU-like
    lung_mask: np.ndarray  # (d, h, w) uint8
    lesion_mask: np.ndarray  # (d, h, w) uint8
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = None
    case_id: str = field(default="", compare=False)

    @property
    def shape(self):
        return self.image.shape

    def mask(self, task):
        if task == "lung":
            return self.lung_mask
        if task == "lesion":
            return self.lesion_mask
        raise ValueError(f"unknown task {task!r}")

    def same_as(self, other):
        """Voxel-exact equality of image, masks and spacing."""
        return (
            self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
            and _mask_equal(self.lung_mask, other.lung_mask)
            and _mask_equal(self.lesion_mask, other.lesion_mask)
            and tuple(np.float32(self.spacing)) == tuple(np.float32(other.spacing))
        )


def _mask_equal(a, b):
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


def _grid(shape):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) + 0.5 for n in shape), indexing="ij")


def generate_phantom(spec=PhantomSpec(), seed=0):
    spec.validate()
    rng = np.random.default_rng(seed)
    d, h, w = spec.shape
    z, y, x = _grid(spec.shape)
    u = lambda rng_pair: rng.uniform(*rng_pair)  # noqa: E731

    body = ((y - h / 2) / (0.46 * h)) ** 2 + ((x - w / 2) / (0.48 * w)) ** 2 <= 1.0
    lungs = np.zeros(spec.shape, dtype=bool)
    for side in (-1, 1):
        centre = (d / 2 + rng.uniform(-0.05, 0.05) * d, h / 2 + rng.uniform(-0.04, 0.04) * h,
                  w / 2 + side * 0.22 * w)
        radii = (u(spec.lung_radius) * d, u(spec.lung_width) * h, u(spec.lung_depth) * w)
        p = u(spec.lung_exponent)
        r = sum(np.abs((c - c0) / a) ** p for c, c0, a in zip((z, y, x), centre, radii))
        lungs |= (r <= 1.0) & body
    if not lungs.any():
        raise ValueError("degenerate spec: lungs are empty")

    image = np.full(spec.shape, AIR_HU)
    image[body] = u(spec.wall_hu)
    image[lungs] = u(spec.lung_hu)

    lesions = np.zeros(spec.shape, dtype=bool)
    count = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    inside = np.argwhere(lungs)
    for _ in range(count):
        centre = inside[rng.integers(len(inside))] + 0.5
        radii = u(spec.lesion_radius) * rng.uniform(0.75, 1.25, size=3)
        dist = sum(((c - c0) / a) ** 2 for c, c0, a in zip((z, y, x), centre, radii))
        blob = (dist <= 1.0) & lungs
        lesions |= blob
        # ground-glass falloff towards the rim, kept inside the labelled blob
        level = u(spec.lesion_hu)
        image[blob] = level + (image[blob] - level) * np.clip(dist[blob] - 0.6, 0, None)
    image += rng.normal(0.0, spec.noise_hu, spec.shape)
    return VolumeSample(
        image.astype(np.float32), lungs.astype(np.uint8), lesions.astype(np.uint8),
        tuple(float(s) for s in spec.spacing), seed,
    )


def window_transform(image, location, breadth):
    """Map the HU window [location - breadth/2, location + breadth/2] onto [0, 1]."""
    if not breadth > 0:
        raise ValueError(f"window breadth must be positive, got {breadth}")
    lo = location - breadth / 2
    return np.clip((np.asarray(image) - lo) / breadth, 0.0, 1.0)


def crop_patch(sample, size, rng):
    size = tuple(int(s) for s in size)
    if len(size) != 3:
        raise ValueError(f"patch size needs three extents, got {size}")
    for ax, s, n in zip("dhw", size, sample.shape):
        if s > n:
            raise ValueError(f"patch extent {s} along {ax} exceeds volume extent {n}")
        if s < 1 or s % 8:
            raise ValueError(f"patch extent {s} along {ax} must be a positive multiple of 8")
    offs = tuple(int(rng.integers(0, n - s + 1)) for s, n in zip(size, sample.shape))
    sl = tuple(slice(o, o + s) for o, s in zip(offs, size))
    crop = lambda m: None if m is None else m[sl].copy()  # noqa: E731
    return VolumeSample(sample.image[sl].copy(), crop(sample.lung_mask), crop(sample.lesion_mask),
                        sample.spacing, sample.seed, sample.case_id)


# ------------------------------------------------------------------ files

VOL_MAGIC = b"VVOL1"


class VolumeFormatError(ValueError):
    pass


def save_volume(path, sample):
    """VVOL1: magic, u32 d,h,w, f32 spacing, u8 mask flags, f32 voxels, u8 masks."""
    d, h, w = sample.image.shape
    flags = (sample.lung_mask is not None) | ((sample.lesion_mask is not None) << 1)
    with open(path, "wb") as f:
        f.write(VOL_MAGIC)
        f.write(struct.pack("<3I3fB", d, h, w, *sample.spacing, flags))
        f.write(np.ascontiguousarray(sample.image, dtype="<f4").tobytes())
        for m in (sample.lung_mask, sample.lesion_mask):
            if m is not None:
                f.write(np.ascontiguousarray(m, dtype=np.uint8).tobytes())


def load_volume(path):
    with open(path, "rb") as f:
        data = f.read()
    head = len(VOL_MAGIC) + struct.calcsize("<3I3fB")
    if data[: len(VOL_MAGIC)] != VOL_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic, not a VVOL1 file")
    if len(data) < head:
        raise VolumeFormatError(f"{path}: truncated header")
    d, h, w, sd, sh, sw, flags = struct.unpack("<3I3fB", data[len(VOL_MAGIC) : head])
    if flags > 3:
        raise VolumeFormatError(f"{path}: bad mask flags {flags}")
    n = d * h * w
    expected = head + 4 * n + n * bin(flags).count("1")
    if len(data) != expected:
        raise VolumeFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    image = np.frombuffer(data, "<f4", n, head).reshape(d, h, w).astype(np.float32)
    pos = head + 4 * n
    masks = []
    for bit in (1, 2):
        if flags & bit:
            masks.append(np.frombuffer(data, np.uint8, n, pos).reshape(d, h, w).copy())
            pos += n
        else:
            masks.append(None)
    spacing = tuple(float(v) for v in np.float32((sd, sh, sw)))
    return VolumeSample(image, masks[0], masks[1], spacing, None)


def _contour(mask):
    m = mask.astype(bool)
    inner = m.copy()
    inner[1:, :] &= m[:-1, :]
    inner[:-1, :] &= m[1:, :]
    inner[:, 1:] &= m[:, :-1]
    inner[:, :-1] &= m[:, 1:]
    return m & ~inner


def export_slice(sample, axis, index, path, location=-400.0, breadth=1200.0):
    """Write one windowed slice as a binary PGM with mask contours at 255."""
    img = np.take(sample.image, index, axis=axis)
    pix = np.round(window_transform(img, location, breadth) * 200).astype(np.uint8)
    for m in (sample.lung_mask, sample.lesion_mask):
        if m is not None:
            pix[_contour(np.take(m, index, axis=axis))] = 255
    rows, cols = pix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode())
        f.write(pix.tobytes())
    return pix.shape


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise VolumeFormatError(f"{path}: not a P5 graymap")
    cols, rows, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise VolumeFormatError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(parts[4], np.uint8, rows * cols).reshape(rows, cols)
