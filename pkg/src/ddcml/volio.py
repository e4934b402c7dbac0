"""Volume file I/O, dataset manifests, and the synthetic phantom generator.

Volumes are 3D scalar grids of gray levels in [0, 255], stored on disk in
the VOL1 format: 4-byte magic ``VOL1``, three little-endian uint32 dims
(nx, ny, nz), then nx*ny*nz little-endian float32 intensities with x
varying fastest (z slowest).  In memory a volume is a float32 array of
shape (nx, ny, nz).

Dataset manifests are CSV files with header ``subject_id,class_label,path``;
paths are resolved relative to the manifest's directory.

Phantoms are deterministic synthetic "brains": an outer ellipsoid, a
central ventricle sphere whose radius grows with an ordinal severity
grade, and a sinusoidal cortical-ribbon texture with a per-subject random
phase that models disease-irrelevant anatomical variation.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError

VOL1_MAGIC = b"VOL1"
VOL1_HEADER = struct.Struct("<4s3I")

MIN_PHANTOM_DIM = 16

# Phantom geometry constants: brain ellipsoid semi-axes as a fraction of
# each dim, ventricle base radius as a fraction of the smallest dim, and
# its per-grade growth rate.
BRAIN_SEMIAXIS_FRAC = 0.40
VENTRICLE_RADIUS_FRAC = 0.12
VENTRICLE_GROWTH_PER_GRADE = 0.15
BRAIN_INTENSITY = 140.0
VENTRICLE_INTENSITY = 40.0
RIBBON_INNER_RHO = 0.75  # texture shell, in normalized ellipsoid radius
RIBBON_WAVES = 8


class VolumeFormatError(DataError):
    """Base class for VOL1 parsing failures."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedVolumeError(VolumeFormatError):
    pass


class DimensionMismatchError(VolumeFormatError):
    pass


class NonFiniteVolumeError(VolumeFormatError):
    pass


class ManifestError(DataError):
    pass


@dataclass
class Volume:
    """3D intensity grid.  ``voxels`` is float32, shape (nx, ny, nz)."""

    voxels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.voxels, dtype=np.float32)
        if arr.ndim != 3:
            raise DataError(f"volume must be 3-D, got shape {arr.shape}")
        self.voxels = arr

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def validate(self) -> "Volume":
        """Check the intensity invariants (finite, within [0, 255])."""
        if any(d < 1 for d in self.dims):
            raise DataError(f"volume dims must be positive, got {self.dims}")
        if not np.isfinite(self.voxels).all():
            raise NonFiniteVolumeError("volume contains non-finite intensities")
        lo = float(self.voxels.min())
        hi = float(self.voxels.max())
        if lo < 0.0 or hi > 255.0:
            raise DataError(
                f"intensities outside [0, 255]: min={lo:.4g}, max={hi:.4g}"
            )
        return self

    def __eq__(self, other) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(
            self.voxels, other.voxels
        )


@dataclass(frozen=True)
class CaseRecord:
    """One dataset entry: subject, ordinal class grade, volume location."""

    subject_id: str
    class_label: int
    volume_path: Path


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one synthetic phantom."""

    severity: int
    subject_seed: int
    dims: tuple[int, int, int] = (32, 32, 32)
    nuisance_gain: float = 1.0
    texture_amplitude: float = 0.0
    shape_jitter: float = 0.0
    position_jitter: float = 0.0
    bias_field: float = 0.0
    edge_width: float = 0.0

    def __post_init__(self):
        if self.severity not in (0, 1, 2, 3, 4):
            raise UsageError(f"severity must be in 0..4, got {self.severity}")
        if self.nuisance_gain <= 0:
            raise UsageError("nuisance_gain must be positive")
        # 0.4 * 1.2 = 0.48 semi-axis fraction keeps the brain inside the volume
        if not 0.0 <= self.shape_jitter <= 0.2:
            raise UsageError(
                f"shape_jitter must be in [0, 0.2], got {self.shape_jitter}"
            )
        if not 0.0 <= self.position_jitter <= 2.0:
            raise UsageError(
                f"position_jitter must be in [0, 2], got {self.position_jitter}"
            )
        # sqrt(3) * 0.3 < 1 keeps the multiplicative field positive everywhere
        if not 0.0 <= self.bias_field <= 0.3:
            raise UsageError(
                f"bias_field must be in [0, 0.3], got {self.bias_field}"
            )
        if not 0.0 <= self.edge_width <= 4.0:
            raise UsageError(
                f"edge_width must be in [0, 4], got {self.edge_width}"
            )


def write_volume(volume: Volume, path) -> None:
    """Write a volume as VOL1.  Intensities round-trip bit-exact."""
    volume.validate()
    nx, ny, nz = volume.dims
    payload = volume.voxels.astype("<f4", copy=False).ravel(order="F")
    with open(path, "wb") as fh:
        fh.write(VOL1_HEADER.pack(VOL1_MAGIC, nx, ny, nz))
        fh.write(payload.tobytes())


def read_volume(path) -> Volume:
    """Read a VOL1 file, validating format and intensity invariants."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedVolumeError(f"{path}: file shorter than magic")
    if data[:4] != VOL1_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < VOL1_HEADER.size:
        raise TruncatedVolumeError(f"{path}: incomplete header")
    _, nx, ny, nz = VOL1_HEADER.unpack_from(data)
    if min(nx, ny, nz) < 1:
        raise DimensionMismatchError(f"{path}: nonpositive dim {(nx, ny, nz)}")
    body = len(data) - VOL1_HEADER.size
    if body % 4 != 0:
        raise TruncatedVolumeError(f"{path}: payload ends mid-value")
    count = body // 4
    expected = nx * ny * nz
    if count != expected:
        raise DimensionMismatchError(
            f"{path}: header declares {expected} voxels, payload has {count}"
        )
    flat = np.frombuffer(data, dtype="<f4", offset=VOL1_HEADER.size)
    if not np.isfinite(flat).all():
        raise NonFiniteVolumeError(f"{path}: non-finite intensity in payload")
    voxels = flat.reshape((nx, ny, nz), order="F")
    return Volume(voxels).validate()


def crop_downsample(volume: Volume, factor: int, target_dims) -> Volume:
    """Block-mean downsample by ``factor``, then center-crop to ``target_dims``.

    Downsampling uses non-overlapping cubic blocks (trailing partial blocks
    are dropped).  The crop is centered; when the margin is odd the window
    shifts toward the low index.
    """
    if factor < 1:
        raise UsageError(f"factor must be >= 1, got {factor}")
    target_dims = tuple(int(d) for d in target_dims)
    arr = volume.voxels.astype(np.float64)
    nx, ny, nz = arr.shape
    bx, by, bz = nx // factor, ny // factor, nz // factor
    if any(t > b for t, b in zip(target_dims, (bx, by, bz))):
        raise UsageError(
            f"target {target_dims} exceeds downsampled dims {(bx, by, bz)}"
        )
    if factor > 1:
        arr = arr[: bx * factor, : by * factor, : bz * factor]
        arr = arr.reshape(bx, factor, by, factor, bz, factor)
        arr = arr.mean(axis=(1, 3, 5))
    starts = [(c - t) // 2 for c, t in zip((bx, by, bz), target_dims)]
    sx, sy, sz = starts
    tx, ty, tz = target_dims
    out = arr[sx : sx + tx, sy : sy + ty, sz : sz + tz]
    return Volume(out.astype(np.float32))


def gen_phantom(spec: PhantomSpec) -> Volume:
    """Generate a deterministic severity-graded phantom volume.

    Construction: zero background; brain ellipsoid at intensity
    140 * nuisance_gain (clamped to [0, 255]); central ventricle sphere at
    intensity 40 with radius r0 * (1 + 0.15 * severity), r0 = 12% of the
    smallest dim; sinusoidal texture on the outer cortical shell with
    phases drawn from ``subject_seed`` and amplitude ``texture_amplitude``;
    per-axis brain semi-axes scaled by (1 + shape_jitter * u), u drawn
    uniformly from [-1, 1] per subject; whole-head center offset by
    position_jitter * u voxels per axis (head placement, like scanner
    positioning); a multiplicative linear intensity ramp across the head
    with per-axis slopes bias_field * u (coil shading that a global
    intensity correction cannot remove).  The ventricle rides with the
    head center but its size (the severity signal) is never jittered.

    edge_width > 0 replaces the hard region masks with linear
    partial-volume ramps edge_width voxels wide, like the soft tissue
    boundaries a scanner produces.  Zero keeps the exact hard-edge
    construction.
    """
    dims = tuple(int(d) for d in spec.dims)
    if min(dims) < MIN_PHANTOM_DIM:
        raise UsageError(
            f"dims {dims} too small for phantom structures (min {MIN_PHANTOM_DIM})"
        )
    nx, ny, nz = dims
    cx, cy, cz = (nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0
    ax, ay, az = (
        BRAIN_SEMIAXIS_FRAC * nx,
        BRAIN_SEMIAXIS_FRAC * ny,
        BRAIN_SEMIAXIS_FRAC * nz,
    )
    phase_az = phase_pol = 0.0
    slopes = np.zeros(3)
    if (
        spec.texture_amplitude != 0.0
        or spec.shape_jitter != 0.0
        or spec.position_jitter != 0.0
        or spec.bias_field != 0.0
    ):
        rng = np.random.Generator(np.random.PCG64(spec.subject_seed))
        # fixed draw order: enabling one nuisance never reshuffles another
        phase_az, phase_pol = rng.uniform(0.0, 2.0 * np.pi, size=2)
        jit = rng.uniform(-1.0, 1.0, size=3)
        ax *= 1.0 + spec.shape_jitter * jit[0]
        ay *= 1.0 + spec.shape_jitter * jit[1]
        az *= 1.0 + spec.shape_jitter * jit[2]
        if spec.position_jitter != 0.0:
            off = rng.uniform(-1.0, 1.0, size=3) * spec.position_jitter
            cx += off[0]
            cy += off[1]
            cz += off[2]
        if spec.bias_field != 0.0:
            slopes = rng.uniform(-1.0, 1.0, size=3) * spec.bias_field
    x = (np.arange(nx, dtype=np.float64) - cx)[:, None, None]
    y = (np.arange(ny, dtype=np.float64) - cy)[None, :, None]
    z = (np.arange(nz, dtype=np.float64) - cz)[None, None, :]

    # Normalized ellipsoid radius (1.0 on the brain surface).
    rho = np.sqrt((x / ax) ** 2 + (y / ay) ** 2 + (z / az) ** 2)
    brain = rho <= 1.0

    r0 = VENTRICLE_RADIUS_FRAC * min(dims)
    r_vent = r0 * (1.0 + VENTRICLE_GROWTH_PER_GRADE * spec.severity)
    level = min(BRAIN_INTENSITY * spec.nuisance_gain, 255.0)

    if spec.edge_width > 0.0:
        # signed distances in voxels, linear occupancy ramp across the edge
        d_brain = (rho - 1.0) * (ax + ay + az) / 3.0
        d_vent = np.sqrt(x**2 + y**2 + z**2) - r_vent
        w_brain = np.clip(0.5 - d_brain / spec.edge_width, 0.0, 1.0)
        w_vent = np.clip(0.5 - d_vent / spec.edge_width, 0.0, 1.0)
        vox = w_brain * (level + w_vent * (VENTRICLE_INTENSITY - level))
    else:
        vent = x**2 + y**2 + z**2 <= r_vent**2
        vox = np.zeros(dims, dtype=np.float64)
        vox[brain] = level
        vox[vent & brain] = VENTRICLE_INTENSITY

    if spec.texture_amplitude != 0.0:
        azimuth = np.arctan2(y / ay, x / ax)
        polar = np.arccos(np.clip((z / az) / np.maximum(rho, 1e-12), -1.0, 1.0))
        ribbon = brain & (rho >= RIBBON_INNER_RHO)
        texture = (
            spec.texture_amplitude
            * np.sin(RIBBON_WAVES * azimuth + phase_az)
            * np.sin(RIBBON_WAVES * polar + phase_pol)
        )
        vox[ribbon] += texture[ribbon]

    if spec.bias_field != 0.0:
        # head-anchored ramp; zero background stays zero under multiplication
        vox *= 1.0 + slopes[0] * (x / ax) + slopes[1] * (y / ay) + slopes[2] * (z / az)

    np.clip(vox, 0.0, 255.0, out=vox)
    return Volume(vox.astype(np.float32))


def ventricle_voxel_count(volume: Volume) -> int:
    """Count voxels at the ventricle intensity (for monotonicity checks)."""
    return int(np.count_nonzero(volume.voxels == VENTRICLE_INTENSITY))


def load_manifest(path, class_count: int = 5) -> list[CaseRecord]:
    """Load a manifest CSV into validated case records.

    Rejects malformed rows, labels outside 0..class_count-1, and duplicate
    (subject_id, path) pairs.  Relative paths resolve against the manifest
    directory.
    """
    path = Path(path)
    base = path.parent
    records: list[CaseRecord] = []
    seen: set[tuple[str, str]] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["subject_id", "class_label", "path"]:
            raise ManifestError(f"{path}: bad header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            subject_id, label_text, rel = (field.strip() for field in row)
            if not subject_id:
                raise ManifestError(f"{path}:{lineno}: empty subject_id")
            try:
                label = int(label_text)
            except ValueError:
                raise ManifestError(
                    f"{path}:{lineno}: class_label {label_text!r} is not an integer"
                ) from None
            if not 0 <= label < class_count:
                raise ManifestError(
                    f"{path}:{lineno}: class_label {label} outside 0..{class_count - 1}"
                )
            key = (subject_id, rel)
            if key in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate entry {key}")
            seen.add(key)
            vol_path = Path(rel)
            if not vol_path.is_absolute():
                vol_path = base / vol_path
            records.append(CaseRecord(subject_id, label, vol_path))
    return records


def write_manifest(records: list[CaseRecord], path) -> None:
    """Write case records as a manifest CSV with paths relative to it."""
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "class_label", "path"])
        for rec in records:
            vol_path = Path(rec.volume_path).resolve()
            try:
                rel = vol_path.relative_to(base)
            except ValueError:
                rel = vol_path
            writer.writerow([rec.subject_id, rec.class_label, rel.as_posix()])


def generate_corpus(
    outdir,
    count_per_class: int,
    dims: tuple[int, int, int],
    seed: int,
    texture_amplitude: float = 0.0,
    gain_spread: float = 0.0,
    shape_jitter: float = 0.0,
    position_jitter: float = 0.0,
    bias_field: float = 0.0,
    edge_width: float = 0.0,
    classes: tuple[int, ...] = (0, 1, 2, 3, 4),
) -> list[CaseRecord]:
    """Write a deterministic phantom corpus and return its case records.

    Each subject gets its own texture/shape seed and a nuisance intensity
    gain drawn uniformly from [1 - gain_spread, 1 + gain_spread], all
    derived from the corpus seed.  Files land in outdir as
    ``c<grade>s<idx>.vol``.
    """
    if count_per_class < 1:
        raise UsageError(f"count_per_class must be >= 1, got {count_per_class}")
    if not 0.0 <= gain_spread < 1.0:
        raise UsageError(f"gain_spread must be in [0, 1), got {gain_spread}")
    if not classes or len(set(classes)) != len(classes):
        raise UsageError(f"classes must be nonempty and unique, got {classes}")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))
    records = []
    for label in classes:
        for i in range(count_per_class):
            subject_seed = int(rng.integers(2**31))
            gain = 1.0 + gain_spread * float(rng.uniform(-1.0, 1.0))
            spec = PhantomSpec(
                severity=label,
                subject_seed=subject_seed,
                dims=dims,
                nuisance_gain=gain,
                texture_amplitude=texture_amplitude,
                shape_jitter=shape_jitter,
                position_jitter=position_jitter,
                bias_field=bias_field,
                edge_width=edge_width,
            )
            subject_id = f"c{label}s{i:03d}"
            path = outdir / f"{subject_id}.vol"
            write_volume(gen_phantom(spec), path)
            records.append(CaseRecord(subject_id, label, path))
    return records
