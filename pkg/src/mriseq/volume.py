"""Volume file format, series labels, and dataset manifests.

A volume is stored as two files sharing a stem: ``<name>.vh`` is a UTF-8 JSON
header with dims, spacing and orientation, and ``<name>.vraw`` holds the voxels
as little-endian float32 with x fastest, i.e. flat index ``ix + nx*(iy + ny*iz)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ManifestError, VolumeFormatError

HEADER_SUFFIX = ".vh"
RAW_SUFFIX = ".vraw"

# One orientation code per storage axis, naming the anatomical direction of
# increasing index: "R→L" means index 0 is rightmost and the axis runs to the left.
ORIENTATION_CODES = ("R→L", "L→R", "A→P", "P→A", "I→S", "S→I")
CANONICAL_ORIENTATION = ("R→L", "P→A", "I→S")

_ANATOMICAL_AXIS = {
    "R→L": 0, "L→R": 0,
    "A→P": 1, "P→A": 1,
    "I→S": 2, "S→I": 2,
}


class SeriesLabel(str, Enum):
    """The eight series types, in canonical order."""

    T1W_PRE = "T1w-pre"
    T1W_ART = "T1w-art"
    T1W_VEN = "T1w-ven"
    T1W_DEL = "T1w-del"
    T2W = "T2w"
    T2FS = "T2fs"
    DWI = "DWI"
    ADC = "ADC"

    @property
    def index(self) -> int:
        return _LABEL_INDEX[self]

    @classmethod
    def parse(cls, text: str) -> "SeriesLabel":
        """Case-insensitive parse of a label string."""
        key = text.strip().casefold()
        try:
            return _LABEL_BY_FOLDED[key]
        except KeyError:
            raise ManifestError(
                f"unknown series label {text!r}; expected one of "
                + ", ".join(l.value for l in cls)
            ) from None

    @classmethod
    def from_index(cls, i: int) -> "SeriesLabel":
        if not 0 <= i < len(LABELS):
            raise ManifestError(f"label index {i} out of range [0,{len(LABELS)})")
        return LABELS[i]


LABELS: tuple[SeriesLabel, ...] = tuple(SeriesLabel)
_LABEL_INDEX = {label: i for i, label in enumerate(LABELS)}
_LABEL_BY_FOLDED = {label.value.casefold(): label for label in LABELS}
NUM_CLASSES = len(LABELS)


@dataclass(frozen=True)
class Volume3D:
    """Immutable voxel grid with physical spacing and orientation."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    orientation: tuple[str, str, str]
    data: np.ndarray  # flat float32, x fastest

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        orientation = tuple(self.orientation)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise VolumeFormatError(f"dims must be three positive ints, got {self.dims}")
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise VolumeFormatError(f"spacing must be three positive floats, got {self.spacing}")
        _check_orientation(orientation)
        data = np.asarray(self.data)
        if data.dtype != np.float32 and data.dtype != np.float64:
            raise VolumeFormatError(f"voxel dtype must be float32/float64, got {data.dtype}")
        if data.ndim != 1 or data.size != dims[0] * dims[1] * dims[2]:
            raise VolumeFormatError(
                f"voxel count {data.size} does not match dims {dims}"
            )
        if data.flags.writeable:
            data = data.copy()
            data.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "orientation", orientation)
        object.__setattr__(self, "data", data)

    def array(self) -> np.ndarray:
        """Read-only view shaped (nx, ny, nz); x fastest means Fortran order."""
        return self.data.reshape(self.dims, order="F")

    @classmethod
    def from_array(
        cls,
        arr: np.ndarray,
        spacing: tuple[float, float, float],
        orientation: tuple[str, str, str] = CANONICAL_ORIENTATION,
    ) -> "Volume3D":
        """Build a volume from an (nx, ny, nz) array."""
        arr = np.asarray(arr)
        if arr.ndim != 3:
            raise VolumeFormatError(f"expected a 3-D array, got shape {arr.shape}")
        flat = np.ravel(arr, order="F").astype(np.float32, copy=False)
        return cls(tuple(arr.shape), spacing, orientation, flat)


def _check_orientation(orientation) -> None:
    if len(orientation) != 3:
        raise VolumeFormatError(f"orientation must have three codes, got {orientation!r}")
    axes = []
    for code in orientation:
        if code not in _ANATOMICAL_AXIS:
            raise VolumeFormatError(
                f"unknown orientation code {code!r}; expected one of {ORIENTATION_CODES}"
            )
        axes.append(_ANATOMICAL_AXIS[code])
    if sorted(axes) != [0, 1, 2]:
        raise VolumeFormatError(
            f"orientation {orientation!r} must cover all three anatomical axes"
        )


def _raw_path(header_path: Path) -> Path:
    if header_path.suffix != HEADER_SUFFIX:
        raise VolumeFormatError(f"volume path must end with {HEADER_SUFFIX}: {header_path}")
    return header_path.with_suffix(RAW_SUFFIX)


def read_volume(path: str | Path) -> Volume3D:
    """Read a .vh/.vraw pair; raises VolumeFormatError on any inconsistency."""
    header_path = Path(path)
    raw_path = _raw_path(header_path)
    if not header_path.is_file():
        raise VolumeFormatError(f"missing volume header {header_path}")
    if not raw_path.is_file():
        raise VolumeFormatError(f"missing voxel file {raw_path}")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"unreadable volume header {header_path}: {exc}") from None
    if not isinstance(header, dict):
        raise VolumeFormatError(f"volume header {header_path} must be a JSON object")
    missing = {"dims", "spacing", "orientation"} - header.keys()
    if missing:
        raise VolumeFormatError(f"volume header {header_path} missing keys {sorted(missing)}")
    dims = header["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or any(not isinstance(d, int) or isinstance(d, bool) for d in dims)):
        raise VolumeFormatError(f"volume header {header_path}: dims must be three ints")
    raw = raw_path.read_bytes()
    expected = 4 * dims[0] * dims[1] * dims[2] if min(dims, default=0) > 0 else -1
    if len(raw) != expected:
        raise VolumeFormatError(
            f"voxel file {raw_path} holds {len(raw)} bytes, expected {expected} "
            f"for dims {dims}"
        )
    data = np.frombuffer(raw, dtype="<f4")
    return Volume3D(tuple(dims), tuple(header["spacing"]), tuple(header["orientation"]), data)


def write_volume(vol: Volume3D, path: str | Path) -> None:
    """Write a .vh/.vraw pair; the header path must end with .vh."""
    header_path = Path(path)
    raw_path = _raw_path(header_path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "orientation": list(vol.orientation),
    }
    header_path.write_text(
        json.dumps(header, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    raw_path.write_bytes(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())


def reorient(vol: Volume3D, target: tuple[str, str, str] = CANONICAL_ORIENTATION) -> Volume3D:
    """Permute/flip storage axes so the volume's orientation equals ``target``.

    Pure index rearrangement: no values change and spacing follows its axis.
    """
    target = tuple(target)
    _check_orientation(target)
    if vol.orientation == target:
        return vol
    src_axis_of = {_ANATOMICAL_AXIS[c]: i for i, c in enumerate(vol.orientation)}
    perm = tuple(src_axis_of[_ANATOMICAL_AXIS[c]] for c in target)
    arr = np.transpose(vol.array(), perm)
    flips = [j for j, code in enumerate(target) if vol.orientation[perm[j]] != code]
    if flips:
        arr = np.flip(arr, axis=flips)
    spacing = tuple(vol.spacing[p] for p in perm)
    return Volume3D.from_array(arr, spacing, target)


MANIFEST_COLUMNS = (
    "volume_path", "patient_id", "study_id", "label", "scanner_domain",
    "body_region", "b_value", "tr_ms", "te_ms", "flip_deg",
)
_OPTIONAL_FLOAT_COLUMNS = ("b_value", "tr_ms", "te_ms", "flip_deg")


@dataclass(frozen=True)
class SeriesRecord:
    """One manifest row: a single series volume plus its acquisition metadata."""

    volume_path: str
    patient_id: str
    study_id: str
    label: SeriesLabel
    scanner_domain: str
    body_region: str = ""
    b_value: float | None = None
    tr_ms: float | None = None
    te_ms: float | None = None
    flip_deg: float | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """An ordered collection of series records rooted at a directory."""

    records: tuple[SeriesRecord, ...]
    root_dir: str = "."

    def resolve(self, record: SeriesRecord) -> Path:
        p = Path(record.volume_path)
        return p if p.is_absolute() else Path(self.root_dir) / p

    def patients(self) -> list[str]:
        """Unique patient ids in first-appearance order."""
        seen: dict[str, None] = {}
        for rec in self.records:
            seen.setdefault(rec.patient_id, None)
        return list(seen)

    def filter_patients(self, patient_ids) -> "DatasetManifest":
        keep = set(patient_ids)
        return replace(
            self, records=tuple(r for r in self.records if r.patient_id in keep)
        )

    def union(self, other: "DatasetManifest") -> "DatasetManifest":
        """Concatenate two manifests, rewriting paths so one root suffices."""
        def absolute(m: "DatasetManifest"):
            return tuple(
                replace(r, volume_path=str(m.resolve(r))) for r in m.records
            )
        merged = absolute(self) + absolute(other)
        keys = set()
        for rec in merged:
            key = (rec.patient_id, rec.study_id, rec.volume_path)
            if key in keys:
                raise ManifestError(f"duplicate series {key} in manifest union")
            keys.add(key)
        return DatasetManifest(records=merged, root_dir=".")


def load_manifest(path: str | Path, root_dir: str | Path | None = None,
                  check_paths: bool = True) -> DatasetManifest:
    """Load a manifest CSV; row order is preserved.

    Paths are taken relative to ``root_dir`` (default: the CSV's directory) and
    must resolve to existing .vh files when ``check_paths`` is set.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"missing manifest {path}")
    root = Path(root_dir) if root_dir is not None else path.parent
    records: list[SeriesRecord] = []
    keys: set[tuple[str, str, str]] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"manifest {path} is empty") from None
        if tuple(header) != MANIFEST_COLUMNS:
            raise ManifestError(
                f"manifest {path} header {header} does not match {list(MANIFEST_COLUMNS)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(
                    f"manifest {path} line {lineno}: expected {len(MANIFEST_COLUMNS)} "
                    f"fields, got {len(row)}"
                )
            values = dict(zip(MANIFEST_COLUMNS, row))
            for col in ("volume_path", "patient_id", "study_id", "scanner_domain"):
                if not values[col]:
                    raise ManifestError(f"manifest {path} line {lineno}: empty {col}")
            try:
                label = SeriesLabel.parse(values["label"])
            except ManifestError as exc:
                raise ManifestError(f"manifest {path} line {lineno}: {exc}") from None
            floats = {}
            for col in _OPTIONAL_FLOAT_COLUMNS:
                text = values[col].strip()
                if not text:
                    floats[col] = None
                    continue
                try:
                    floats[col] = float(text)
                except ValueError:
                    raise ManifestError(
                        f"manifest {path} line {lineno}: bad {col} value {text!r}"
                    ) from None
            rec = SeriesRecord(
                volume_path=values["volume_path"],
                patient_id=values["patient_id"],
                study_id=values["study_id"],
                label=label,
                scanner_domain=values["scanner_domain"],
                body_region=values["body_region"],
                **floats,
            )
            key = (rec.patient_id, rec.study_id, rec.volume_path)
            if key in keys:
                raise ManifestError(f"manifest {path} line {lineno}: duplicate series {key}")
            keys.add(key)
            records.append(rec)
    manifest = DatasetManifest(records=tuple(records), root_dir=str(root))
    if check_paths:
        for rec in manifest.records:
            vp = manifest.resolve(rec)
            if not vp.is_file():
                raise ManifestError(f"manifest {path}: volume {vp} does not exist")
    return manifest


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in manifest.records:
            writer.writerow([
                rec.volume_path, rec.patient_id, rec.study_id, rec.label.value,
                rec.scanner_domain, rec.body_region,
                *(("" if v is None else format(v, "g")) for v in
                  (rec.b_value, rec.tr_ms, rec.te_ms, rec.flip_deg)),
            ])
