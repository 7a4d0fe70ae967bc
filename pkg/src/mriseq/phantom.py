"""Deterministic synthetic phantom generator for the eight series types.

Each patient gets a shared anatomy: an ellipsoidal body with a peripheral
fat shell and three internal compartments (fluid, vessel, solid) at
randomized positions. Every series type paints the same anatomy with a
distinct intensity vector, so classes are separable by construction while
sharing geometry. The table below lists the painted intensities per region
(before noise and domain effects). Values are fixed constants so runs with
different seeds stay comparable.

Region:            bg     body   fat    fluid  vessel solid
T1w-pre            0.02   0.38   0.85   0.20   0.35   0.42
T1w-art            0.02   0.78   0.85   0.20   0.72   0.88
T1w-ven            0.02   0.62   0.85   0.20   0.85   0.64
T1w-del            0.02   0.50   0.85   0.20   0.93   0.50
T2w                0.02   0.30   0.70   0.95   0.55   0.60
T2fs               0.02   0.42   0.15   0.95   0.55   0.60
DWI                0.02   0.30   0.25   0.15   0.45   0.90
ADC                0.05   0.60   0.55   0.90   0.50   0.15

The four T1w phases share geometry and differ only in a contrast ramp:
parenchyma peaks in the arterial phase and washes out (0.38 / 0.78 /
0.62 / 0.50), the vessel pool brightens monotonically (0.35 / 0.72 /
0.85 / 0.93), and the solid lesion hyperenhances then washes out
(0.42 / 0.88 / 0.64 / 0.50). The hardest confusions are therefore
between neighboring contrast phases. T2w and T2fs differ mainly in the
fat shell (bright vs suppressed). DWI and ADC invert the fluid/solid
contrast.

Scanner-domain profiles model a site change: profile A is the identity;
profile B applies a global gain and offset, multiplies by a smooth
unit-mean multiplicative bias field (coarse random grid, trilinearly
upsampled), and adds extra noise. The gain and offset alone are cancelled
exactly by percentile rescaling during preprocessing; what a domain-A
model actually notices is the extra noise and the bias field, which both
survive normalization. The default bias amplitude is mild so that a brief
low-rate finetune on a few domain-B patients can close most of the gap
without forgetting domain A.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .preprocess import trilinear_resize
from .volume import (
    CANONICAL_ORIENTATION,
    LABELS,
    DatasetManifest,
    SeriesLabel,
    SeriesRecord,
    Volume3D,
    save_manifest,
)

# Painted intensity per (background, body, fat shell, fluid, vessel, solid).
INTENSITY_TABLE: dict[SeriesLabel, tuple[float, float, float, float, float, float]] = {
    SeriesLabel.T1W_PRE: (0.02, 0.38, 0.85, 0.20, 0.35, 0.42),
    SeriesLabel.T1W_ART: (0.02, 0.78, 0.85, 0.20, 0.72, 0.88),
    SeriesLabel.T1W_VEN: (0.02, 0.62, 0.85, 0.20, 0.85, 0.64),
    SeriesLabel.T1W_DEL: (0.02, 0.50, 0.85, 0.20, 0.93, 0.50),
    SeriesLabel.T2W: (0.02, 0.30, 0.70, 0.95, 0.55, 0.60),
    SeriesLabel.T2FS: (0.02, 0.42, 0.15, 0.95, 0.55, 0.60),
    SeriesLabel.DWI: (0.02, 0.30, 0.25, 0.15, 0.45, 0.90),
    SeriesLabel.ADC: (0.05, 0.60, 0.55, 0.90, 0.50, 0.15),
}

REGION_NAMES = ("background", "body", "fat_shell", "fluid", "vessel", "solid")

# Inert acquisition metadata per series type (the model never reads these).
_ACQUISITION = {
    SeriesLabel.T1W_PRE: (None, 4.5, 2.1, 12.0),
    SeriesLabel.T1W_ART: (None, 4.5, 2.1, 12.0),
    SeriesLabel.T1W_VEN: (None, 4.5, 2.1, 12.0),
    SeriesLabel.T1W_DEL: (None, 4.5, 2.1, 12.0),
    SeriesLabel.T2W: (None, 4000.0, 90.0, 90.0),
    SeriesLabel.T2FS: (None, 4200.0, 95.0, 90.0),
    SeriesLabel.DWI: (800.0, 5000.0, 70.0, 90.0),
    SeriesLabel.ADC: (None, None, None, None),
}


@dataclass(frozen=True)
class DomainProfile:
    """Scanner-domain intensity transform applied after painting and noise."""

    name: str = "A"
    gain: float = 1.0
    offset: float = 0.0
    extra_noise_sigma: float = 0.0
    bias_field_amp: float = 0.0
    bias_grid: tuple[int, int, int] = (4, 4, 3)

    def __post_init__(self):
        if self.extra_noise_sigma < 0:
            raise ValueError("extra_noise_sigma must be non-negative")
        if self.bias_field_amp < 0:
            raise ValueError("bias_field_amp must be non-negative")
        if any(g < 1 for g in self.bias_grid):
            raise ValueError(f"bias_grid entries must be positive: {self.bias_grid}")

    @classmethod
    def profile_a(cls) -> "DomainProfile":
        return cls(name="A")

    @classmethod
    def profile_b(cls) -> "DomainProfile":
        return cls(name="B", gain=1.3, offset=0.1, extra_noise_sigma=0.05,
                   bias_field_amp=0.1)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "gain": self.gain,
            "offset": self.offset,
            "extra_noise_sigma": self.extra_noise_sigma,
            "bias_field_amp": self.bias_field_amp,
            "bias_grid": list(self.bias_grid),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainProfile":
        return cls(name=d["name"], gain=d["gain"], offset=d["offset"],
                   extra_noise_sigma=d["extra_noise_sigma"],
                   bias_field_amp=d["bias_field_amp"],
                   bias_grid=tuple(d["bias_grid"]))


@dataclass(frozen=True)
class PhantomConfig:
    """Parameters of the synthetic dataset generator."""

    n_patients: int
    dims: tuple[int, int, int] = (64, 64, 16)
    spacing: tuple[float, float, float] = (0.75, 0.75, 3.9)
    studies_per_patient: int = 1
    noise_sigma: float = 0.05
    domain: DomainProfile = field(default_factory=DomainProfile.profile_a)
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be positive")
        if self.studies_per_patient < 1:
            raise ValueError("studies_per_patient must be positive")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be positive: {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive: {self.spacing}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "studies_per_patient": self.studies_per_patient,
            "noise_sigma": self.noise_sigma,
            "domain": self.domain.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        return cls(n_patients=d["n_patients"], dims=tuple(d["dims"]),
                   spacing=tuple(d["spacing"]),
                   studies_per_patient=d["studies_per_patient"],
                   noise_sigma=d["noise_sigma"],
                   domain=DomainProfile.from_dict(d["domain"]),
                   seed=d["seed"])


def _id_stream(seed: int, *parts) -> np.random.Generator:
    """Deterministic RNG stream keyed by a seed plus string/int identifiers."""
    key = []
    for part in parts:
        if isinstance(part, str):
            digest = hashlib.blake2s(part.encode("utf-8"), digest_size=4).digest()
            key.append(int.from_bytes(digest, "little"))
        else:
            key.append(int(part))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class _Anatomy:
    """Per-patient geometry in normalized body coordinates."""

    center: np.ndarray            # voxel coordinates of the body center
    semiaxes: np.ndarray          # voxel semiaxes of the body ellipsoid
    comp_centers: np.ndarray      # 3 x 3 normalized compartment centers
    comp_radii: np.ndarray        # 3 normalized compartment radii


def _sample_anatomy(cfg: PhantomConfig, patient_id: str) -> _Anatomy:
    rng = _id_stream(cfg.seed, patient_id, 0)
    dims = np.asarray(cfg.dims, dtype=float)
    center = dims / 2.0 + rng.uniform(-0.04, 0.04, size=3) * dims
    semiaxes = np.array([0.40, 0.40, 0.44]) * dims * rng.uniform(0.97, 1.03, size=3)
    radii = np.array([rng.uniform(0.21, 0.26),   # fluid
                      rng.uniform(0.23, 0.28),   # vessel
                      rng.uniform(0.23, 0.28)])  # solid
    # Compartments sit 120 degrees apart on a ring around a random azimuth,
    # which guarantees pairwise clearance at these radii while the azimuth,
    # ring radius, and jitter still randomize every geometry.
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    centers = []
    for i in range(3):
        angle = azimuth + i * (2.0 * np.pi / 3.0)
        ring = rng.uniform(0.37, 0.44)
        cand = np.array([ring * np.cos(angle), ring * np.sin(angle),
                         rng.uniform(-0.12, 0.12)])
        centers.append(cand + rng.normal(0.0, 0.008, size=3))
    return _Anatomy(center=center, semiaxes=semiaxes,
                    comp_centers=np.array(centers), comp_radii=radii)


def _region_masks(cfg: PhantomConfig, anatomy: _Anatomy):
    """Boolean masks (body, fat shell, fluid, vessel, solid) over the grid."""
    nx, ny, nz = cfg.dims
    gx, gy, gz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                             indexing="ij")
    norm = [(g - anatomy.center[i]) / anatomy.semiaxes[i]
            for i, g in enumerate((gx, gy, gz))]
    rho = norm[0] ** 2 + norm[1] ** 2 + norm[2] ** 2
    body = rho <= 1.0
    shell = (rho >= 0.70) & body
    comps = []
    for i in range(3):
        d = sum((norm[k] - anatomy.comp_centers[i, k]) ** 2 for k in range(3))
        comps.append((d <= anatomy.comp_radii[i] ** 2) & body)
    return body, shell, comps


def _paint(cfg: PhantomConfig, anatomy: _Anatomy, label: SeriesLabel) -> np.ndarray:
    bg, body_v, fat_v, fluid_v, vessel_v, solid_v = INTENSITY_TABLE[label]
    body, shell, comps = _region_masks(cfg, anatomy)
    vol = np.full(cfg.dims, bg, dtype=np.float64)
    vol[body] = body_v
    vol[shell] = fat_v
    for mask, value in zip(comps, (fluid_v, vessel_v, solid_v)):
        vol[mask] = value
    return vol


def bias_field(dims: tuple[int, int, int], amp: float,
               grid: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    """Smooth positive multiplicative field, normalized to mean exactly 1."""
    if amp == 0.0:
        return np.ones(dims, dtype=np.float64)
    coarse = rng.normal(0.0, amp, size=grid)
    smooth = trilinear_resize(coarse, dims)
    fld = np.exp(smooth)
    return fld / fld.mean()


def generate_study(cfg: PhantomConfig, patient_id: str,
                   study_id: str) -> list[tuple[SeriesLabel, Volume3D]]:
    """Generate the 8 series of one study, sharing the patient anatomy."""
    anatomy = _sample_anatomy(cfg, patient_id)
    out = []
    for label in LABELS:
        rng = _id_stream(cfg.seed, patient_id, study_id, label.index + 1)
        vol = _paint(cfg, anatomy, label)
        if cfg.noise_sigma > 0:
            vol = vol + rng.normal(0.0, cfg.noise_sigma, size=vol.shape)
        prof = cfg.domain
        vol = prof.gain * vol + prof.offset
        if prof.bias_field_amp > 0:
            vol = vol * bias_field(cfg.dims, prof.bias_field_amp,
                                   prof.bias_grid, rng)
        if prof.extra_noise_sigma > 0:
            vol = vol + rng.normal(0.0, prof.extra_noise_sigma, size=vol.shape)
        out.append((label, Volume3D.from_array(vol.astype(np.float32),
                                               spacing=cfg.spacing,
                                               orientation=CANONICAL_ORIENTATION)))
    return out


def generate_dataset(cfg: PhantomConfig, out_dir: str) -> DatasetManifest:
    """Write all studies plus manifest.csv and phantom_config.json."""
    os.makedirs(out_dir, exist_ok=True)
    from .volume import write_volume

    records = []
    for p in range(cfg.n_patients):
        patient_id = f"p{p:03d}"
        for s in range(cfg.studies_per_patient):
            study_id = f"s{s}"
            study_dir = os.path.join(out_dir, patient_id, study_id)
            os.makedirs(study_dir, exist_ok=True)
            for label, vol in generate_study(cfg, patient_id, study_id):
                rel = os.path.join(patient_id, study_id, f"{label.value}.vh")
                write_volume(vol, os.path.join(out_dir, rel))
                b_value, tr_ms, te_ms, flip_deg = _ACQUISITION[label]
                records.append(SeriesRecord(
                    volume_path=rel, patient_id=patient_id, study_id=study_id,
                    label=label, scanner_domain=cfg.domain.name,
                    body_region="abdomen", b_value=b_value, tr_ms=tr_ms,
                    te_ms=te_ms, flip_deg=flip_deg))
    manifest = DatasetManifest(records=tuple(records),
                               root_dir=os.path.abspath(out_dir))
    save_manifest(manifest, os.path.join(out_dir, "manifest.csv"))
    with open(os.path.join(out_dir, "phantom_config.json"), "w",
              encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
