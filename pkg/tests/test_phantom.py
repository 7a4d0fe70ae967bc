"""Tests for the synthetic phantom generator.

The noiseless generator paints exact constants, so region geometry can be
recovered from intensities alone and used as an independent oracle for the
noisy and domain-shifted variants.
"""

import json

import numpy as np
import pytest

from mriseq.phantom import (
    INTENSITY_TABLE,
    REGION_NAMES,
    DomainProfile,
    PhantomConfig,
    _id_stream,
    bias_field,
    generate_dataset,
    generate_study,
)
from mriseq.volume import (
    CANONICAL_ORIENTATION,
    LABELS,
    SeriesLabel,
    load_manifest,
    read_volume,
)

SMALL_DIMS = (24, 24, 12)


def noiseless_cfg(**kw):
    defaults = dict(n_patients=1, dims=SMALL_DIMS, noise_sigma=0.0, seed=11)
    defaults.update(kw)
    return PhantomConfig(**defaults)


def study_arrays(cfg, patient="p000", study="s0"):
    return {label: vol.array() for label, vol in
            generate_study(cfg, patient, study)}


def region_map(noiseless_arr, label):
    """Voxel -> region index, recovered by exact intensity matching.

    Only valid for rows whose six values are pairwise distinct.
    """
    row = np.float32(INTENSITY_TABLE[label])
    assert len(set(row.tolist())) == 6
    m = np.full(noiseless_arr.shape, -1, dtype=np.int64)
    for idx, v in enumerate(row):
        m[noiseless_arr == v] = idx
    return m


# ---------------------------------------------------------------------------
# intensity table structure


def test_intensity_table_covers_all_labels():
    assert set(INTENSITY_TABLE) == set(LABELS)
    assert len(REGION_NAMES) == 6
    rows = []
    for row in INTENSITY_TABLE.values():
        assert len(row) == 6
        assert all(0.0 <= v <= 1.0 for v in row)
        rows.append(tuple(row))
    assert len(set(rows)) == len(rows)  # no two classes painted identically


def test_t1w_phase_ramps():
    phases = [SeriesLabel.T1W_PRE, SeriesLabel.T1W_ART, SeriesLabel.T1W_VEN,
              SeriesLabel.T1W_DEL]
    rows = [INTENSITY_TABLE[p] for p in phases]
    # Shared fat shell and fluid across the contrast phases.
    assert len({r[2] for r in rows}) == 1
    assert len({r[3] for r in rows}) == 1
    # Vessel pool brightens monotonically through the phases.
    vessel = [r[4] for r in rows]
    assert vessel == sorted(vessel) and len(set(vessel)) == 4
    # Parenchyma peaks arterial, then washes out; pre is the dimmest.
    body = [r[1] for r in rows]
    assert body[1] == max(body)
    assert body[1] > body[2] > body[3] > body[0]
    # Solid lesion hyperenhances arterial and washes out.
    solid = [r[5] for r in rows]
    assert solid[1] == max(solid)
    assert solid[1] > solid[2] > solid[3] >= solid[0]


def test_non_t1w_signatures():
    t2w = INTENSITY_TABLE[SeriesLabel.T2W]
    t2fs = INTENSITY_TABLE[SeriesLabel.T2FS]
    dwi = INTENSITY_TABLE[SeriesLabel.DWI]
    adc = INTENSITY_TABLE[SeriesLabel.ADC]
    assert t2fs[2] < 0.3 < t2w[2]            # fat suppression
    assert t2w[3] >= 0.9 and t2fs[3] >= 0.9  # bright fluid
    assert all(INTENSITY_TABLE[p][3] <= 0.3 for p in
               (SeriesLabel.T1W_PRE, SeriesLabel.T1W_ART,
                SeriesLabel.T1W_VEN, SeriesLabel.T1W_DEL))
    assert dwi[5] >= 0.8 and dwi[3] <= 0.3   # restriction-like solid
    assert adc[3] >= 0.8 and adc[5] <= 0.3   # inverted on the map


# ---------------------------------------------------------------------------
# noiseless painting


def test_noiseless_study_paints_exact_constants():
    arrays = study_arrays(noiseless_cfg())
    for label, arr in arrays.items():
        expected = sorted(set(np.float32(INTENSITY_TABLE[label]).tolist()))
        assert sorted(np.unique(arr).tolist()) == expected


def test_all_regions_visible_and_shared_across_series():
    arrays = study_arrays(noiseless_cfg())
    map_t2fs = region_map(arrays[SeriesLabel.T2FS], SeriesLabel.T2FS)
    map_dwi = region_map(arrays[SeriesLabel.DWI], SeriesLabel.DWI)
    # Every region has voxels, and two independently recovered maps agree,
    # so all series of a study really share one anatomy.
    assert set(np.unique(map_t2fs)) == set(range(6))
    assert np.array_equal(map_t2fs, map_dwi)
    # The map also predicts every other series exactly.
    for label, arr in arrays.items():
        painted = np.float32(INTENSITY_TABLE[label])[map_t2fs]
        assert np.array_equal(arr, painted)


def test_determinism_and_variation():
    cfg = noiseless_cfg()
    a = study_arrays(cfg)
    b = study_arrays(cfg)
    for label in LABELS:
        assert np.array_equal(a[label], b[label])
    other_patient = study_arrays(cfg, patient="p001")
    assert not np.array_equal(a[SeriesLabel.T2W], other_patient[SeriesLabel.T2W])
    other_seed = study_arrays(noiseless_cfg(seed=12))
    assert not np.array_equal(a[SeriesLabel.T2W], other_seed[SeriesLabel.T2W])


def test_volume_metadata():
    cfg = noiseless_cfg()
    series = generate_study(cfg, "p000", "s0")
    assert [label for label, _ in series] == list(LABELS)
    for _, vol in series:
        assert vol.dims == SMALL_DIMS
        assert vol.spacing == cfg.spacing
        assert vol.orientation == CANONICAL_ORIENTATION
        assert vol.array().dtype == np.float32
        assert np.isfinite(vol.array()).all()


# ---------------------------------------------------------------------------
# noise


def test_noise_statistics():
    clean = study_arrays(noiseless_cfg())
    noisy = study_arrays(noiseless_cfg(noise_sigma=0.05))
    diff = (noisy[SeriesLabel.T2W].astype(np.float64)
            - clean[SeriesLabel.T2W].astype(np.float64))
    n = diff.size
    assert abs(diff.mean()) < 4 * 0.05 / np.sqrt(n)
    assert diff.std() == pytest.approx(0.05, rel=0.02)


def test_noise_streams_differ_per_series():
    noisy = study_arrays(noiseless_cfg(noise_sigma=0.05))
    clean = study_arrays(noiseless_cfg())
    d1 = noisy[SeriesLabel.T2W] - clean[SeriesLabel.T2W]
    d2 = noisy[SeriesLabel.T2FS] - clean[SeriesLabel.T2FS]
    assert not np.array_equal(d1, d2)


# ---------------------------------------------------------------------------
# separability oracle


def test_nearest_centroid_separates_all_series():
    """Region-mean features of noisy series classify perfectly against the
    intensity table, without any trained model."""
    cfg = PhantomConfig(n_patients=6, dims=SMALL_DIMS, seed=31)
    clean_cfg = PhantomConfig(n_patients=6, dims=SMALL_DIMS, noise_sigma=0.0,
                              seed=31)
    table = np.array([INTENSITY_TABLE[label] for label in LABELS])
    for p in range(cfg.n_patients):
        pid = f"p{p:03d}"
        clean = study_arrays(clean_cfg, patient=pid)
        rmap = region_map(clean[SeriesLabel.T2FS], SeriesLabel.T2FS)
        noisy = study_arrays(cfg, patient=pid)
        for label in LABELS:
            arr = noisy[label].astype(np.float64)
            feats = np.array([arr[rmap == r].mean() for r in range(6)])
            predicted = LABELS[int(np.argmin(
                ((table - feats) ** 2).sum(axis=1)))]
            assert predicted is label


# ---------------------------------------------------------------------------
# bias field and domain profiles


def test_bias_field_basics():
    rng = np.random.default_rng(7)
    fld = bias_field(SMALL_DIMS, 0.5, (4, 4, 3), rng)
    assert fld.shape == SMALL_DIMS
    assert (fld > 0).all()
    assert fld.mean() == pytest.approx(1.0, abs=1e-12)
    assert fld.std() > 0.05  # actually varies across the volume

    again = bias_field(SMALL_DIMS, 0.5, (4, 4, 3), np.random.default_rng(7))
    assert np.array_equal(fld, again)

    flat = bias_field(SMALL_DIMS, 0.0, (4, 4, 3), rng)
    assert np.array_equal(flat, np.ones(SMALL_DIMS))


def test_domain_gain_offset_is_exact_affine():
    base = study_arrays(noiseless_cfg())
    shifted_cfg = noiseless_cfg(
        domain=DomainProfile(name="X", gain=2.0, offset=0.5))
    shifted = study_arrays(shifted_cfg)
    for label in LABELS:
        np.testing.assert_allclose(
            shifted[label], 2.0 * base[label] + 0.5, atol=1e-6)


def test_domain_profiles_and_validation():
    a = DomainProfile.profile_a()
    assert (a.gain, a.offset, a.extra_noise_sigma, a.bias_field_amp) == \
        (1.0, 0.0, 0.0, 0.0)
    b = DomainProfile.profile_b()
    assert b.name == "B"
    assert b.bias_field_amp > 0 and b.extra_noise_sigma > 0
    assert DomainProfile.from_dict(b.to_dict()) == b
    with pytest.raises(ValueError):
        DomainProfile(extra_noise_sigma=-0.1)
    with pytest.raises(ValueError):
        DomainProfile(bias_field_amp=-0.1)
    with pytest.raises(ValueError):
        DomainProfile(bias_grid=(0, 4, 3))


def test_profile_b_changes_more_than_affine():
    """Profile B must not be cancellable by per-volume affine rescaling."""
    base = study_arrays(noiseless_cfg())[SeriesLabel.T2W].astype(np.float64)
    shifted_cfg = noiseless_cfg(domain=DomainProfile.profile_b())
    shifted = study_arrays(shifted_cfg)[SeriesLabel.T2W].astype(np.float64)
    # Solve the best least-squares affine map and check real residual.
    A = np.stack([base.ravel(), np.ones(base.size)], axis=1)
    coef, *_ = np.linalg.lstsq(A, shifted.ravel(), rcond=None)
    residual = shifted.ravel() - A @ coef
    assert residual.std() > 0.01


def test_phantom_config_validation_and_round_trip():
    cfg = PhantomConfig(n_patients=3, dims=SMALL_DIMS, seed=5,
                        studies_per_patient=2,
                        domain=DomainProfile.profile_b())
    assert PhantomConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        PhantomConfig(n_patients=0)
    with pytest.raises(ValueError):
        PhantomConfig(n_patients=1, dims=(0, 4, 4))
    with pytest.raises(ValueError):
        PhantomConfig(n_patients=1, spacing=(1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        PhantomConfig(n_patients=1, noise_sigma=-0.1)
    with pytest.raises(ValueError):
        PhantomConfig(n_patients=1, studies_per_patient=0)


# ---------------------------------------------------------------------------
# dataset generation


def test_generate_dataset_layout(tmp_path):
    out = tmp_path / "data"
    cfg = PhantomConfig(n_patients=2, dims=SMALL_DIMS, seed=3,
                        studies_per_patient=2)
    manifest = generate_dataset(cfg, str(out))
    assert len(manifest.records) == 2 * 2 * 8

    loaded = load_manifest(out / "manifest.csv")
    assert len(loaded.records) == len(manifest.records)
    assert loaded.patients() == ["p000", "p001"]
    assert {r.study_id for r in loaded.records} == {"s0", "s1"}
    assert all(r.scanner_domain == "A" for r in loaded.records)
    for pid in ("p000", "p001"):
        for sid in ("s0", "s1"):
            labels = {r.label for r in loaded.records
                      if r.patient_id == pid and r.study_id == sid}
            assert labels == set(LABELS)

    vol = read_volume(loaded.resolve(loaded.records[0]))
    assert vol.dims == SMALL_DIMS

    with open(out / "phantom_config.json", encoding="utf-8") as fh:
        assert PhantomConfig.from_dict(json.load(fh)) == cfg


def test_generate_dataset_matches_generate_study(tmp_path):
    cfg = PhantomConfig(n_patients=1, dims=SMALL_DIMS, seed=9)
    manifest = generate_dataset(cfg, str(tmp_path / "d"))
    direct = dict(generate_study(cfg, "p000", "s0"))
    for rec in manifest.records:
        written = read_volume(manifest.resolve(rec)).array()
        assert np.array_equal(written, direct[rec.label].array())


def test_id_stream_keying():
    a = _id_stream(0, "p000", 1).integers(0, 2 ** 32, size=4)
    b = _id_stream(0, "p000", 1).integers(0, 2 ** 32, size=4)
    c = _id_stream(0, "p000", 2).integers(0, 2 ** 32, size=4)
    d = _id_stream(1, "p000", 1).integers(0, 2 ** 32, size=4)
    e = _id_stream(0, "p001", 1).integers(0, 2 ** 32, size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    assert not np.array_equal(a, e)
