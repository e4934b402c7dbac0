"""Volume I/O, preprocessing geometry, phantom, and manifest tests."""

import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddcml.errors import DataError, UsageError
from ddcml.volio import (
    BadMagicError,
    CaseRecord,
    DimensionMismatchError,
    NonFiniteVolumeError,
    ManifestError,
    PhantomSpec,
    TruncatedVolumeError,
    Volume,
    crop_downsample,
    gen_phantom,
    generate_corpus,
    load_manifest,
    read_volume,
    ventricle_voxel_count,
    write_manifest,
    write_volume,
)

# Oracle pins: mean intensity of the default 32^3 phantom (gain 1.0,
# amplitude 0) from an independent scalar-loop voxelization, and the
# analytic continuous-volume means they approximate.
PHANTOM_MEAN_VOXELIZED = {0: 36.723633, 2: 35.673828, 4: 34.404297}
PHANTOM_MEAN_ANALYTIC = {0: 36.807737, 2: 35.941321, 4: 34.566781}


def random_volume(rng: np.random.Generator, dims) -> Volume:
    vox = rng.uniform(0.0, 255.0, size=dims).astype(np.float32)
    return Volume(vox)


# ---------------------------------------------------------------------------
# VOL1 format
# ---------------------------------------------------------------------------


def test_vol1_byte_layout(tmp_path):
    # x varies fastest in the payload, so voxel (1,0,0) is the 2nd value.
    vox = np.zeros((2, 2, 2), dtype=np.float32)
    order = [
        (0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0),
        (0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1),
    ]
    for rank, idx in enumerate(order):
        vox[idx] = float(rank)
    path = tmp_path / "v.vol"
    write_volume(Volume(vox), path)
    data = path.read_bytes()
    assert data[:4] == b"VOL1"
    assert struct.unpack("<3I", data[4:16]) == (2, 2, 2)
    payload = np.frombuffer(data, dtype="<f4", offset=16)
    assert payload.tolist() == [0, 1, 2, 3, 4, 5, 6, 7]


def test_vol1_file_size(tmp_path):
    rng = np.random.default_rng(0)
    v = random_volume(rng, (80, 96, 80))
    path = tmp_path / "big.vol"
    write_volume(v, path)
    assert path.stat().st_size == 16 + 4 * 80 * 96 * 80 == 2_457_616


@settings(max_examples=30, deadline=None)
@given(
    nx=st.integers(1, 8),
    ny=st.integers(1, 8),
    nz=st.integers(1, 8),
    seed=st.integers(0, 2**32 - 1),
)
def test_vol1_round_trip_bit_exact(tmp_path_factory, nx, ny, nz, seed):
    rng = np.random.default_rng(seed)
    v = random_volume(rng, (nx, ny, nz))
    path = tmp_path_factory.mktemp("rt") / "v.vol"
    write_volume(v, path)
    back = read_volume(path)
    assert back.dims == v.dims
    assert np.array_equal(back.voxels, v.voxels)
    assert back.voxels.dtype == np.float32


def test_vol1_boundary_values_round_trip(tmp_path):
    vox = np.array([[[0.0, 255.0]]], dtype=np.float32)
    path = tmp_path / "b.vol"
    write_volume(Volume(vox), path)
    assert np.array_equal(read_volume(path).voxels, vox)


def test_vol1_bad_magic(tmp_path):
    path = tmp_path / "bad.vol"
    path.write_bytes(b"NOPE" + struct.pack("<3I", 1, 1, 1) + b"\x00" * 4)
    with pytest.raises(BadMagicError):
        read_volume(path)


def test_vol1_truncated_header(tmp_path):
    path = tmp_path / "t.vol"
    path.write_bytes(b"VOL1" + b"\x01\x00")
    with pytest.raises(TruncatedVolumeError):
        read_volume(path)


def test_vol1_payload_mid_value(tmp_path):
    path = tmp_path / "t.vol"
    path.write_bytes(b"VOL1" + struct.pack("<3I", 1, 1, 1) + b"\x00\x00")
    with pytest.raises(TruncatedVolumeError):
        read_volume(path)


def test_vol1_dimension_payload_mismatch(tmp_path):
    # Header declares 2x2x2 but the payload carries only 7 values.
    path = tmp_path / "m.vol"
    path.write_bytes(b"VOL1" + struct.pack("<3I", 2, 2, 2) + b"\x00" * 28)
    with pytest.raises(DimensionMismatchError):
        read_volume(path)


def test_vol1_zero_dim(tmp_path):
    path = tmp_path / "z.vol"
    path.write_bytes(b"VOL1" + struct.pack("<3I", 0, 2, 2))
    with pytest.raises(DimensionMismatchError):
        read_volume(path)


def test_vol1_non_finite_payload(tmp_path):
    path = tmp_path / "nf.vol"
    payload = np.array([1.0, np.nan], dtype="<f4").tobytes()
    path.write_bytes(b"VOL1" + struct.pack("<3I", 2, 1, 1) + payload)
    with pytest.raises(NonFiniteVolumeError):
        read_volume(path)


def test_vol1_out_of_range_payload(tmp_path):
    path = tmp_path / "oor.vol"
    payload = np.array([300.0], dtype="<f4").tobytes()
    path.write_bytes(b"VOL1" + struct.pack("<3I", 1, 1, 1) + payload)
    with pytest.raises(DataError):
        read_volume(path)


def test_write_rejects_invalid_volume(tmp_path):
    vox = np.full((2, 2, 2), -1.0, dtype=np.float32)
    with pytest.raises(DataError):
        write_volume(Volume(vox), tmp_path / "x.vol")


# ---------------------------------------------------------------------------
# crop_downsample
# ---------------------------------------------------------------------------


def test_downsample_block_mean_oracle():
    vox = np.arange(4 * 4 * 4, dtype=np.float32).reshape(4, 4, 4) % 200
    out = crop_downsample(Volume(vox), 2, (2, 2, 2))
    # Independent block-mean computation via explicit slicing.
    arr = vox.astype(np.float64)
    for i in range(2):
        for j in range(2):
            for k in range(2):
                block = arr[2 * i : 2 * i + 2, 2 * j : 2 * j + 2, 2 * k : 2 * k + 2]
                assert out.voxels[i, j, k] == pytest.approx(block.mean())


def test_downsample_drops_trailing_partial_blocks():
    rng = np.random.default_rng(3)
    v = random_volume(rng, (5, 5, 5))
    out = crop_downsample(v, 2, (2, 2, 2))
    ref = crop_downsample(Volume(v.voxels[:4, :4, :4]), 2, (2, 2, 2))
    assert out == ref


def test_crop_centered_low_index_tie():
    vox = np.zeros((5, 5, 5), dtype=np.float32)
    vox[1, 1, 1] = 50.0
    out = crop_downsample(Volume(vox), 1, (2, 2, 2))
    # margin 3 splits as 1 (low) / 2 (high), so index 1 lands at 0.
    assert out.voxels[0, 0, 0] == 50.0


def test_crop_pipeline_dims():
    rng = np.random.default_rng(5)
    v = random_volume(rng, (181, 217, 181))
    out = crop_downsample(v, 2, (80, 96, 80))
    assert out.dims == (80, 96, 80)


def test_crop_target_too_large():
    v = Volume(np.zeros((16, 16, 16), dtype=np.float32))
    with pytest.raises(UsageError):
        crop_downsample(v, 2, (10, 8, 8))


def test_crop_identity():
    rng = np.random.default_rng(9)
    v = random_volume(rng, (6, 6, 6))
    assert crop_downsample(v, 1, (6, 6, 6)) == v


# ---------------------------------------------------------------------------
# phantom generator
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("sev", [0, 2, 4])
def test_phantom_mean_matches_oracles(sev):
    v = gen_phantom(PhantomSpec(severity=sev, subject_seed=11))
    mean = float(v.voxels.mean())
    assert mean == pytest.approx(PHANTOM_MEAN_VOXELIZED[sev], abs=1e-4)
    assert mean == pytest.approx(PHANTOM_MEAN_ANALYTIC[sev], rel=0.02)


def test_phantom_deterministic():
    spec = PhantomSpec(severity=3, subject_seed=42, texture_amplitude=10.0)
    assert gen_phantom(spec) == gen_phantom(spec)


def test_phantom_seed_changes_texture_only():
    a = gen_phantom(PhantomSpec(2, 1, texture_amplitude=10.0))
    b = gen_phantom(PhantomSpec(2, 2, texture_amplitude=10.0))
    assert a != b
    # Without texture the subject seed has no effect.
    c = gen_phantom(PhantomSpec(2, 1, texture_amplitude=0.0))
    d = gen_phantom(PhantomSpec(2, 2, texture_amplitude=0.0))
    assert c == d


def test_phantom_ventricle_grows_with_severity():
    counts = [
        ventricle_voxel_count(gen_phantom(PhantomSpec(s, 0))) for s in range(5)
    ]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_phantom_background_zero_and_range():
    v = gen_phantom(PhantomSpec(1, 5, texture_amplitude=200.0, nuisance_gain=1.5))
    assert v.voxels[0, 0, 0] == 0.0
    assert float(v.voxels.min()) >= 0.0
    assert float(v.voxels.max()) <= 255.0


def test_phantom_nuisance_gain_scales_brain():
    lo = gen_phantom(PhantomSpec(0, 0, nuisance_gain=0.8))
    hi = gen_phantom(PhantomSpec(0, 0, nuisance_gain=1.2))
    assert float(hi.voxels.max()) == pytest.approx(140.0 * 1.2)
    assert float(lo.voxels.max()) == pytest.approx(140.0 * 0.8)


def test_phantom_rejects_small_dims():
    with pytest.raises(UsageError):
        gen_phantom(PhantomSpec(0, 0, dims=(15, 32, 32)))


def test_phantom_rejects_bad_severity():
    with pytest.raises(UsageError):
        PhantomSpec(severity=5, subject_seed=0)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def test_manifest_round_trip(tmp_path):
    records = [
        CaseRecord("s01", 0, tmp_path / "a.vol"),
        CaseRecord("s02", 4, tmp_path / "b.vol"),
    ]
    path = tmp_path / "manifest.csv"
    write_manifest(records, path)
    back = load_manifest(path)
    assert [(r.subject_id, r.class_label) for r in back] == [("s01", 0), ("s02", 4)]
    assert [r.volume_path for r in back] == [tmp_path / "a.vol", tmp_path / "b.vol"]


def test_manifest_relative_paths_resolve(tmp_path):
    sub = tmp_path / "data"
    sub.mkdir()
    path = sub / "m.csv"
    path.write_text("subject_id,class_label,path\ns01,2,vols/x.vol\n")
    (rec,) = load_manifest(path)
    assert rec.volume_path == sub / "vols" / "x.vol"


def test_manifest_bad_header(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("id,label,file\ns01,0,a.vol\n")
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_manifest_label_out_of_range(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("subject_id,class_label,path\ns01,5,a.vol\n")
    with pytest.raises(ManifestError):
        load_manifest(path)
    assert load_manifest(path, class_count=6)[0].class_label == 5


def test_manifest_non_integer_label(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("subject_id,class_label,path\ns01,two,a.vol\n")
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_manifest_duplicate_entry(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text(
        "subject_id,class_label,path\ns01,0,a.vol\ns01,1,a.vol\n"
    )
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_manifest_wrong_field_count(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("subject_id,class_label,path\ns01,0\n")
    with pytest.raises(ManifestError):
        load_manifest(path)


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------


def test_generate_corpus_counts_and_tally(tmp_path):
    records = generate_corpus(tmp_path, 3, (16, 16, 16), seed=5)
    assert len(records) == 15
    tally = {}
    for rec in records:
        tally[rec.class_label] = tally.get(rec.class_label, 0) + 1
    assert tally == {c: 3 for c in range(5)}
    assert len({r.subject_id for r in records}) == 15
    for rec in records:
        vol = read_volume(rec.volume_path)
        assert vol.dims == (16, 16, 16)


def test_generate_corpus_deterministic(tmp_path):
    a = generate_corpus(tmp_path / "a", 2, (16, 16, 16), seed=9,
                        texture_amplitude=5.0, gain_spread=0.2)
    b = generate_corpus(tmp_path / "b", 2, (16, 16, 16), seed=9,
                        texture_amplitude=5.0, gain_spread=0.2)
    for ra, rb in zip(a, b):
        assert ra.subject_id == rb.subject_id
        assert Path(ra.volume_path).read_bytes() == Path(rb.volume_path).read_bytes()


def test_generate_corpus_subjects_differ(tmp_path):
    records = generate_corpus(tmp_path, 2, (16, 16, 16), seed=1,
                              texture_amplitude=8.0)
    v0 = read_volume(records[0].volume_path)
    v1 = read_volume(records[1].volume_path)
    assert not np.array_equal(v0.voxels, v1.voxels)


def test_generate_corpus_validation(tmp_path):
    with pytest.raises(UsageError, match="count_per_class"):
        generate_corpus(tmp_path, 0, (16, 16, 16), seed=0)
    with pytest.raises(UsageError, match="gain_spread"):
        generate_corpus(tmp_path, 1, (16, 16, 16), seed=0, gain_spread=1.0)
    with pytest.raises(UsageError, match="classes"):
        generate_corpus(tmp_path, 1, (16, 16, 16), seed=0, classes=())


# ---------------------------------------------------------------------------
# shape jitter
# ---------------------------------------------------------------------------


def test_shape_jitter_changes_brain_outline():
    base = gen_phantom(PhantomSpec(severity=0, subject_seed=5, dims=(16, 16, 16)))
    jit = gen_phantom(
        PhantomSpec(severity=0, subject_seed=5, dims=(16, 16, 16), shape_jitter=0.2)
    )
    assert not np.array_equal(base.voxels, jit.voxels)
    # deterministic in the subject seed
    again = gen_phantom(
        PhantomSpec(severity=0, subject_seed=5, dims=(16, 16, 16), shape_jitter=0.2)
    )
    assert np.array_equal(jit.voxels, again.voxels)


def test_shape_jitter_keeps_brain_inside_volume():
    # guaranteed at 32^3: 0.4 * 32 * 1.2 = 15.36 < 15.5 center-to-face
    for seed in range(5):
        vol = gen_phantom(
            PhantomSpec(severity=4, subject_seed=seed, dims=(32, 32, 32),
                        shape_jitter=0.2)
        )
        vox = vol.voxels
        assert not vox[0, :, :].any() and not vox[-1, :, :].any()
        assert not vox[:, 0, :].any() and not vox[:, -1, :].any()
        assert not vox[:, :, 0].any() and not vox[:, :, -1].any()


def test_shape_jitter_preserves_texture_phases():
    # with zero jitter the textured output is unchanged by the extra field
    a = gen_phantom(
        PhantomSpec(severity=2, subject_seed=9, dims=(16, 16, 16),
                    texture_amplitude=10.0)
    )
    b = gen_phantom(
        PhantomSpec(severity=2, subject_seed=9, dims=(16, 16, 16),
                    texture_amplitude=10.0, shape_jitter=0.0)
    )
    assert np.array_equal(a.voxels, b.voxels)


def test_shape_jitter_validation():
    with pytest.raises(UsageError, match="shape_jitter"):
        PhantomSpec(severity=0, subject_seed=1, shape_jitter=0.3)
    with pytest.raises(UsageError, match="shape_jitter"):
        PhantomSpec(severity=0, subject_seed=1, shape_jitter=-0.1)


def test_position_jitter_translates_head():
    base = gen_phantom(PhantomSpec(severity=0, subject_seed=11, dims=(32, 32, 32)))
    off = gen_phantom(
        PhantomSpec(severity=0, subject_seed=11, dims=(32, 32, 32),
                    position_jitter=1.5)
    )
    assert not np.array_equal(base.voxels, off.voxels)
    again = gen_phantom(
        PhantomSpec(severity=0, subject_seed=11, dims=(32, 32, 32),
                    position_jitter=1.5)
    )
    assert np.array_equal(off.voxels, again.voxels)
    # center of mass moves by at most the jitter plus voxelization slack
    def com(v):
        idx = np.argwhere(v > 0).astype(np.float64)
        return idx.mean(axis=0)

    delta = com(off.voxels) - com(base.voxels)
    assert np.abs(delta).max() <= 1.5 + 0.5
    assert np.abs(delta).max() > 0.05


def test_position_jitter_keeps_head_inside_volume():
    # 0.4 * 32 * 1.08 + 1.5 = 15.32 < 15.5 center-to-face
    for seed in range(5):
        vox = gen_phantom(
            PhantomSpec(severity=4, subject_seed=seed, dims=(32, 32, 32),
                        shape_jitter=0.08, position_jitter=1.5)
        ).voxels
        assert not vox[0, :, :].any() and not vox[-1, :, :].any()
        assert not vox[:, 0, :].any() and not vox[:, -1, :].any()
        assert not vox[:, :, 0].any() and not vox[:, :, -1].any()


def test_position_jitter_validation():
    with pytest.raises(UsageError, match="position_jitter"):
        PhantomSpec(severity=0, subject_seed=1, position_jitter=2.5)
    with pytest.raises(UsageError, match="position_jitter"):
        PhantomSpec(severity=0, subject_seed=1, position_jitter=-0.1)


def test_bias_field_shades_brain_only():
    base = gen_phantom(PhantomSpec(severity=1, subject_seed=7, dims=(32, 32, 32)))
    shaded = gen_phantom(
        PhantomSpec(severity=1, subject_seed=7, dims=(32, 32, 32), bias_field=0.3)
    )
    assert not np.array_equal(base.voxels, shaded.voxels)
    # zero background stays exactly zero under the multiplicative ramp
    assert not shaded.voxels[base.voxels == 0].any()
    # the ramp averages out: overall brain mean moves by only a few percent
    m0 = base.voxels[base.voxels > 0].mean()
    m1 = shaded.voxels[shaded.voxels > 0].mean()
    assert abs(m1 - m0) / m0 < 0.05
    # positive everywhere: worst-case slope sum stays below 1
    assert shaded.voxels[base.voxels > 0].min() > 0.0


def test_bias_field_deterministic_and_validated():
    a = gen_phantom(PhantomSpec(severity=0, subject_seed=3, bias_field=0.2))
    b = gen_phantom(PhantomSpec(severity=0, subject_seed=3, bias_field=0.2))
    assert np.array_equal(a.voxels, b.voxels)
    with pytest.raises(UsageError, match="bias_field"):
        PhantomSpec(severity=0, subject_seed=1, bias_field=0.4)
    with pytest.raises(UsageError, match="bias_field"):
        PhantomSpec(severity=0, subject_seed=1, bias_field=-0.1)


def test_edge_width_zero_matches_hard_masks():
    hard = gen_phantom(PhantomSpec(severity=3, subject_seed=2, dims=(32, 32, 32)))
    soft0 = gen_phantom(
        PhantomSpec(severity=3, subject_seed=2, dims=(32, 32, 32), edge_width=0.0)
    )
    assert np.array_equal(hard.voxels, soft0.voxels)


def test_edge_width_ramps_only_near_boundaries():
    hard = gen_phantom(PhantomSpec(severity=2, subject_seed=4, dims=(32, 32, 32)))
    soft = gen_phantom(
        PhantomSpec(severity=2, subject_seed=4, dims=(32, 32, 32), edge_width=1.5)
    )
    h, s = hard.voxels, soft.voxels
    assert len(np.unique(s)) > 3
    # intermediate values appear in the ramps
    assert ((s > 0) & (s < 40.0)).any()
    assert ((s > 40.0) & (s < 140.0)).any()
    # far from both surfaces the two constructions agree exactly
    n = 32
    c = (n - 1) / 2.0
    g = np.arange(n) - c
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    r = np.sqrt(x**2 + y**2 + z**2)
    r_brain = 0.4 * n
    r_vent = 0.12 * n * (1.0 + 0.15 * 2)
    far = (np.abs(r - r_brain) > 2.0) & (np.abs(r - r_vent) > 2.0)
    assert np.array_equal(h[far], s[far])


def test_edge_width_validation():
    with pytest.raises(UsageError, match="edge_width"):
        PhantomSpec(severity=0, subject_seed=1, edge_width=5.0)
    with pytest.raises(UsageError, match="edge_width"):
        PhantomSpec(severity=0, subject_seed=1, edge_width=-1.0)


def test_generate_corpus_nuisance_passthrough(tmp_path):
    recs = generate_corpus(
        tmp_path, 2, (32, 32, 32), seed=5, gain_spread=0.1,
        position_jitter=1.0, bias_field=0.2, edge_width=1.5,
        classes=(0, 4),
    )
    assert len(recs) == 4
    vox = read_volume(recs[0].volume_path).voxels
    # soft edges produce intermediate intensities
    assert len(np.unique(vox)) > 3
    # determinism across a rerun
    recs2 = generate_corpus(
        tmp_path / "again", 2, (32, 32, 32), seed=5, gain_spread=0.1,
        position_jitter=1.0, bias_field=0.2, edge_width=1.5,
        classes=(0, 4),
    )
    assert np.array_equal(vox, read_volume(recs2[0].volume_path).voxels)
