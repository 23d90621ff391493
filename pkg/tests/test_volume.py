"""Volume container, file round trips, masking, resampling."""

import json
import os

import numpy as np
import pytest

from vesseltomo.volume import (
    Volume,
    VolumeFormatError,
    VolumeKind,
    apply_mask,
    load_volume,
    resample,
    save_volume,
)


# ----------------------------------------------------------------- oracles

def trilinear_oracle(src: np.ndarray, target_dims: tuple[int, int, int]) -> np.ndarray:
    """Brute-force trilinear resample, voxel-center aligned, edge clamped.

    Loops every target voxel; only usable for tiny grids. Independent of the
    vectorized implementation under test.
    """
    nz, ny, nx = src.shape
    tx, ty, tz = target_dims
    out = np.zeros((tz, ty, tx), dtype=np.float64)

    def coord(i: int, n_tgt: int, n_src: int) -> float:
        c = (i + 0.5) * n_src / n_tgt - 0.5
        return min(max(c, 0.0), n_src - 1.0)

    for k in range(tz):
        for j in range(ty):
            for i in range(tx):
                cx = coord(i, tx, nx)
                cy = coord(j, ty, ny)
                cz = coord(k, tz, nz)
                x0, y0, z0 = int(np.floor(cx)), int(np.floor(cy)), int(np.floor(cz))
                x1, y1, z1 = min(x0 + 1, nx - 1), min(y0 + 1, ny - 1), min(z0 + 1, nz - 1)
                fx, fy, fz = cx - x0, cy - y0, cz - z0
                acc = 0.0
                for dz, wz in ((z0, 1 - fz), (z1, fz)):
                    for dy, wy in ((y0, 1 - fy), (y1, fy)):
                        for dx, wx in ((x0, 1 - fx), (x1, fx)):
                            acc += wz * wy * wx * src[dz, dy, dx]
                out[k, j, i] = acc
    return out


# ------------------------------------------------------------ construction

def test_volume_dims_follow_array_shape():
    v = Volume(np.zeros((2, 3, 4), dtype=np.float32))
    assert v.dims == (4, 3, 2)
    assert v.n_voxels == 24
    assert v.data.dtype == np.float32
    assert v.kind is VolumeKind.INTENSITY


def test_volume_data_is_immutable():
    v = Volume(np.zeros((2, 2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


@pytest.mark.parametrize("shape", [(0, 2, 2), (2, 2), (2, 2, 2, 2)])
def test_volume_rejects_bad_shapes(shape):
    with pytest.raises(ValueError):
        Volume(np.zeros(shape, dtype=np.float32))


@pytest.mark.parametrize("spacing", [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0)])
def test_volume_rejects_bad_spacing(spacing):
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2), dtype=np.float32), spacing=spacing)


@pytest.mark.parametrize("bad", [0.5, -1.0, np.nan])
def test_mask_must_be_binary(bad):
    data = np.ones((2, 2, 2), dtype=np.float32)
    data[0, 0, 0] = bad
    with pytest.raises(ValueError):
        Volume(data, kind=VolumeKind.MASK)


# ------------------------------------------------------------------- files

def test_load_handwritten_mask_header(tmp_path):
    path = str(tmp_path / "ones.vol")
    np.ones(8, dtype="<f4").tofile(path)
    header = {"dims": [2, 2, 2], "spacing": [1, 1, 1], "kind": "mask",
              "dtype": "f32", "order": "little"}
    with open(path + ".json", "w") as fh:
        json.dump(header, fh)
    v = load_volume(path)
    assert v.kind is VolumeKind.MASK
    assert np.array_equal(v.data, np.ones((2, 2, 2), dtype=np.float32))


def test_load_rejects_size_mismatch(tmp_path):
    path = str(tmp_path / "short.vol")
    np.ones(7, dtype="<f4").tofile(path)
    header = {"dims": [2, 2, 2], "spacing": [1, 1, 1], "kind": "mask",
              "dtype": "f32", "order": "little"}
    with open(path + ".json", "w") as fh:
        json.dump(header, fh)
    with pytest.raises(VolumeFormatError):
        load_volume(path)


def test_save_load_random_volume_bit_identical(tmp_path):
    rng = np.random.Generator(np.random.Philox(key=[11, 0]))
    v = Volume(rng.random((16, 16, 16), dtype=np.float32), spacing=(0.5, 1.0, 2.0))
    path = str(tmp_path / "rt.vol")
    save_volume(v, path)
    back = load_volume(path)
    assert np.array_equal(back.data, v.data)
    assert back.spacing == v.spacing
    assert back.kind is v.kind


def test_save_single_voxel_payload_is_four_bytes(tmp_path):
    v = Volume(np.full((1, 1, 1), 0.5, dtype=np.float32))
    path = str(tmp_path / "one.vol")
    save_volume(v, path)
    assert os.path.getsize(path) == 4
    assert os.path.exists(path + ".json")
    assert load_volume(path).data[0, 0, 0] == np.float32(0.5)


def test_save_64cube_payload_size(tmp_path):
    # expected byte count: 64^3 voxels at 4 bytes each
    v = Volume(np.zeros((64, 64, 64), dtype=np.float32))
    path = str(tmp_path / "big.vol")
    save_volume(v, path)
    assert os.path.getsize(path) == 64 ** 3 * 4


def test_mask_round_trip_preserves_kind(tmp_path):
    rng = np.random.Generator(np.random.Philox(key=[12, 0]))
    data = (rng.random((8, 8, 8)) > 0.5).astype(np.float32)
    v = Volume(data, kind=VolumeKind.MASK)
    path = str(tmp_path / "m.vol")
    save_volume(v, path)
    back = load_volume(path)
    assert back.kind is VolumeKind.MASK
    assert np.array_equal(back.data, v.data)


def test_load_missing_header(tmp_path):
    path = str(tmp_path / "naked.vol")
    np.zeros(8, dtype="<f4").tofile(path)
    with pytest.raises(VolumeFormatError):
        load_volume(path)


def test_load_unknown_dtype(tmp_path):
    path = str(tmp_path / "f64.vol")
    np.zeros(8, dtype="<f4").tofile(path)
    header = {"dims": [2, 2, 2], "spacing": [1, 1, 1], "kind": "intensity",
              "dtype": "f64", "order": "little"}
    with open(path + ".json", "w") as fh:
        json.dump(header, fh)
    with pytest.raises(VolumeFormatError):
        load_volume(path)


def test_load_rejects_nan_in_mask_payload(tmp_path):
    path = str(tmp_path / "nan.vol")
    payload = np.ones(8, dtype="<f4")
    payload[3] = np.nan
    payload.tofile(path)
    header = {"dims": [2, 2, 2], "spacing": [1, 1, 1], "kind": "mask",
              "dtype": "f32", "order": "little"}
    with open(path + ".json", "w") as fh:
        json.dump(header, fh)
    with pytest.raises(VolumeFormatError):
        load_volume(path)


# ----------------------------------------------------------------- masking

def _mask(data: np.ndarray) -> Volume:
    return Volume(data.astype(np.float32), kind=VolumeKind.MASK)


def test_apply_mask_identity_with_all_ones():
    rng = np.random.Generator(np.random.Philox(key=[13, 0]))
    v = Volume(rng.random((4, 4, 4), dtype=np.float32))
    out = apply_mask(v, _mask(np.ones((4, 4, 4))))
    assert np.array_equal(out.data, v.data)
    assert out.kind is v.kind


def test_apply_mask_all_zeros_blanks_volume():
    v = Volume(np.full((4, 4, 4), 7.0, dtype=np.float32))
    out = apply_mask(v, _mask(np.zeros((4, 4, 4))))
    assert not out.data.any()


def test_apply_mask_checkerboard_elementwise():
    z, y, x = np.indices((4, 4, 4))
    board = ((z + y + x) % 2).astype(np.float32)
    v = Volume(np.full((4, 4, 4), 5.0, dtype=np.float32))
    out = apply_mask(v, _mask(board))
    assert np.array_equal(out.data, 5.0 * board)


def test_apply_mask_idempotent():
    rng = np.random.Generator(np.random.Philox(key=[14, 0]))
    v = Volume(rng.random((4, 4, 4), dtype=np.float32))
    m = _mask((rng.random((4, 4, 4)) > 0.5).astype(np.float32))
    once = apply_mask(v, m)
    twice = apply_mask(once, m)
    assert np.array_equal(once.data, twice.data)


def test_apply_mask_rejects_mismatch():
    v = Volume(np.zeros((4, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        apply_mask(v, _mask(np.ones((2, 2, 2))))
    with pytest.raises(ValueError):
        apply_mask(v, Volume(np.ones((4, 4, 4), dtype=np.float32)))  # not a mask


# --------------------------------------------------------------- resample

def test_resample_identity_dims():
    rng = np.random.Generator(np.random.Philox(key=[15, 0]))
    v = Volume(rng.random((3, 4, 5), dtype=np.float32))
    out = resample(v, v.dims)
    assert np.array_equal(out.data, v.data)


@pytest.mark.parametrize("target", [(2, 2, 2), (5, 3, 7), (8, 8, 8)])
def test_resample_constant_stays_constant(target):
    v = Volume(np.full((4, 4, 4), 2.5, dtype=np.float32))
    out = resample(v, target)
    assert np.allclose(out.data, 2.5, atol=1e-6)
    assert out.dims == target


def test_resample_2cube_to_4cube_matches_oracle_and_mean():
    src = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    v = Volume(src)
    out = resample(v, (4, 4, 4))
    expected = trilinear_oracle(src.astype(np.float64), (4, 4, 4))
    assert np.allclose(out.data, expected, atol=1e-6)
    assert abs(float(out.data.mean()) - float(src.mean())) < 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("target", [(3, 5, 4), (9, 6, 7)])
def test_resample_intensity_matches_oracle(seed, target):
    rng = np.random.Generator(np.random.Philox(key=[16, seed]))
    src = rng.random((4, 5, 6)).astype(np.float32)
    out = resample(Volume(src), target)
    expected = trilinear_oracle(src.astype(np.float64), target)
    assert np.allclose(out.data, expected, atol=1e-5)


@pytest.mark.parametrize("target", [(4, 4, 4), (16, 16, 16), (5, 9, 3)])
def test_resample_mask_stays_binary(target):
    rng = np.random.Generator(np.random.Philox(key=[17, 0]))
    m = _mask((rng.random((8, 8, 8)) > 0.6).astype(np.float32))
    out = resample(m, target)
    assert out.kind is VolumeKind.MASK
    assert set(np.unique(out.data)) <= {0.0, 1.0}


def test_resample_rejects_nonpositive_dims():
    v = Volume(np.zeros((2, 2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        resample(v, (0, 2, 2))
