import numpy as np
import pytest

from mcsr.data_io import (
    FeatureMap,
    RenderingSample,
    extract_patches,
    load_sample,
    save_sample,
)


def make_sample(scale=2, lr_h=6, lr_w=8, seed=0, with_hr=True):
    rng = np.random.default_rng(seed)
    h, w = scale * lr_h, scale * lr_w
    lr = rng.random((3, lr_h, lr_w)).astype(np.float32)
    albedo = rng.random((3, h, w)).astype(np.float32)
    normal = rng.uniform(-1, 1, (3, h, w)).astype(np.float32)
    hr = rng.random((3, h, w)).astype(np.float32) if with_hr else None
    return RenderingSample(
        lr_rgb=FeatureMap(lr),
        aux=FeatureMap(np.concatenate([albedo, normal])),
        hr_rgb=None if hr is None else FeatureMap(hr),
        spp_lr=8,
        spp_aux=2,
        scale=scale,
    )


def test_round_trip_bit_exact(tmp_path):
    sample = make_sample()
    # exercise subnormals and exact-zero payload values too
    sample.lr_rgb.values[0, 0, 0] = np.float32(1e-45)
    sample.lr_rgb.values[0, 0, 1] = 0.0
    save_sample(sample, tmp_path / "s")
    loaded = load_sample(tmp_path / "s")
    assert np.array_equal(loaded.lr_rgb.values, sample.lr_rgb.values)
    assert np.array_equal(loaded.aux.values, sample.aux.values)
    assert np.array_equal(loaded.hr_rgb.values, sample.hr_rgb.values)
    assert (loaded.spp_lr, loaded.spp_aux, loaded.scale) == (8, 2, 2)


def test_round_trip_without_ground_truth(tmp_path):
    sample = make_sample(with_hr=False)
    save_sample(sample, tmp_path / "s")
    loaded = load_sample(tmp_path / "s")
    assert loaded.hr_rgb is None


def test_inconsistent_dims_rejected_before_write(tmp_path):
    sample = make_sample()
    sample.aux = FeatureMap(sample.aux.values[:, :-2, :])
    with pytest.raises(ValueError, match="aux dims"):
        save_sample(sample, tmp_path / "bad")
    assert not (tmp_path / "bad" / "lr_rgb.f32").exists()


def test_payload_is_four_bytes_per_value(tmp_path):
    sample = make_sample(scale=1, lr_h=2, lr_w=2)
    save_sample(sample, tmp_path / "s")
    assert (tmp_path / "s" / "lr_rgb.f32").stat().st_size == 3 * 2 * 2 * 4


def test_truncated_payload_rejected(tmp_path):
    sample = make_sample()
    save_sample(sample, tmp_path / "s")
    plane = tmp_path / "s" / "lr_rgb.f32"
    plane.write_bytes(plane.read_bytes()[:-4])
    with pytest.raises(ValueError, match="lr_rgb"):
        load_sample(tmp_path / "s")


def test_nan_on_disk_names_the_plane(tmp_path):
    sample = make_sample()
    save_sample(sample, tmp_path / "s")
    plane = tmp_path / "s" / "aux.f32"
    data = bytearray(plane.read_bytes())
    data[40:44] = np.array([np.nan], dtype="<f4").tobytes()
    plane.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="non-finite values in plane 'aux'"):
        load_sample(tmp_path / "s")


def test_missing_plane_rejected(tmp_path):
    sample = make_sample()
    save_sample(sample, tmp_path / "s")
    (tmp_path / "s" / "aux.f32").unlink()
    with pytest.raises(FileNotFoundError, match="aux"):
        load_sample(tmp_path / "s")


def test_albedo_range_enforced():
    sample = make_sample()
    sample.aux.values[0, 0, 0] = 1.5
    with pytest.raises(ValueError, match="albedo"):
        sample.validate()


def test_normal_range_enforced():
    sample = make_sample()
    sample.aux.values[4, 0, 0] = -1.5
    with pytest.raises(ValueError, match="normal"):
        sample.validate()


def test_extract_patches_deterministic():
    sample = make_sample(scale=2, lr_h=16, lr_w=16)
    a = extract_patches(sample, patch_size=8, count=5, seed=42)
    b = extract_patches(sample, patch_size=8, count=5, seed=42)
    assert np.array_equal(a.lr_origins, b.lr_origins)
    assert np.array_equal(a.lr, b.lr)
    assert np.array_equal(a.aux, b.aux)
    assert np.array_equal(a.hr, b.hr)


def test_extract_patches_single_origin_repeats():
    sample = make_sample(scale=2, lr_h=4, lr_w=4)
    batch = extract_patches(sample, patch_size=8, count=3, seed=0)
    assert np.array_equal(batch.lr_origins, np.zeros((3, 2), dtype=int))
    for i in range(3):
        assert np.array_equal(batch.hr[i], sample.hr_rgb.values)


def test_extract_patches_alignment_on_coordinate_ramp():
    # pixel values encode their own coordinates, so alignment failures show
    # up as value mismatches between the sampled lr pixel and the
    # nearest-neighbor-downsampled hr crop origin
    scale, lr_h, lr_w = 4, 12, 10
    h, w = scale * lr_h, scale * lr_w
    aux = np.zeros((6, h, w), dtype=np.float32)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    aux[0] = ys / h
    aux[1] = xs / w
    hr = np.stack([ys / h, xs / w, np.zeros_like(ys)]).astype(np.float32)
    lr = np.stack(
        [
            (scale * np.arange(lr_h))[:, None] / h * np.ones((lr_h, lr_w)),
            (scale * np.arange(lr_w))[None, :] / w * np.ones((lr_h, lr_w)),
            np.zeros((lr_h, lr_w)),
        ]
    ).astype(np.float32)
    sample = RenderingSample(
        lr_rgb=FeatureMap(lr),
        aux=FeatureMap(aux),
        hr_rgb=FeatureMap(hr),
        spp_lr=1,
        spp_aux=1,
        scale=scale,
    )
    batch = extract_patches(sample, patch_size=16, count=20, seed=7)
    for i, (y, x) in enumerate(batch.lr_origins):
        # hr crop origin pixel == s * lr origin pixel, both encode (s*y, s*x)
        assert batch.hr[i, 0, 0, 0] == np.float32(scale * y / h)
        assert batch.hr[i, 1, 0, 0] == np.float32(scale * x / w)
        assert batch.lr[i, 0, 0, 0] == batch.hr[i, 0, 0, 0]
        assert batch.lr[i, 1, 0, 0] == batch.hr[i, 1, 0, 0]
        assert batch.aux[i, 0, 0, 0] == batch.hr[i, 0, 0, 0]


def test_patches_stay_within_bounds_and_match_source():
    sample = make_sample(scale=2, lr_h=9, lr_w=7)
    batch = extract_patches(sample, patch_size=8, count=50, seed=3)
    lr_patch = 4
    for i, (y, x) in enumerate(batch.lr_origins):
        assert 0 <= y <= sample.lr_rgb.height - lr_patch
        assert 0 <= x <= sample.lr_rgb.width - lr_patch
        assert np.array_equal(
            batch.lr[i], sample.lr_rgb.values[:, y : y + lr_patch, x : x + lr_patch]
        )
        hy, hx = 2 * y, 2 * x
        assert np.array_equal(batch.aux[i], sample.aux.values[:, hy : hy + 8, hx : hx + 8])
        assert np.array_equal(batch.hr[i], sample.hr_rgb.values[:, hy : hy + 8, hx : hx + 8])


def test_patch_size_must_divide_scale():
    sample = make_sample(scale=4, lr_h=8, lr_w=8)
    with pytest.raises(ValueError, match="not divisible"):
        extract_patches(sample, patch_size=10, count=1, seed=0)


def test_image_smaller_than_patch_rejected():
    sample = make_sample(scale=2, lr_h=3, lr_w=3)
    with pytest.raises(ValueError, match="smaller than patch"):
        extract_patches(sample, patch_size=8, count=1, seed=0)


def test_patches_require_ground_truth():
    sample = make_sample(with_hr=False)
    with pytest.raises(ValueError, match="ground truth"):
        extract_patches(sample, patch_size=4, count=1, seed=0)
