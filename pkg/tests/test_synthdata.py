import numpy as np
import pytest

from stereoprior import kernels
from stereoprior.synthdata import (
    BASELINES_M,
    DataConfig,
    SceneRejected,
    SceneSpec,
    WaterSpec,
    degrade_underwater,
    gen_random_scene,
    gen_scene,
    generate_dataset,
    list_samples,
    read_sample,
    sample_spec,
    write_sample,
)


def _fronto(z=2.0):
    return SceneSpec(
        layout="fronto_planes", depth_range=(1.0, z), baseline_m=0.1, focal_px=320.0,
        resolution=(64, 32), num_objects=0,
    )


def test_single_fronto_plane_disparity():
    s = gen_scene(_fronto(), seed=0)
    assert np.all(s.gt_depth == 2.0)
    assert np.all(s.gt_disparity == 16.0)
    assert s.I_L.shape == (3, 32, 64) and s.I_R.shape == (3, 32, 64)


def test_same_seed_bit_identical():
    spec = SceneSpec(layout="boxes", water=WaterSpec((0.2, 0.1, 0.05), particle_density=0.002))
    a, b = gen_scene(spec, 7), gen_scene(spec, 7)
    for name in ("I_L", "I_R", "gt_depth", "gt_disparity"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    c = gen_scene(spec, 8)
    assert a.I_L.tobytes() != c.I_L.tobytes()


@pytest.mark.parametrize("layout", ["fronto_planes", "slanted_plane", "ramp", "boxes"])
def test_ground_truth_identity(layout):
    spec = SceneSpec(layout=layout, depth_range=(0.8, 3.2), num_objects=2)
    s = gen_scene(spec, 3)
    np.testing.assert_allclose(s.gt_disparity * s.gt_depth, s.calib.fb, rtol=1e-15)
    assert np.all((s.I_L >= 0) & (s.I_L <= 1))


def test_right_view_consistent_with_disparity():
    s = gen_scene(_fronto(), seed=1)
    # a constant 16 px shift: left x sees what right x - 16 sees
    np.testing.assert_allclose(s.I_L[..., 16:], s.I_R[..., :-16], atol=1e-12)


def test_boxes_occlusion_band_width():
    spec = SceneSpec(layout="boxes", depth_range=(1.0, 4.0), num_objects=1, baseline_m=0.1, focal_px=160.0)
    s = gen_scene(spec, 11)
    d = s.gt_disparity
    d_bg = d.min()
    vis = kernels.visibility_mask(d)
    checked = 0
    for i in range(d.shape[0]):
        fg = np.nonzero(d[i] > d_bg + 1e-9)[0]
        if len(fg) == 0 or fg[0] < 20:
            continue
        band = d[i, fg[0]] - d_bg
        hidden = np.nonzero(vis[i, : fg[0]] == 0)[0]
        assert abs(len(hidden) - band) <= 1.0
        assert np.all(hidden >= fg[0] - np.ceil(band) - 1)
        checked += 1
    assert checked > 0


def test_degrade_examples():
    img = np.ones((3, 1, 1))
    depth = np.full((1, 1), 2.0)
    out = degrade_underwater(img, depth, WaterSpec((0.6, 0.0, 0.0), (0.1, 0.3, 0.35)))
    assert out[0, 0, 0] == pytest.approx(np.exp(-1.2) + 0.1 * (1 - np.exp(-1.2)), abs=1e-15)
    assert round(float(out[0, 0, 0]), 3) == 0.371
    rand = np.random.default_rng(0).random((3, 4, 4))
    assert np.array_equal(degrade_underwater(rand, np.ones((4, 4)), WaterSpec()), rand)
    far = degrade_underwater(rand, np.full((4, 4), 1e4), WaterSpec((1, 1, 1), (0.1, 0.3, 0.35)))
    np.testing.assert_allclose(far[:, 0, 0], [0.1, 0.3, 0.35], atol=1e-12)
    with pytest.raises(ValueError):
        degrade_underwater(rand, np.zeros((4, 4)), WaterSpec())


def test_spec_validation():
    with pytest.raises(ValueError):
        gen_scene(SceneSpec(baseline_m=0.15), 0)
    with pytest.raises(ValueError):
        gen_scene(SceneSpec(resolution=(100, 96)), 0)
    with pytest.raises(ValueError):
        gen_scene(SceneSpec(layout="cave"), 0)


def test_textureless_rejected():
    spec = SceneSpec(water=WaterSpec((50.0, 50.0, 50.0)), depth_range=(1.0, 4.0))
    with pytest.raises(SceneRejected):
        gen_scene(spec, 0)


def test_baseline_frequencies():
    rng = np.random.default_rng(0)
    cfg = DataConfig()
    draws = [sample_spec(rng, cfg).baseline_m for _ in range(1000)]
    for b in BASELINES_M:
        assert abs(draws.count(b) / 1000 - 0.25) <= 0.05


def test_random_scene_disparity_range():
    cfg = DataConfig(width=64, height=32)
    for seed in range(4):
        s = gen_random_scene(cfg, seed)
        assert s.gt_disparity.min() >= 4.0 - 1e-9 and s.gt_disparity.max() <= 40.0 + 1e-9


def test_sample_disk_round_trip(tmp_path):
    s = gen_scene(SceneSpec(resolution=(64, 32)), 5)
    write_sample(tmp_path / "s", s)
    back = read_sample(tmp_path / "s")
    assert back.gt_depth.astype(np.float32).tobytes() == s.gt_depth.astype(np.float32).tobytes()
    assert np.abs(back.I_L - s.I_L).max() <= 0.5 / 255 + 1e-12
    assert back.calib == s.calib and back.seed == 5 and back.spec == s.spec


def test_generate_dataset_deterministic(tmp_path):
    cfg = DataConfig(width=64, height=32)
    a = generate_dataset(tmp_path / "a", 3, 9, cfg)
    b = generate_dataset(tmp_path / "b", 3, 9, cfg)
    assert [p.name for p in list_samples(tmp_path / "a")] == [p.name for p in a]
    for pa, pb in zip(a, b):
        for f in ("left.ppm", "right.ppm", "depth.pfm", "disparity.pfm", "meta.json"):
            assert (pa / f).read_bytes() == (pb / f).read_bytes()
