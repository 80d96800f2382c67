import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stereoprior import checkpoint, imageio


@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=3, max_dims=3, min_side=1, max_side=9).map(lambda s: (s[0], s[1], 3))))
def test_ppm_round_trip(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("ppm") / "x.ppm"
    imageio.write_ppm(path, img)
    back = imageio.read_ppm(path)
    assert back.dtype == np.uint8 and np.array_equal(back, img)


@given(
    hnp.arrays(
        np.float32,
        hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=9),
        elements=st.floats(width=32, allow_nan=False),
    )
)
def test_pfm_round_trip_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("pfm") / "x.pfm"
    imageio.write_pfm(path, arr)
    back = imageio.read_pfm(path)
    assert back.tobytes() == arr.astype("<f4").tobytes()


def test_pfm_color_and_special_values(tmp_path):
    arr = np.array([[[np.inf, -0.0, 1e-38], [3.5, -2, 7]]], dtype=np.float32)
    imageio.write_pfm(tmp_path / "c.pfm", arr)
    assert imageio.read_pfm(tmp_path / "c.pfm").tobytes() == arr.tobytes()


def test_pfm_rows_bottom_to_top(tmp_path):
    arr = np.array([[1.0], [2.0]], dtype=np.float32)
    imageio.write_pfm(tmp_path / "r.pfm", arr)
    raw = (tmp_path / "r.pfm").read_bytes()
    assert raw.startswith(b"Pf\n1 2\n-1.0\n")
    assert np.frombuffer(raw[-8:], "<f4").tolist() == [2.0, 1.0]


def test_pfm_big_endian_read(tmp_path):
    arr = np.array([[1.5, -3.0]], dtype=">f4")
    (tmp_path / "b.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + arr.tobytes())
    assert imageio.read_pfm(tmp_path / "b.pfm").tolist() == [[1.5, -3.0]]


def test_ppm_comments_and_16_bit(tmp_path):
    px = np.array([[[0, 1000, 65535]]], dtype=">u2")
    (tmp_path / "c.ppm").write_bytes(b"P6\n# note\n1 1\n65535\n" + px.tobytes())
    assert imageio.read_ppm(tmp_path / "c.ppm").tolist() == [[[0, 1000, 65535]]]


def test_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(ValueError):
        imageio.read_ppm(tmp_path / "x")
    with pytest.raises(ValueError):
        imageio.read_pfm(tmp_path / "x")


def test_float_image_quantization():
    img = np.array([[[0.0, 0.5, 1.2]]]).transpose(2, 0, 1)
    assert imageio.to_uint8(img).tolist() == [[[0, 128, 255]]]


def test_colorize_marks_invalid_black():
    v = np.array([[1.0, 2.0], [np.nan, 4.0]])
    out = imageio.colorize(v)
    assert out.shape == (2, 2, 3) and out.dtype == np.uint8
    assert out[1, 0].tolist() == [0, 0, 0]


def test_checkpoint_round_trip(tmp_path):
    tensors = {
        "a": torch.randn(3, 4, dtype=torch.float64),
        "b": torch.randn(5, dtype=torch.float32),
        "c": torch.tensor([1, -2], dtype=torch.int64),
        "d": torch.tensor([True, False]),
    }
    checkpoint.save(tmp_path / "c.json", tensors, {"x": 1})
    back, meta = checkpoint.load(tmp_path / "c.json")
    assert meta == {"x": 1}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and torch.equal(back[k], v)
    assert checkpoint.dumps(tensors, {"x": 1}) == checkpoint.dumps(dict(reversed(tensors.items())), {"x": 1})


def test_checkpoint_version_check():
    data = checkpoint.dumps({"a": torch.zeros(1)}).replace(b'"format_version":1', b'"format_version":99')
    with pytest.raises(checkpoint.CheckpointVersionError):
        checkpoint.loads(data)
    with pytest.raises(TypeError):
        checkpoint.encode_tensor(torch.zeros(1, dtype=torch.float16))
