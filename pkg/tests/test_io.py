import numpy as np
import pytest

from dpnet import io


def test_array_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(3,), (2, 5), (1, 2, 3, 4), ()]:
        arr = rng.standard_normal(shape)
        io.write_array(tmp_path / "a.pxr", arr)
        back = io.read_array(tmp_path / "a.pxr", shape)
        assert back.shape == shape and back.tobytes() == np.asarray(arr, dtype="<f8").tobytes()


def test_header_layout(tmp_path):
    io.write_array(tmp_path / "a.pxr", np.ones((2, 3)))
    raw = (tmp_path / "a.pxr").read_bytes()
    assert raw[:4] == b"PXR1"
    assert int.from_bytes(raw[4:8], "little") == 2
    assert len(raw) == 4 + 4 + 8 + 6 * 8


def test_errors(tmp_path):
    with pytest.raises(io.MissingFileError):
        io.read_array(tmp_path / "none.pxr")
    (tmp_path / "bad.pxr").write_bytes(b"NOPE0000")
    with pytest.raises(io.CorruptFileError):
        io.read_array(tmp_path / "bad.pxr")
    io.write_array(tmp_path / "a.pxr", np.ones(4))
    with pytest.raises(io.ShapeMismatchError):
        io.read_array(tmp_path / "a.pxr", (2, 2))


def test_json(tmp_path):
    io.write_json(tmp_path / "m.json", {"b": 1, "a": [1.5, None]})
    assert (tmp_path / "m.json").read_text().startswith('{\n  "a"')
    assert io.read_json(tmp_path / "m.json") == {"a": [1.5, None], "b": 1}
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(io.CorruptFileError):
        io.read_json(tmp_path / "bad.json")


def test_pgm_round_trip(tmp_path):
    img = np.linspace(-0.5, 2.0, 35).reshape(5, 7)
    io.write_pgm(tmp_path / "i.pgm", img)
    back, lo, hi = io.read_pgm(tmp_path / "i.pgm")
    assert (lo, hi) == (-0.5, 2.0)
    np.testing.assert_allclose(back, img, atol=2.5 / 65535)
