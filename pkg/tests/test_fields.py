import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adiff.fields import (ConcentrationSeries, FieldFormatError, Grid, ScalarField, TensorField,
                          VectorField, decode_field, encode_field, read_field, read_series,
                          tensor_entry_index, write_field, write_series)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid((2, 5))
    with pytest.raises(ValueError):
        Grid((4,))
    with pytest.raises(ValueError):
        Grid((4, 4), spacing=(1.0, -1.0))
    g = Grid((4, 5, 6), spacing=0.5)
    assert g.spacing == (0.5, 0.5, 0.5)
    assert g.size == 120
    assert g.flat_index(1, 2, 3) == 1 * 30 + 2 * 6 + 3
    assert g.unravel(g.flat_index(3, 4, 5)) == (3, 4, 5)


def test_boundary_mask_ring():
    m = Grid((5, 6)).boundary_mask()
    assert m.sum() == 5 * 6 - 3 * 4
    assert not m[1:-1, 1:-1].any()


def test_fields_are_immutable_and_reject_nan():
    g = Grid((3, 3))
    f = ScalarField(g, np.arange(9.0))
    with pytest.raises(ValueError):
        f.data[0, 0] = 1.0
    with pytest.raises(ValueError, match="non-finite"):
        ScalarField(g, np.full((3, 3), np.nan))


def test_tensor_entry_order_and_matrix():
    assert tensor_entry_index(2) == ((0, 0), (0, 1), (1, 1))
    g = Grid((3, 3, 3))
    entries = np.stack([np.full((3, 3, 3), v) for v in (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)])
    t = TensorField(g, entries)
    m = t.matrix()[0, 0, 0]
    np.testing.assert_array_equal(m, [[1, 2, 4], [2, 3, 5], [4, 5, 6]])
    assert TensorField.from_matrix(g, t.matrix()) == t


def test_encode_layout():
    g = Grid((3, 3))
    f = ScalarField(g, np.arange(9.0))
    buf = encode_field(f)
    header = 4 + 12 + 8 * 2 + 8 * 2
    assert len(buf) == header + 9 * 8
    assert buf[:4] == b"ADGF"
    assert struct.unpack_from("<III", buf, 4) == (1, 2, 0)
    np.testing.assert_array_equal(np.frombuffer(buf[header:], "<f8"), np.arange(9.0))


def test_vector_header_records_ndim(tmp_path):
    g = Grid((3, 3, 3))
    v = VectorField(g, np.random.default_rng(0).normal(size=(3, 3, 3, 3)))
    write_field(v, tmp_path / "v.adgf")
    buf = (tmp_path / "v.adgf").read_bytes()
    assert struct.unpack_from("<III", buf, 4) == (1, 3, 1)
    assert read_field(tmp_path / "v.adgf") == v


def test_decode_errors():
    g = Grid((3, 3))
    buf = encode_field(ScalarField(g, np.ones((3, 3))))
    with pytest.raises(FieldFormatError, match="bad magic"):
        decode_field(b"XXXX" + buf[4:])
    with pytest.raises(FieldFormatError, match="truncated"):
        decode_field(buf[:-8])
    with pytest.raises(FieldFormatError, match="trailing"):
        decode_field(buf + b"\0" * 8)
    with pytest.raises(FieldFormatError, match="version"):
        decode_field(buf[:4] + struct.pack("<I", 9) + buf[8:])


@settings(max_examples=40, deadline=None)
@given(dims=st.tuples(st.integers(3, 6), st.integers(3, 6)),
       kind=st.sampled_from(["scalar", "vector", "tensor"]), data=st.data())
def test_round_trip_bitwise(dims, kind, data):
    g = Grid(dims, spacing=(0.5, 2.0))
    n = {"scalar": 1, "vector": 2, "tensor": 3}[kind]
    values = data.draw(arrays(np.float64, (n, *dims),
                              elements=st.floats(-1e6, 1e6, allow_nan=False, width=64)))
    f = {"scalar": lambda: ScalarField(g, values[0]),
         "vector": lambda: VectorField(g, values),
         "tensor": lambda: TensorField(g, values)}[kind]()
    back = decode_field(encode_field(f))
    assert type(back) is type(f)
    assert back.grid == g
    assert back.array.tobytes() == f.array.tobytes()


def test_series_io(tmp_path):
    g = Grid((4, 4))
    arr = np.random.default_rng(1).random((40, 4, 4))
    s = ConcentrationSeries.from_array(g, arr, dt=0.01)
    write_series(s, tmp_path / "s")
    manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
    assert len(manifest["frames"]) == 40
    assert len(list((tmp_path / "s").glob("*.adgf"))) == 40
    back = read_series(tmp_path / "s")
    assert back.dt == 0.01
    assert back == s
    (tmp_path / "s" / manifest["frames"][3]).unlink()
    with pytest.raises(FieldFormatError, match="missing frame"):
        read_series(tmp_path / "s")


def test_series_window():
    g = Grid((3, 3))
    s = ConcentrationSeries.from_array(g, np.arange(5 * 9.0).reshape(5, 3, 3), dt=0.5)
    w = s.window(2, 3)
    assert w.n_frames == 3 and w.t0 == 1.0
    assert w.frames[0] == s.frames[2]
    with pytest.raises(ValueError):
        s.window(4, 2)
