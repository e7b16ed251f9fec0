import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from terrainflow.heightmap import (
    DEFAULT_H0_M,
    Heightmap,
    TerrainFormatError,
    blur_grid,
    blur_kernel_2d,
    export_pgm,
    gaussian_blur,
    read_sidecar,
    read_terrain,
    rescale_heights,
    resample,
    write_terrain,
)

# exp(-(i^2 + j^2) / 2) / Z for the 5x5 window, evaluated by hand:
# 1D weights e^-2, e^-1/2, 1, e^-1/2, e^-2 sum to 2.4837318859...
CENTER_WEIGHT = 0.1621028216371266
EDGE_NEIGHBOR_WEIGHT = 0.09832033134884575
CORNER_WEIGHT = 0.002969016743950497


def test_impulse_reproduces_kernel():
    grid = np.zeros((9, 9))
    grid[4, 4] = 1.0
    out = blur_grid(grid)
    assert out[4, 4] == pytest.approx(CENTER_WEIGHT, abs=1e-15)
    assert out[4, 5] == pytest.approx(EDGE_NEIGHBOR_WEIGHT, abs=1e-15)
    assert out[2, 2] == pytest.approx(CORNER_WEIGHT, abs=1e-15)
    np.testing.assert_allclose(out[2:7, 2:7], blur_kernel_2d(), atol=1e-15)
    assert out[1, :].max() == 0.0


def test_kernel_is_normalized_and_symmetric():
    k = blur_kernel_2d()
    assert k.shape == (5, 5)
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(k, k.T)
    np.testing.assert_allclose(k, k[::-1, ::-1])


@given(st.floats(-5, 5), st.integers(3, 12), st.integers(3, 12))
def test_constant_grid_is_fixed_point(c, rows, cols):
    out = blur_grid(np.full((rows, cols), c))
    np.testing.assert_allclose(out, c, atol=1e-12)


def test_blur_is_not_idempotent():
    rng = np.random.default_rng(0)
    h = Heightmap(rng.random((20, 20)))
    once = gaussian_blur(h)
    twice = gaussian_blur(once)
    assert not np.allclose(once.values, twice.values)
    assert twice.values.var() < once.values.var() < h.values.var()


@pytest.mark.parametrize("raw,expected", [(-1.0, 0.0), (1.0, DEFAULT_H0_M), (0.0, DEFAULT_H0_M / 2), (1.3, DEFAULT_H0_M), (-7.0, 0.0)])
def test_rescale_endpoints(raw, expected):
    assert rescale_heights(np.full((2, 2), raw)).values[0, 0] == pytest.approx(expected, abs=1e-15)


@given(arrays(np.float64, (4, 5), elements=st.floats(-10, 10)), st.floats(0.01, 3.0))
def test_rescaled_heights_stay_in_range(raw, h0):
    v = rescale_heights(raw, h0).values
    assert v.min() >= 0.0 and v.max() <= h0


def test_rescale_rejects_non_positive_h0():
    with pytest.raises(ValueError):
        rescale_heights(np.zeros((2, 2)), 0.0)


def test_heightmap_rejects_bad_input():
    with pytest.raises(ValueError):
        Heightmap(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        Heightmap(np.zeros(4))
    with pytest.raises(ValueError):
        Heightmap(np.zeros((2, 2)), cell_size_m=-1.0)


def test_resample_identity():
    rng = np.random.default_rng(1)
    h = Heightmap(rng.random((17, 23)), cell_size_m=0.05)
    out = resample(h, 0.05)
    assert out.values.shape == h.values.shape
    np.testing.assert_allclose(out.values, h.values, atol=1e-9)


@pytest.mark.parametrize("cell", [0.01, 0.033, 0.2])
def test_resample_flat_stays_flat(cell):
    h = Heightmap(np.full((11, 11), 0.07), cell_size_m=0.05)
    np.testing.assert_allclose(resample(h, cell).values, 0.07, atol=1e-15)


@pytest.mark.parametrize("cell", [0.02, 0.03, 0.1])
def test_resample_reproduces_plane(cell):
    y, x = np.mgrid[0:31, 0:31] * 0.05
    h = Heightmap(0.3 * x - 0.2 * y + 1.0, cell_size_m=0.05)
    out = resample(h, cell)
    c = out.cell_size_m
    yy, xx = np.mgrid[0 : out.rows, 0 : out.cols] * c
    np.testing.assert_allclose(out.values, 0.3 * xx - 0.2 * yy + 1.0, atol=1e-12)
    # extent preserved, realized spacing within one node of the request
    assert (out.cols - 1) * c == pytest.approx(30 * 0.05, abs=1e-12)
    assert abs(c - cell) <= cell / (out.cols - 1)


def test_resample_rejects_tiny_grid():
    with pytest.raises(ValueError):
        resample(Heightmap(np.zeros((5, 5)), cell_size_m=0.01), 1.0)


def test_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    values = rng.random((13, 7)).astype(np.float32).astype(np.float64)
    h = Heightmap(values, 0.025, 0.25)
    write_terrain(h, tmp_path / "t.trb", {"note": "x"})
    back = read_terrain(tmp_path / "t.trb")
    assert back == Heightmap(values, float(np.float32(0.025)), float(np.float32(0.25)))
    assert read_sidecar(tmp_path / "t.trb") == {"note": "x"}


def test_file_layout_is_little_endian(tmp_path):
    write_terrain(Heightmap(np.array([[1.0, 2.0]]), 0.5, 4.0), tmp_path / "t.trb")
    data = (tmp_path / "t.trb").read_bytes()
    assert data[:4] == b"TRB1"
    assert struct.unpack("<IIff", data[4:20]) == (1, 2, 0.5, 4.0)
    assert struct.unpack("<2f", data[20:]) == (1.0, 2.0)


@pytest.mark.parametrize(
    "mutate,field",
    [
        (lambda d: b"XXXX" + d[4:], "magic"),
        (lambda d: d[:10], "header"),
        (lambda d: d[:-4], "values"),
        (lambda d: d[:4] + struct.pack("<I", 0) + d[8:], "rows"),
        (lambda d: d[:12] + struct.pack("<f", -1.0) + d[16:], "cell_size_m"),
        (lambda d: d[:16] + struct.pack("<f", 0.0) + d[20:], "h0_m"),
        (lambda d: d[:20] + struct.pack("<f", math.nan) + d[24:], "values"),
    ],
)
def test_malformed_files_raise_structured_errors(tmp_path, mutate, field):
    path = tmp_path / "t.trb"
    write_terrain(Heightmap(np.ones((3, 3))), path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(TerrainFormatError) as info:
        read_terrain(path)
    assert info.value.field == field
    if field == "magic":
        assert "bad magic" in str(info.value)


def test_export_pgm(tmp_path):
    h = Heightmap(np.array([[0.0, 0.125], [0.25, 0.3]]), h0_m=0.25)
    export_pgm(h, tmp_path / "t.pgm")
    data = (tmp_path / "t.pgm").read_bytes()
    header = b"P5\n2 2\n65535\n"
    assert data.startswith(header)
    assert struct.unpack(">4H", data[len(header) :]) == (0, 32768, 65535, 65535)


@settings(max_examples=30)
@given(arrays(np.float32, (3, 4), elements=st.floats(0, 1, width=32)))
def test_round_trip_property(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("rt") / "t.trb"
    h = Heightmap(values.astype(np.float64))
    write_terrain(h, path)
    np.testing.assert_array_equal(read_terrain(path).values, h.values)
