import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pairflow.io import (FLO_MAGIC, FlowFileError, flow_to_color, make_colorwheel, read_flo, read_image,
                         write_flo, write_flow_png, write_image)

finite32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@given(arrays(np.float32, st.tuples(st.just(2), st.integers(1, 7), st.integers(1, 9)), elements=finite32))
def test_flo_round_trip_bit_identical(tmp_path_factory, flow):
    p = tmp_path_factory.mktemp("flo") / "f.flo"
    write_flo(p, flow)
    back = read_flo(p)
    assert back.shape == flow.shape and back.dtype == np.float32
    assert back.tobytes() == flow.tobytes()


def test_flo_layout(tmp_path):
    # header then row-major (u, v) pairs
    flow = np.arange(12, dtype=np.float32).reshape(2, 2, 3)
    write_flo(tmp_path / "f.flo", flow)
    raw = (tmp_path / "f.flo").read_bytes()
    assert raw[:4] == FLO_MAGIC
    assert np.frombuffer(raw[4:12], "<i4").tolist() == [3, 2]
    body = np.frombuffer(raw[12:], "<f4")
    assert body[:4].tolist() == [0, 6, 1, 7]
    assert np.frombuffer(FLO_MAGIC, "<f4")[0] == np.float32(202021.25)


@pytest.mark.parametrize("bad", [b"XXXX" + bytes(8), FLO_MAGIC + np.array([2, 2], "<i4").tobytes() + bytes(4),
                                 FLO_MAGIC + np.array([0, 3], "<i4").tobytes()])
def test_flo_rejects_malformed(tmp_path, bad):
    (tmp_path / "bad.flo").write_bytes(bad)
    with pytest.raises(FlowFileError):
        read_flo(tmp_path / "bad.flo")


def test_write_flo_rejects_wrong_shape(tmp_path):
    with pytest.raises(FlowFileError):
        write_flo(tmp_path / "f.flo", np.zeros((3, 4, 4)))


def test_image_round_trip_and_range(tmp_path, rng):
    img = rng.integers(0, 256, size=(3, 5, 7)).astype(np.float64) / 127.5 - 1.0
    for ext in ("png", "ppm"):
        write_image(tmp_path / f"a.{ext}", img)
        back = read_image(tmp_path / f"a.{ext}")
        assert back.shape == (3, 5, 7)
        np.testing.assert_allclose(back, img, atol=1e-12)
    assert read_image(tmp_path / "a.png").min() >= -1.0 and read_image(tmp_path / "a.png").max() <= 1.0


def test_colorwheel_has_55_entries():
    wheel = make_colorwheel()
    assert wheel.shape == (55, 3)
    assert wheel[0].tolist() == [255, 0, 0]


def test_zero_flow_is_white():
    assert np.all(flow_to_color(np.zeros((2, 6, 5))) == 255)


def test_saturation_grows_with_magnitude():
    # same direction, growing magnitude -> monotonically less white
    u = np.linspace(0, 1, 6)[None].repeat(2, 0)
    img = flow_to_color(np.stack([u, np.zeros_like(u)]), max_mag=1.0).astype(int)
    whiteness = img[0].sum(axis=1)
    assert np.all(np.diff(whiteness) <= 0) and whiteness[0] == 3 * 255


def test_hue_depends_on_direction_only():
    ang = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    f1 = np.stack([np.cos(ang), np.sin(ang)])[:, None, :]
    a = flow_to_color(f1, max_mag=1.0)
    b = flow_to_color(3 * f1, max_mag=3.0)
    assert np.array_equal(a, b)
    assert len({tuple(px) for px in a[0]}) == 8


def test_viz_max_clamps(tmp_path):
    flow = np.zeros((2, 1, 2))
    flow[0, 0, 1] = 10.0
    img = flow_to_color(flow, max_mag=2.0)
    full = flow_to_color(flow, max_mag=10.0)
    assert np.array_equal(img[0, 1], full[0, 1])
    write_flow_png(tmp_path / "v.png", flow, 2.0)
    assert (tmp_path / "v.png").stat().st_size > 0
