import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delag.core import (
    MAGIC,
    ContainerFormatError,
    Era5Series,
    FeatureRaster,
    GridShape,
    Metrics,
    SceneStack,
    TruncationError,
    ValidationError,
    fold_mask,
    load_era5,
    load_features,
    load_stack,
    read_container,
    save_era5,
    save_features,
    save_stack,
    valid_fraction,
    write_container,
)


def _stack_2x2x2():
    temps = np.array([[[290, 291], [np.nan, 293]], [[294, 295], [296, 297]]], dtype=np.float32)
    return SceneStack(np.array([10, 20]), temps)


def test_round_trip_with_nan(tmp_path):
    s = _stack_2x2x2()
    p = tmp_path / "s.lstc"
    save_stack(s, p)
    back = load_stack(p)
    assert back == s
    assert back.temps.tobytes() == s.temps.tobytes()
    p2 = tmp_path / "s2.lstc"
    save_stack(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.lstc"
    save_stack(_stack_2x2x2(), p)
    data = bytearray(p.read_bytes())
    data[:4] = b"XXXX"
    p.write_bytes(bytes(data))
    with pytest.raises(ContainerFormatError):
        load_stack(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.lstc"
    save_stack(_stack_2x2x2(), p)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(TruncationError) as exc:
        load_stack(p)
    assert exc.value.expected == 32
    assert exc.value.actual == 29
    assert "32" in str(exc.value) and "29" in str(exc.value)


def test_save_twice_identical(tmp_path):
    s = _stack_2x2x2()
    save_stack(s, tmp_path / "a.lstc")
    save_stack(s, tmp_path / "b.lstc")
    assert (tmp_path / "a.lstc").read_bytes() == (tmp_path / "b.lstc").read_bytes()


def test_bad_day_order_rejected_before_write(tmp_path):
    with pytest.raises(ValidationError) as exc:
        SceneStack(np.array([5, 3]), np.full((2, 1, 1), 290, np.float32))
    assert exc.value.reason == "days_not_increasing"
    assert exc.value.index == 1
    assert not list(tmp_path.iterdir())


def test_one_pixel_file_size(tmp_path):
    p = tmp_path / "one.lstc"
    save_stack(SceneStack(np.array([1]), np.full((1, 1, 1), 300, np.float32)), p)
    data = p.read_bytes()
    # independent reconstruction of the layout
    header = {"days": [1], "dims": [1, 1, 1], "dtype": "f32le", "order": "day-major,row-major"}
    meta_len = struct.unpack("<Q", data[6:14])[0]
    hdr = json.loads(data[14:14 + meta_len])
    assert {k: hdr[k] for k in header} == header
    assert len(data) == 6 + 8 + meta_len + 4
    assert data[:6] == b"LSTC1\n"
    assert struct.unpack("<f", data[-4:])[0] == 300.0


def test_header_layout_bytes(tmp_path):
    p = tmp_path / "h.lstc"
    write_container(p, np.zeros((1, 1, 2), np.float32), [7])
    data = p.read_bytes()
    hlen = struct.unpack("<Q", data[6:14])[0]
    assert data[14:14 + hlen] == b'{"days":[7],"dims":[1,1,2],"dtype":"f32le","order":"day-major,row-major"}'
    assert len(data) == 14 + hlen + 8


@pytest.mark.parametrize("bad, reason", [
    (np.array([[[100.0]]]), "temperature_out_of_range"),
    (np.array([[[np.inf]]]), "infinite_temperature"),
])
def test_invariant_violations(bad, reason):
    with pytest.raises(ValidationError) as exc:
        SceneStack(np.array([1]), bad.astype(np.float32))
    assert exc.value.reason == reason


def test_loader_rejects_invalid_payload(tmp_path):
    p = tmp_path / "x.lstc"
    write_container(p, np.array([[[400.0]]], np.float32), [1])
    with pytest.raises(ValidationError) as exc:
        load_stack(p)
    assert exc.value.reason == "temperature_out_of_range"
    assert exc.value.index == 0
    write_container(p, np.full((2, 1, 1), 290, np.float32), [3, 2])
    with pytest.raises(ValidationError):
        load_stack(p)
    write_container(p, np.full((1, 1, 1), 290, np.float32), [400])
    with pytest.raises(ValidationError) as exc:
        load_stack(p)
    assert exc.value.reason == "day_out_of_range"


def test_grid_shape():
    assert GridShape(366, 1, 1).n_pixels == 1
    with pytest.raises(ValidationError):
        GridShape(367, 1, 1)
    with pytest.raises(ValidationError):
        GridShape(1, 0, 1)


def test_valid_fraction_examples():
    temps = np.array([[[np.nan, np.nan], [np.nan, np.nan]],
                      [[290, 291], [292, 293]],
                      [[290, np.nan], [292, 293]]], dtype=np.float32)
    s = SceneStack(np.array([1, 2, 3]), temps)
    assert valid_fraction(s, 0) == 0.0
    assert valid_fraction(s, 1) == 1.0
    assert valid_fraction(s, 2) == 0.75
    with pytest.raises(IndexError):
        valid_fraction(s, 3)


@st.composite
def stacks(draw):
    n = draw(st.integers(1, 4))
    h = draw(st.integers(1, 4))
    w = draw(st.integers(1, 4))
    days = sorted(draw(st.sets(st.integers(1, 366), min_size=n, max_size=n)))
    vals = draw(st.lists(st.one_of(st.floats(180, 360, width=32), st.just(float("nan"))),
                         min_size=n * h * w, max_size=n * h * w))
    return SceneStack(np.array(days), np.array(vals, dtype=np.float32).reshape(n, h, w))


@settings(max_examples=60, deadline=None)
@given(stacks())
def test_round_trip_property(tmp_path_factory, s):
    p = tmp_path_factory.mktemp("rt") / "s.lstc"
    save_stack(s, p)
    assert load_stack(p) == s


@settings(max_examples=60, deadline=None)
@given(stacks(), st.randoms())
def test_valid_fraction_permutation_invariant(s, rnd):
    perm = list(range(s.temps.shape[1] * s.temps.shape[2]))
    rnd.shuffle(perm)
    flat = s.temps.reshape(s.temps.shape[0], -1)[:, perm].reshape(s.temps.shape)
    s2 = SceneStack(s.days, flat)
    for i in range(len(s.days)):
        assert valid_fraction(s, i) == valid_fraction(s2, i)


def test_mask_file_folded_in(tmp_path):
    s = _stack_2x2x2()
    save_stack(s, tmp_path / "s.lstc")
    mask = np.ones((2, 2, 2), np.float32)
    mask[1, 0, 0] = 0
    write_container(tmp_path / "m.lstc", mask, s.days)
    back = load_stack(tmp_path / "s.lstc", mask_path=tmp_path / "m.lstc")
    assert np.isnan(back.temps[1, 0, 0])
    assert back == fold_mask(s, mask.astype(bool))


def test_era5_and_features_round_trip(tmp_path):
    e = Era5Series(np.arange(1, 6), np.full((5, 2), 285.0, np.float32), np.array([[0, 1], [1, 0]]))
    save_era5(e, tmp_path / "e.lstc")
    e2 = load_era5(tmp_path / "e.lstc")
    assert np.array_equal(e2.values, e.values) and np.array_equal(e2.cell_map, e.cell_map)
    assert e2.pixel_values([2]).shape == (1, 2, 2)
    with pytest.raises(ValidationError):
        Era5Series(np.arange(1, 3), np.array([[285.0], [np.nan]], np.float32), np.zeros((1, 1), int))
    with pytest.raises(ValidationError):
        Era5Series(np.arange(1, 3), np.full((2, 1), 285.0, np.float32), np.ones((1, 1), int))
    f = FeatureRaster(np.random.default_rng(0).uniform(size=(6, 2, 2)).astype(np.float32))
    save_features(f, tmp_path / "f.lstc")
    f2 = load_features(tmp_path / "f.lstc")
    assert np.array_equal(f2.values, f.values)
    assert f2.matrix().shape == (4, 6)
    with pytest.raises(ValidationError):
        FeatureRaster(np.full((6, 2, 2), np.nan))


def test_metrics_dict_round_trip():
    m = Metrics(mae=1.0, rmse=2.0, r2=0.5, bias=0.1, n=4, cov95=0.9)
    assert Metrics.from_dict(m.to_dict()) == m


def test_magic_constant(tmp_path):
    write_container(tmp_path / "m.lstc", np.zeros((1, 1, 1)), [1])
    assert (tmp_path / "m.lstc").read_bytes()[:6] == MAGIC == b"LSTC1\n"
    header, arr = read_container(tmp_path / "m.lstc")
    assert header["dims"] == [1, 1, 1] and arr.dtype == np.float32
