import struct

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rtatl.data.flow import downsample_flow, farneback_flow, prepare_flow_target, read_flo, write_flo
from rtatl.data.types import DataError, FlowPair


def textured(size=192, seed=0):
    rng = np.random.default_rng(seed)
    coarse = rng.random((size // 8, size // 8)).astype(np.float32)
    img = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    img = cv2.GaussianBlur(img, (0, 0), 1.5)
    img = (img - img.min()) / (img.max() - img.min())
    return np.repeat(img[..., None], 3, axis=2)


def translate(img, dx, dy):
    m = np.float32([[1, 0, dx], [0, 1, dy]])
    return cv2.warpAffine(img, m, img.shape[1::-1], flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)


def test_flo_header_layout(tmp_path):
    flow = np.arange(2 * 3 * 5, dtype=np.float32).reshape(3, 5, 2)
    write_flo(tmp_path / "a.flo", flow)
    raw = (tmp_path / "a.flo").read_bytes()
    assert struct.unpack("<f", raw[:4])[0] == 202021.25
    assert struct.unpack("<ii", raw[4:12]) == (5, 3)
    assert len(raw) == 12 + 4 * flow.size
    # u and v interleaved row-major
    assert struct.unpack("<4f", raw[12:28]) == (0.0, 1.0, 2.0, 3.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(2)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_flo_round_trip_is_bit_exact(tmp_path_factory, flow):
    path = tmp_path_factory.mktemp("flo") / "f.flo"
    write_flo(path, flow)
    back = read_flo(path)
    assert back.dtype == np.float32
    assert back.tobytes() == flow.tobytes()
    first = path.read_bytes()
    write_flo(path, back)
    assert path.read_bytes() == first


def test_flo_rejects_bad_files(tmp_path):
    (tmp_path / "bad.flo").write_bytes(b"XIEH" + b"\0" * 8)
    with pytest.raises(DataError, match="magic"):
        read_flo(tmp_path / "bad.flo")
    write_flo(tmp_path / "short.flo", np.zeros((4, 4, 2), np.float32))
    data = (tmp_path / "short.flo").read_bytes()[:-4]
    (tmp_path / "short.flo").write_bytes(data)
    with pytest.raises(DataError):
        read_flo(tmp_path / "short.flo")
    with pytest.raises(ValueError):
        write_flo(tmp_path / "x.flo", np.zeros((4, 4, 3)))


def test_identical_frames_have_zero_flow():
    img = textured()
    pair = prepare_flow_target(img, img, provider=farneback_flow)
    # the polynomial expansion is unreliable within a few pixels of the border
    assert np.abs(pair.flow[8:-8, 8:-8]).max() < 1e-3
    assert np.abs(pair.flow).mean() < 0.01


def test_translation_oracle():
    img = textured()
    pair = prepare_flow_target(img, translate(img, 2.0, -1.0), provider=farneback_flow)
    inner = pair.flow[24:-24, 24:-24]
    mean = inner.reshape(-1, 2).mean(0)
    assert abs(mean[0] - 2.0) < 0.3 and abs(mean[1] + 1.0) < 0.3
    small = downsample_flow(pair, (24, 24))
    mean_small = small[3:-3, 3:-3].reshape(-1, 2).mean(0)
    assert abs(mean_small[0] - 0.25) < 0.05 and abs(mean_small[1] + 0.125) < 0.05


def test_both_frames_use_the_first_transform():
    img = textured(64)
    shift = np.array([[1.0, 0, 3.0], [0, 1.0, 0]])
    seen = []
    pair = prepare_flow_target(img, img, shift, 64, provider=lambda a, b: seen.append((a, b)) or np.zeros((64, 64, 2), np.float32))
    a, b = seen[0]
    np.testing.assert_array_equal(a, b)
    assert isinstance(pair, FlowPair) and pair.frame_t.shape == (64, 64, 3)


def test_flo_file_wins_over_provider(tmp_path):
    target = np.full((8, 8, 2), 3.0, np.float32)
    write_flo(tmp_path / "p.flo", target)
    img = np.zeros((8, 8, 3), np.float32)
    pair = prepare_flow_target(img, img, flow_path=tmp_path / "p.flo", provider=lambda a, b: 1 / 0)
    np.testing.assert_array_equal(pair.flow, target)


def test_missing_flow_names_the_pair(tmp_path):
    img = np.zeros((8, 8, 3), np.float32)
    with pytest.raises(DataError, match="f0001.png -> f0004.png"):
        prepare_flow_target(img, img, flow_path=tmp_path / "none.flo", pair_name="f0001.png -> f0004.png")


def test_provider_output_is_validated():
    img = np.zeros((8, 8, 3), np.float32)
    with pytest.raises(DataError, match="shape"):
        prepare_flow_target(img, img, provider=lambda a, b: np.zeros((4, 4, 2), np.float32))
    bad = np.zeros((8, 8, 2), np.float32)
    bad[0, 0, 0] = np.nan
    with pytest.raises(DataError, match="non-finite"):
        prepare_flow_target(img, img, provider=lambda a, b: bad)


def test_downsample_constant_flow():
    flow = np.zeros((192, 192, 2), np.float32)
    flow[..., 0] = 4.0
    out = downsample_flow(flow, (24, 24))
    assert out.shape == (24, 24, 2)
    np.testing.assert_allclose(out[..., 0], 0.5)
    np.testing.assert_allclose(out[..., 1], 0.0)


def test_downsample_zero_flow():
    for hw in [(96, 96), (48, 48), (24, 24), (12, 12)]:
        assert not downsample_flow(np.zeros((192, 192, 2), np.float32), hw).any()


def test_downsample_preserves_mean_after_scale_correction(rng):
    flow = rng.normal(size=(192, 192, 2)).astype(np.float32)
    out = downsample_flow(flow, (24, 24))
    np.testing.assert_allclose(out.mean((0, 1)) * 8, flow.mean((0, 1)), atol=1e-6)


def test_downsample_explicit_scale():
    flow = np.ones((16, 16, 2), np.float32)
    np.testing.assert_allclose(downsample_flow(flow, (4, 4), scale=1.0), 1.0)


def test_downsample_rejects_non_divisible():
    with pytest.raises(ValueError):
        downsample_flow(np.zeros((200, 200, 2), np.float32), (24, 24))
