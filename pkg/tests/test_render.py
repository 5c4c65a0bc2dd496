import itertools

import numpy as np
import pytest

from irrlab.render import (
    JPEG,
    FrameDecodeError,
    ServerSceneState,
    decode_frame,
    encode_frame,
    normalize_angle,
    render_scene,
)

SMALL = (96, 96)


def test_deterministic():
    assert np.array_equal(render_scene(35.0), render_scene(35.0))


def test_shape_and_dtype():
    img = render_scene(0, (120, 80))
    assert img.shape == (80, 120, 3)
    assert img.dtype == np.uint8


def test_wraps_at_360():
    for angle in (0, 5, 90, 355):
        assert np.array_equal(render_scene(angle, SMALL), render_scene(angle + 360, SMALL))
    assert np.array_equal(render_scene(-5, SMALL), render_scene(355, SMALL))


def test_all_step_angles_distinct():
    frames = [render_scene(a) for a in range(0, 360, 5)]
    for (i, a), (j, b) in itertools.combinations(enumerate(frames), 2):
        assert not np.array_equal(a, b), (i * 5, j * 5)


def test_scene_state_wraps():
    s = ServerSceneState()
    for _ in range(72):
        s.rotate(s.rotation_step)
    assert s.angle_degrees == 0
    s.rotate(-5)
    assert s.angle_degrees == 355
    assert 0 <= normalize_angle(-720.5) < 360


def test_lossless_round_trip():
    rng = np.random.default_rng(0)
    for shape in [(1, 1, 3), (17, 31, 3), (64, 64, 3)]:
        px = rng.integers(0, 256, shape, dtype=np.uint8)
        assert np.array_equal(decode_frame(encode_frame(px)), px)


def test_jpeg_preserves_dimensions():
    img = render_scene(10, SMALL)
    out = decode_frame(encode_frame(img, JPEG))
    assert out.shape == img.shape


@pytest.mark.parametrize("garbage", [b"", b"nonsense", b"IRF1", b"IRF1" + bytes(5) + b"zz",
                                     b"\xff\xd8garbage"])
def test_decode_garbage(garbage):
    with pytest.raises(FrameDecodeError):
        decode_frame(garbage)


def test_encode_rejects_bad_input():
    with pytest.raises(ValueError):
        encode_frame(np.zeros((4, 4), np.uint8))
    with pytest.raises(ValueError):
        encode_frame(np.zeros((4, 4, 3), np.uint8), codec="png")
