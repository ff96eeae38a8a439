import numpy as np
import pytest

from gtvseg.errors import FormatError, ShapeError, TruncatedPayloadError, UnsupportedVersionError
from gtvseg.fileio import (
    decode_checkpoint,
    decode_volume,
    encode_checkpoint,
    encode_volume,
    list_cases,
    load_checkpoint,
    read_volume,
    save_checkpoint,
    write_volume,
)
from gtvseg.autograd import Tensor
from gtvseg.nn import NetworkConfig, init_params, unet_forward
from gtvseg.volume import LabelMask, Volume

SMALL = NetworkConfig(base_channels=(2, 4, 4, 4), patch_shape=(4, 8, 8))


def test_volume_header_layout():
    v = Volume(np.zeros((2, 3, 4)), (3.0, 0.75, 1.0))
    buf = encode_volume(v)
    assert buf.startswith(b"gtvvol1 f32 2 3 4 3.0 0.75 1.0\n")
    assert len(buf) == len(b"gtvvol1 f32 2 3 4 3.0 0.75 1.0\n") + 2 * 3 * 4 * 4


def test_payload_is_little_endian_z_major():
    d = np.arange(2 * 2 * 3, dtype=np.float32).reshape(2, 2, 3)
    buf = encode_volume(Volume(d))
    payload = buf[buf.index(b"\n") + 1:]
    assert payload == d.astype("<f4").tobytes(order="C")


def test_mask_round_trip(tmp_path):
    m = LabelMask((np.random.default_rng(0).random((3, 4, 5)) > 0.5).astype(np.uint8), (2.0, 1.0, 1.0))
    write_volume(tmp_path / "m.gtvvol", m)
    back = read_volume(tmp_path / "m.gtvvol")
    assert isinstance(back, LabelMask) and np.array_equal(back.data, m.data) and back.spacing == m.spacing


def test_truncated_payload_names_byte_counts():
    buf = encode_volume(Volume(np.zeros((2, 2, 2))))
    with pytest.raises(TruncatedPayloadError, match="expected 32 bytes, got 28"):
        decode_volume(buf[:-4])


def test_unknown_version_rejected():
    buf = encode_volume(Volume(np.zeros((1, 1, 1)))).replace(b"gtvvol1", b"gtvvol2", 1)
    with pytest.raises(UnsupportedVersionError):
        decode_volume(buf)


@pytest.mark.parametrize("header", [b"garbage\n", b"gtvvol1 f64 1 1 1 1 1 1\n", b"gtvvol1 f32 1 1\n",
                                    b"gtvvol1 f32 1 1 1 1 x 1\n", b"no newline at all"])
def test_malformed_headers(header):
    with pytest.raises(FormatError):
        decode_volume(header + b"\0" * 4)


def test_checkpoint_forward_identical_after_round_trip(tmp_path):
    p = init_params(SMALL, 7)
    save_checkpoint(tmp_path / "m.ckpt", p, {"seed": 7})
    q, meta = load_checkpoint(tmp_path / "m.ckpt")
    x = Tensor(np.random.default_rng(1).standard_normal((1, 1, 4, 8, 8)))
    assert meta == {"seed": 7} and q.config == SMALL
    assert np.array_equal(unet_forward(x, p, mode="eval").data, unet_forward(x, q, mode="eval").data)


def test_checkpoint_config_mismatch_names_tensor():
    buf = encode_checkpoint(init_params(NetworkConfig(base_channels=(8, 16, 32, 64)), 0))
    with pytest.raises(ShapeError, match="enc1.conv1.weight"):
        decode_checkpoint(buf, NetworkConfig())


def test_checkpoint_bad_magic_and_truncation():
    buf = encode_checkpoint(init_params(SMALL, 0))
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXXXXXX\n" + buf[9:])
    with pytest.raises(TruncatedPayloadError):
        decode_checkpoint(buf[:-1])
    with pytest.raises(FormatError):
        decode_checkpoint(buf + b"\0")


def test_list_cases(tmp_path):
    for name in ["case_0_img.gtvvol", "case_0_msk.gtvvol", "case_2_img.gtvvol", "notes.txt"]:
        (tmp_path / name).write_bytes(b"")
    cases = list_cases(tmp_path)
    assert sorted(cases) == [0, 2]
    assert cases[2][1] is None
