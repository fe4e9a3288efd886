import hashlib
import json

import numpy as np
import pytest
import torch

from liversearch.errors import FormatError
from liversearch.selfsup.checkpoint import load_checkpoint, save_checkpoint
from liversearch.selfsup.models import EncoderSpec, HeadSpec, SiameseModel


def _model(seed=0):
    torch.manual_seed(seed)
    model = SiameseModel(EncoderSpec(kind="tiny_conv", out_dim=16, width=4), HeadSpec(proj_dim=8))
    model.eval()
    return model


def test_round_trip_state_and_specs(tmp_path):
    model = _model()
    path = tmp_path / "m.ckpt"
    fp = save_checkpoint(
        model,
        path,
        train_config={"epochs": 2, "seed": 3},
        augment_config={"out_size": [32, 32]},
    )
    bundle = load_checkpoint(path)
    assert bundle.fingerprint == fp
    assert len(fp) == 16
    assert bundle.encoder_spec.dim == 16
    assert bundle.encoder_spec.width == 4
    assert bundle.head_spec.proj_dim == 8
    assert bundle.train_config == {"epochs": 2, "seed": 3}
    assert bundle.augment_config == {"out_size": [32, 32]}
    assert not bundle.model.training

    want = model.state_dict()
    got = bundle.model.state_dict()
    assert set(want) == set(got)
    for name in want:
        torch.testing.assert_close(got[name], want[name], rtol=0, atol=0)


def test_round_trip_preserves_forward(tmp_path):
    model = _model(1)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path).model
    torch.manual_seed(0)
    x = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        torch.testing.assert_close(loaded.represent(x), model.represent(x), rtol=0, atol=0)


def test_save_is_byte_deterministic(tmp_path):
    model = _model(2)
    fp_a = save_checkpoint(model, tmp_path / "a.ckpt")
    fp_b = save_checkpoint(model, tmp_path / "b.ckpt")
    assert fp_a == fp_b
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_fingerprint_tracks_weights(tmp_path):
    model = _model(3)
    fp_before = save_checkpoint(model, tmp_path / "before.ckpt")
    with torch.no_grad():
        next(model.parameters()).add_(1.0)
    fp_after = save_checkpoint(model, tmp_path / "after.ckpt")
    assert fp_before != fp_after


def test_direct_mode_round_trip(tmp_path):
    torch.manual_seed(4)
    model = SiameseModel(EncoderSpec(out_dim=8, width=2), HeadSpec(direct=True))
    model.eval()
    save_checkpoint(model, tmp_path / "d.ckpt")
    bundle = load_checkpoint(tmp_path / "d.ckpt")
    assert bundle.head_spec.direct
    assert isinstance(bundle.model.predictor, torch.nn.Identity)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(_model(), path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b"abc")
    with pytest.raises(FormatError) as info:
        load_checkpoint(path)
    assert info.value.offset == 3


def test_flipped_blob_byte_fails_checksum(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(_model(), path)
    data = bytearray(path.read_bytes())
    data[-100] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError) as info:
        load_checkpoint(path)
    assert "checksum" in str(info.value)
    assert info.value.offset == len(data) - 8


def test_flipped_header_byte_fails_checksum(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(_model(), path)
    data = bytearray(path.read_bytes())
    data[10] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def _resign(header: dict, blob: bytes) -> bytes:
    """Re-serialize a tampered header with a valid trailing checksum."""
    body = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + blob
    return body + hashlib.sha256(body).digest()[:8]


def _split(path):
    data = path.read_bytes()
    body = data[:-8]
    newline = body.find(b"\n")
    return json.loads(body[:newline].decode("utf-8")), body[newline + 1 :]


def test_fingerprint_tamper_detected_despite_valid_checksum(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(_model(), path)
    header, blob = _split(path)
    header["fingerprint"] = "0" * 16
    path.write_bytes(_resign(header, blob))
    with pytest.raises(FormatError) as info:
        load_checkpoint(path)
    assert "fingerprint" in str(info.value)


def test_wrong_format_and_version_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(_model(), path)
    header, blob = _split(path)

    bad = dict(header, format="other-format")
    path.write_bytes(_resign(bad, blob))
    with pytest.raises(FormatError):
        load_checkpoint(path)

    bad = dict(header, version=99)
    path.write_bytes(_resign(bad, blob))
    with pytest.raises(FormatError) as info:
        load_checkpoint(path)
    assert "version" in str(info.value)


def test_blob_truncation_reports_tensor_offset(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(_model(), path)
    header, blob = _split(path)
    path.write_bytes(_resign(header, blob[:-4]))
    with pytest.raises(FormatError) as info:
        load_checkpoint(path)
    # either the fingerprint check or the tensor walk catches it
    assert "fingerprint" in str(info.value) or "truncated" in str(info.value)


def test_not_json_header_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    body = b"not json at all\n" + b"\x00" * 16
    path.write_bytes(body + hashlib.sha256(body).digest()[:8])
    with pytest.raises(FormatError):
        load_checkpoint(path)
