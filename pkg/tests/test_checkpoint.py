import io

import pytest
import torch

from canids.checkpoint import (CheckpointError, dumps_checkpoint, load_checkpoint, load_encoder_into,
                               read_checkpoint, save_checkpoint)
from canids.framing import SOURCE_LABELS, TARGET_LABELS
from canids.model import EncoderConfig, ModelConfig, init_weights


def same_state(a, b, prefix=""):
    sa, sb = a.state_dict(), b.state_dict()
    return all(torch.equal(sa[k], sb[k]) for k in sa if k.startswith(prefix))


@pytest.fixture(scope="module")
def source():
    return init_weights(ModelConfig(tuple(SOURCE_LABELS)), seed=7)


def test_round_trip(source, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(source, path, extra={"note": "x"})
    loaded = load_checkpoint(path)
    assert loaded.config == source.config
    assert same_state(loaded, source)
    _, _, meta = read_checkpoint(path)
    assert meta["extra"]["note"] == "x"


def test_stream_round_trip(source):
    buf = io.BytesIO()
    save_checkpoint(source, buf)
    assert same_state(load_checkpoint(io.BytesIO(buf.getvalue())), source)


def test_encoder_only_into_different_head(source):
    target = init_weights(ModelConfig(tuple(TARGET_LABELS), projector=None), seed=1)
    head_before = target.classifier.weight.clone()
    names = load_encoder_into(target, dumps_checkpoint(source))
    assert names and all(n.startswith("encoder.") for n in names)
    assert same_state(target, source, prefix="encoder.")
    assert torch.equal(target.classifier.weight, head_before)
    assert target.classifier.out_features == 4


def test_encoder_fingerprint_mismatch(source):
    other = init_weights(ModelConfig(("normal", "a"), EncoderConfig(widths=(16, 32, 64, 64))))
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_encoder_into(other, dumps_checkpoint(source))


@pytest.mark.parametrize("where", [0, 40, -1, -5000])
def test_corruption_detected(source, where):
    blob = bytearray(dumps_checkpoint(source))
    blob[where] ^= 0xFF
    with pytest.raises(CheckpointError):
        load_checkpoint(bytes(blob))


def test_truncation_detected(source):
    blob = dumps_checkpoint(source)
    with pytest.raises(CheckpointError):
        load_checkpoint(blob[:len(blob) // 2])
