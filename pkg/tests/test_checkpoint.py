import struct
import zlib

import numpy as np
import pytest

from ssar.autograd import Tensor, no_grad
from ssar.checkpoint import (
    EmbeddingRecord,
    apply_checkpoint,
    decode_tensors,
    encode_embeddings,
    encode_tensors,
    import_pretrained,
    load_checkpoint,
    read_embeddings,
    read_tensor_file,
    save_checkpoint,
    write_embeddings,
    write_tensor_file,
)
from ssar.errors import CheckpointError
from ssar.model import ModelConfig, build_model, embed_frames, normalize_images
from ssar.nn.optim import AdamState


@pytest.fixture(scope="module")
def tiny():
    return build_model(ModelConfig.from_preset("tiny"), seed=0)


def test_header_layout():
    blob = encode_tensors({"a": np.array([1.5, 2.0], np.float32)})
    assert blob[:8] == b"SSARCKPT"
    assert struct.unpack("<II", blob[8:16]) == (1, 1)
    assert struct.unpack("<H", blob[16:18]) == (1,)
    assert blob[18:19] == b"a"
    assert blob[19:21] == bytes([0, 1])
    assert struct.unpack("<Q", blob[21:29]) == (2,)
    assert np.frombuffer(blob[29:37], "<f4").tolist() == [1.5, 2.0]
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])
    assert len(blob) == 41


def test_tensor_round_trip_dtypes():
    src = {"x": np.arange(6, dtype=np.float64).reshape(2, 3), "y": np.float32([[[-0.0, np.inf]]]), "z": np.zeros((0,), np.float32)}
    out = decode_tensors(encode_tensors(src))
    assert list(out) == list(src)
    for k in src:
        assert out[k].dtype == src[k].dtype and out[k].shape == src[k].shape
        assert out[k].tobytes() == src[k].tobytes()


def test_rejects_unsupported_dtype():
    with pytest.raises(CheckpointError):
        encode_tensors({"i": np.arange(3)})


def test_save_load_save_bitwise(tiny, tmp_path):
    adam = AdamState(t=3)
    for k, p in tiny.params.items():
        adam.m[k] = np.full_like(p.data, 0.25)
        adam.v[k] = np.full_like(p.data, 0.5)
    save_checkpoint(tmp_path / "a.ckpt", tiny, adam, stage=1, train_state={"epoch": 2, "lr": 1e-3})
    ck = load_checkpoint(tmp_path / "a.ckpt", tiny.config)
    assert ck.stage == 1 and ck.train_state == {"epoch": 2.0, "lr": 1e-3}
    assert ck.adam.t == 3 and set(ck.adam.m) == set(tiny.params)
    model2 = build_model(tiny.config, seed=9)
    apply_checkpoint(model2, ck)
    save_checkpoint(tmp_path / "b.ckpt", model2, ck.adam, stage=1, train_state=ck.train_state)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_forward_identical_after_reload(tiny, tmp_path):
    frames = np.random.default_rng(0).integers(0, 256, (3, 64, 112, 3), dtype=np.uint8)
    x = Tensor(normalize_images(frames, tiny.config))
    tiny.eval()
    with no_grad():
        before = embed_frames(tiny, x).data
    save_checkpoint(tmp_path / "m.ckpt", tiny)
    other = build_model(tiny.config, seed=5).eval()
    apply_checkpoint(other, load_checkpoint(tmp_path / "m.ckpt"))
    with no_grad():
        after = embed_frames(other, x).data
    assert before.tobytes() == after.tobytes()


@pytest.mark.parametrize("cut", [1, 4, 100])
def test_truncated_rejected(tiny, tmp_path, cut):
    save_checkpoint(tmp_path / "m.ckpt", tiny)
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[:-cut])
    with pytest.raises(CheckpointError, match="CRC"):
        load_checkpoint(tmp_path / "t.ckpt")


def test_flipped_byte_rejected(tiny, tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", tiny)
    blob = bytearray((tmp_path / "m.ckpt").read_bytes())
    blob[len(blob) // 2] ^= 0x10
    (tmp_path / "c.ckpt").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="CRC"):
        load_checkpoint(tmp_path / "c.ckpt")


def _reseal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def test_version_and_magic_errors(tmp_path):
    blob = encode_tensors({"meta.config": np.zeros(1)})
    bad_version = _reseal(blob[:8] + struct.pack("<I", 2) + blob[12:-4])
    with pytest.raises(CheckpointError, match="version"):
        decode_tensors(bad_version)
    with pytest.raises(CheckpointError, match="magic"):
        decode_tensors(_reseal(b"NOTACKPT" + blob[8:-4]))


def test_fingerprint_mismatch(tiny, tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", tiny)
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_checkpoint(tmp_path / "m.ckpt", ModelConfig.from_preset("paper"))


def test_unknown_path_rejected(tiny, tmp_path):
    tensors = {"meta.config": tiny.config.fingerprint(), "bogus.weight": np.zeros(2, np.float32)}
    write_tensor_file(tmp_path / "u.ckpt", tensors)
    with pytest.raises(CheckpointError, match="unknown"):
        load_checkpoint(tmp_path / "u.ckpt")
    tensors = {"meta.config": tiny.config.fingerprint(), "encoder.nothing": np.zeros(2, np.float32)}
    write_tensor_file(tmp_path / "v.ckpt", tensors)
    with pytest.raises(CheckpointError, match="unknown"):
        apply_checkpoint(tiny, load_checkpoint(tmp_path / "v.ckpt"))


def test_partial_group_checkpoint(tiny, tmp_path):
    save_checkpoint(tmp_path / "l.ckpt", tiny, groups=("lstm",))
    ck = load_checkpoint(tmp_path / "l.ckpt", tiny.config)
    assert ck.groups() == ["lstm"]
    other = build_model(tiny.config, seed=3)
    apply_checkpoint(other, ck)
    assert other.params["lstm.fc.weight"].data.tobytes() == tiny.params["lstm.fc.weight"].data.tobytes()
    assert other.params["encoder.conv1.weight"].data.tobytes() != tiny.params["encoder.conv1.weight"].data.tobytes()


def test_import_pretrained(tiny, tmp_path):
    state = {k: v for k, v in tiny.state_arrays().items() if k.startswith("encoder.layer1.")}
    write_tensor_file(tmp_path / "r.bin", state)
    other = build_model(tiny.config, seed=4)
    done = import_pretrained(other, tmp_path / "r.bin", prefix="encoder.layer1.")
    assert sorted(done) == sorted(state)
    for k in state:
        assert other.state_arrays()[k].tobytes() == state[k].tobytes()


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        read_tensor_file(tmp_path / "nope")


# -- embedding archive -------------------------------------------------------------------------


def records(dim=83):
    rng = np.random.default_rng(0)
    return [EmbeddingRecord(f"seq{i}", i % 4, rng.standard_normal((n, dim)).astype(np.float32)) for i, n in enumerate([1, 5, 12])]


def test_embedding_layout():
    blob = encode_embeddings(records()[:1])
    assert blob[:8] == b"SSAREMB1"
    assert struct.unpack("<I", blob[8:12]) == (1,)
    assert struct.unpack("<H", blob[12:14]) == (4,)
    assert blob[14:18] == b"seq0"
    assert struct.unpack("<II", blob[18:26]) == (0, 1)
    assert len(blob) == 26 + 83 * 4 + 4


def test_embedding_round_trip_bitwise(tmp_path):
    recs = records()
    write_embeddings(tmp_path / "e.emb", recs)
    back = read_embeddings(tmp_path / "e.emb", 83)
    for a, b in zip(recs, back):
        assert (a.sequence_id, a.label) == (b.sequence_id, b.label)
        assert a.embeddings.tobytes() == b.embeddings.tobytes()
        assert len(b.embeddings) == len(a.embeddings)
    write_embeddings(tmp_path / "f.emb", back)
    assert (tmp_path / "e.emb").read_bytes() == (tmp_path / "f.emb").read_bytes()


def test_embedding_corruption_and_dim(tmp_path):
    write_embeddings(tmp_path / "e.emb", records())
    blob = bytearray((tmp_path / "e.emb").read_bytes())
    blob[40] ^= 1
    (tmp_path / "c.emb").write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="CRC"):
        read_embeddings(tmp_path / "c.emb", 83)
    with pytest.raises(CheckpointError):
        read_embeddings(tmp_path / "e.emb", 20)
