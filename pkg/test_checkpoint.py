"""Tests for checkpoint files and run manifests."""

import hashlib
import json
import struct

import numpy as np
import pytest

from src.checkpoint import FORMAT_VERSION, MAGIC, RunManifest, content_hash, load_checkpoint, save_checkpoint
from src.convnova_model import ModelConfig, init_params
from src.errors import CheckpointError
from src.tensor_engine import precision


def saved(tmp_path, variant="dual_branch"):
    config = ModelConfig(hidden_dim=6, n_gcb=2, kernel_size=3, variant=variant)
    params = init_params(config, seed=4)
    path = tmp_path / "model.cnvn"
    save_checkpoint(params, config, path)
    return params, config, path


@pytest.mark.parametrize("variant", ["dual_branch", "single_gate", "unet_downsample"])
def test_roundtrip_is_bit_exact(tmp_path, variant):
    params, config, path = saved(tmp_path, variant)
    loaded, loaded_config = load_checkpoint(path)
    assert loaded_config == config
    assert list(loaded.named_tensors()) == list(params.named_tensors())
    for name, tensor in params.named_tensors().items():
        restored = loaded.names[name].data
        assert restored.dtype == tensor.data.dtype
        assert restored.tobytes() == tensor.data.tobytes()


def test_roundtrip_float64(tmp_path):
    config = ModelConfig(hidden_dim=4, n_gcb=1, kernel_size=3)
    with precision("float64"):
        params = init_params(config, seed=0)
    save_checkpoint(params, config, tmp_path / "f64.cnvn")
    loaded, _ = load_checkpoint(tmp_path / "f64.cnvn")
    assert loaded.names["stem.w"].data.dtype == np.float64
    assert np.array_equal(loaded.names["stem.w"].data, params.names["stem.w"].data)


def test_file_layout(tmp_path):
    _, _, path = saved(tmp_path)
    data = path.read_bytes()
    magic, version, header_length = struct.unpack_from("<4sII", data)
    assert magic == MAGIC and version == FORMAT_VERSION
    header = json.loads(data[12:12 + header_length])
    assert header["config"]["hidden_dim"] == 6
    entries = header["tensors"]
    assert entries[0]["offset"] == 0
    for previous, entry in zip(entries, entries[1:]):
        assert entry["offset"] == previous["offset"] + previous["length"]
    assert len(data) - 12 - header_length == header["payload_length"]
    assert not (tmp_path / "model.cnvn.tmp").exists()


def test_saving_twice_gives_identical_bytes(tmp_path):
    params, config, path = saved(tmp_path)
    other = tmp_path / "again.cnvn"
    save_checkpoint(params, config, other)
    assert path.read_bytes() == other.read_bytes()


def test_truncated_payload_is_rejected(tmp_path):
    _, _, path = saved(tmp_path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(CheckpointError, match="payload length mismatch"):
        load_checkpoint(path)


def test_truncated_header_is_rejected(tmp_path):
    _, _, path = saved(tmp_path)
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(CheckpointError, match="truncated header"):
        load_checkpoint(path)


def test_foreign_magic_is_rejected(tmp_path):
    path = tmp_path / "image.png"
    path.write_bytes(b"\x89PNG\r\n\x1a\n" + bytes(64))
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)


def test_unsupported_version_is_rejected(tmp_path):
    _, _, path = saved(tmp_path)
    data = bytearray(path.read_bytes())
    struct.pack_into("<I", data, 4, FORMAT_VERSION + 1)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="unsupported version"):
        load_checkpoint(path)


def test_missing_checkpoint_raises_file_not_found(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent.cnvn")


def test_content_hash_matches_git_blob_hash(tmp_path):
    path = tmp_path / "hello.txt"
    path.write_bytes(b"hello\n")
    assert content_hash(path) == "ce013625030ba8dba906f756967f9e9ca394464a"
    assert content_hash(path) == hashlib.sha1(b"blob 6\0hello\n").hexdigest()


def test_run_manifest_roundtrip_and_change_detection(tmp_path):
    data = tmp_path / "data.tsv"
    data.write_text("ACGT\t1\n")
    manifest = RunManifest(command="eval", argv=["eval", "--data", str(data)], config={"seed": 0}, seed=0)
    manifest.add_input(data)
    manifest.finish()
    path = tmp_path / "run.manifest.json"
    manifest.save(path)

    loaded = RunManifest.load(path)
    assert loaded == manifest
    assert loaded.changed_inputs() == []
    data.write_text("ACGT\t0\n")
    assert loaded.changed_inputs() == [str(data)]


def test_invalid_run_manifest_is_rejected(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{\"command\": \"eval\"}")
    with pytest.raises(CheckpointError):
        RunManifest.load(path)
