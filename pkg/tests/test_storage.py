"""On-disk dataset records, manifests, and parameter checkpoints."""

import numpy as np
import pytest
import torch

from lamworld import checkpoints, datafmt, worldgen
from lamworld.datafmt import PairLabel
from lamworld.errors import MissingArtifact
from lamworld.worldgen import Embodiment


def _clips(n=3, embodiment=Embodiment.ARM_A):
    return [worldgen.generate_episode(i, embodiment, 6) for i in range(n)]


def test_record_roundtrip(tmp_path):
    clips = _clips()
    datafmt.save_dataset(tmp_path / "d", clips)
    loaded, labels = datafmt.load_dataset(tmp_path / "d")
    assert labels == {}
    assert len(loaded) == len(clips)
    for a, b in zip(clips, loaded):
        assert np.array_equal(a.frames, b.frames)
        assert a.clip_id == b.clip_id
        assert a.instruction == b.instruction
        assert a.instruction_text == b.instruction_text
        assert a.gt_actions == b.gt_actions
        assert a.embodiment == b.embodiment


def test_labeled_roundtrip(tmp_path):
    clips = _clips(2)
    labels = {
        clips[0].clip_id: [PairLabel(0, 3, (1, 2, 3, 4)), PairLabel(1, 3, (0, 0, 0, 0))],
        clips[1].clip_id: [PairLabel(2, 3, (5, 6, 7, 8))],
    }
    datafmt.save_dataset(tmp_path / "d", clips, labels=labels, num_tokens=4)
    _, loaded = datafmt.load_dataset(tmp_path / "d")
    assert loaded == labels


def test_dataset_bytes_stable(tmp_path):
    clips = _clips()
    datafmt.save_dataset(tmp_path / "a", clips)
    datafmt.save_dataset(tmp_path / "b", clips)
    for name in ("manifest.txt", "clip_000000.bin", "clip_000002.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_missing_dataset_names_producing_stage(tmp_path):
    with pytest.raises(MissingArtifact) as err:
        datafmt.load_dataset(tmp_path / "nope", "gen-data")
    assert "gen-data" in str(err.value)


def test_frames_are_little_endian_float32(tmp_path):
    clips = _clips(1)
    raw = datafmt.encode_record(clips[0])
    id_len = 4 + len(clips[0].clip_id.encode())
    t = np.frombuffer(raw, dtype="<u4", count=1, offset=id_len)[0]
    assert t == clips[0].length
    frames = np.frombuffer(raw, dtype="<f4", count=6 * 32 * 32 * 3, offset=id_len + 4)
    assert np.array_equal(frames.reshape(clips[0].frames.shape), clips[0].frames)


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    tensors = {
        "weight": torch.randn(4, 3),
        "count": torch.arange(5, dtype=torch.int64),
    }
    checkpoints.save_tensors(tmp_path / "ckpt", tensors)
    loaded = checkpoints.load_tensors(tmp_path / "ckpt")
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert torch.equal(loaded[k], tensors[k])
        assert loaded[k].dtype == tensors[k].dtype


def test_checkpoint_bytes_stable(tmp_path):
    torch.manual_seed(1)
    lin = torch.nn.Linear(3, 2)
    checkpoints.save_module(tmp_path / "a", lin)
    checkpoints.save_module(tmp_path / "b", lin)
    assert (tmp_path / "a" / "params.bin").read_bytes() == (tmp_path / "b" / "params.bin").read_bytes()
    assert (tmp_path / "a" / "manifest.txt").read_text() == (tmp_path / "b" / "manifest.txt").read_text()


def test_checkpoint_module_roundtrip(tmp_path):
    torch.manual_seed(2)
    src = torch.nn.Linear(4, 4)
    checkpoints.save_module(tmp_path / "m", src)
    dst = torch.nn.Linear(4, 4)
    checkpoints.load_module(tmp_path / "m", dst)
    assert torch.equal(src.weight, dst.weight)
    assert torch.equal(src.bias, dst.bias)
    assert checkpoints.module_digest(src) == checkpoints.module_digest(dst)


def test_missing_checkpoint_names_stage(tmp_path):
    with pytest.raises(MissingArtifact) as err:
        checkpoints.load_tensors(tmp_path / "none", "train-lam")
    assert "train-lam" in str(err.value)
