import struct

import pytest
import torch

from facesnap.errors import CheckpointVersionError, CorruptCheckpointError
from facesnap.pipeline.checkpoint import MAGIC, load_container, save_container
from facesnap.pipeline.data import load_dataset, synthesize_dataset
from facesnap.pipeline.training import (
    init_state,
    prepare_samples,
    restore_train_state,
    run_training,
    save_train_state,
    trainable_named_parameters,
)

from conftest import tiny_config


class TestContainer:
    def test_roundtrip_all_dtypes(self, tmp_path):
        tensors = {
            "a/weight": torch.randn(3, 4),
            "b/long": torch.arange(5),
            "c/bytes": torch.randint(0, 255, (16,), dtype=torch.uint8),
            "d/flag": torch.tensor([True, False]),
            "e/scalar": torch.tensor(2.5, dtype=torch.float64),
        }
        path = tmp_path / "c.bin"
        save_container(path, {"step": 3, "note": "x"}, tensors)
        meta, loaded = load_container(path)
        assert meta["step"] == 3 and meta["note"] == "x"
        assert set(loaded) == set(tensors)
        for name in tensors:
            assert torch.equal(loaded[name], tensors[name]), name
            assert loaded[name].dtype == tensors[name].dtype

    def test_save_load_save_is_byte_identical(self, tmp_path):
        tensors = {"w": torch.randn(8, 8), "s": torch.tensor(1.0)}
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_container(p1, {"step": 1}, tensors)
        meta, loaded = load_container(p1)
        meta.pop("format_version")
        meta.pop("tensors")
        save_container(p2, meta, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "c.bin"
        save_container(path, {}, {"w": torch.randn(4, 4)})
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(CorruptCheckpointError):
            load_container(path)

    def test_truncated_header_rejected(self, tmp_path):
        path = tmp_path / "c.bin"
        save_container(path, {}, {"w": torch.randn(4, 4)})
        path.write_bytes(path.read_bytes()[: len(MAGIC) + 6])
        with pytest.raises(CorruptCheckpointError):
            load_container(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "c.bin"
        save_container(path, {}, {"w": torch.randn(2)})
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptCheckpointError):
            load_container(path)

    def test_version_mismatch_is_a_distinct_error(self, tmp_path):
        path = tmp_path / "c.bin"
        save_container(path, {}, {"w": torch.randn(2)})
        blob = bytearray(path.read_bytes())
        blob[len(MAGIC):len(MAGIC) + 4] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointVersionError):
            load_container(path)


@pytest.fixture
def trained_state(tmp_path):
    config = tiny_config(lr=1e-3, steps=4)
    synthesize_dataset(tmp_path / "data", 3, config, seed=0)
    samples = load_dataset(tmp_path / "data", config)
    state = init_state(config)
    prep = prepare_samples(state, samples)
    run_training(state, prep, 4)
    return config, state, samples


class TestTrainStateCheckpoint:
    def test_full_restore_is_bitwise(self, trained_state, tmp_path):
        _, state, _ = trained_state
        path = tmp_path / "t.ckpt"
        save_train_state(state, path)
        restored = restore_train_state(path)
        assert restored.step == state.step
        for (na, pa), (nb, pb) in zip(trainable_named_parameters(state),
                                      trainable_named_parameters(restored)):
            assert na == nb
            assert torch.equal(pa, pb), na
        for name, tensor in state.unet.state_dict().items():
            assert torch.equal(tensor, restored.unet.state_dict()[name]), name
        assert torch.equal(state.generator.get_state(), restored.generator.get_state())
        for (_, pa), (_, pb) in zip(trainable_named_parameters(state),
                                    trainable_named_parameters(restored)):
            sa, sb = state.optimizer.state.get(pa), restored.optimizer.state.get(pb)
            assert (sa is None) == (sb is None)
            if sa:
                assert torch.equal(torch.as_tensor(sa["step"]), torch.as_tensor(sb["step"]))
                assert torch.equal(sa["exp_avg"], sb["exp_avg"])
                assert torch.equal(sa["exp_avg_sq"], sb["exp_avg_sq"])

    def test_save_load_save_checkpoint_bytes(self, trained_state, tmp_path):
        _, state, _ = trained_state
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_train_state(state, p1)
        restored = restore_train_state(p1)
        save_train_state(restored, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_matches_uninterrupted(self, trained_state, tmp_path):
        config, state, samples = trained_state
        path = tmp_path / "mid.ckpt"
        save_train_state(state, path)

        prep = prepare_samples(state, samples)
        straight = [b.l_total for b in run_training(state, prep, 6)]

        resumed_state = restore_train_state(path)
        prep2 = prepare_samples(resumed_state, samples)
        resumed = [b.l_total for b in run_training(resumed_state, prep2, 6)]
        assert straight == resumed

    def test_tampered_config_hash_detected(self, trained_state, tmp_path):
        _, state, _ = trained_state
        path = tmp_path / "t.ckpt"
        save_train_state(state, path)
        blob = path.read_bytes()
        # flip one digit of lambda_id inside the embedded config text
        tampered = blob.replace(b"lambda_id = 0.5", b"lambda_id = 0.9", 1)
        assert tampered != blob
        path.write_bytes(tampered)
        with pytest.raises(CorruptCheckpointError):
            restore_train_state(path)

    def test_truncated_checkpoint_applies_nothing(self, trained_state, tmp_path):
        _, state, _ = trained_state
        path = tmp_path / "t.ckpt"
        save_train_state(state, path)
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(CorruptCheckpointError):
            restore_train_state(path)

    def test_foreign_container_rejected(self, tmp_path):
        path = tmp_path / "other.bin"
        save_container(path, {"kind": "something-else"}, {"w": torch.randn(2)})
        with pytest.raises(CorruptCheckpointError, match="not a training checkpoint"):
            restore_train_state(path)

    def test_missing_checkpoint_is_a_load_error(self, tmp_path):
        with pytest.raises(CorruptCheckpointError):
            restore_train_state(tmp_path / "absent.ckpt")
