import json

import numpy as np
import pytest
import torch

from facesnap.errors import DatasetError
from facesnap.pipeline.data import (
    caption_to_context,
    identity_texture,
    load_dataset,
    stable_seed,
    synthesize_dataset,
    synthesize_eval_set,
)
from facesnap.pipeline.imaging import (
    image_to_latent,
    latent_preview,
    load_png,
    read_latent,
    save_png,
    write_latent,
)

from conftest import tiny_config


class TestLatentFiles:
    def test_roundtrip(self, tmp_path):
        latent = torch.randn(2, 4, 16, 16)
        path = tmp_path / "z.lat"
        write_latent(latent, path)
        assert torch.equal(read_latent(path), latent)

    def test_header_is_eight_uint32(self, tmp_path):
        path = tmp_path / "z.lat"
        write_latent(torch.zeros(1, 2, 8, 8), path)
        header = np.frombuffer(path.read_bytes()[:32], dtype="<u4")
        assert list(header) == [0x46534C54, 1, 1, 2, 8, 8, 1, 0]

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "z.lat"
        write_latent(torch.zeros(1, 2, 8, 8), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-7])
        with pytest.raises(DatasetError):
            read_latent(path)

    def test_wrong_magic_detected(self, tmp_path):
        path = tmp_path / "z.lat"
        write_latent(torch.zeros(1, 2, 8, 8), path)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(DatasetError):
            read_latent(path)


class TestImages:
    def test_png_roundtrip_quantized(self, tmp_path):
        image = torch.rand(3, 32, 32)
        path = tmp_path / "img.png"
        save_png(image, path)
        loaded = load_png(path)
        assert loaded.shape == (3, 32, 32)
        assert float((loaded - image).abs().max()) <= 1.0 / 255.0

    def test_image_to_latent_shapes(self):
        latent = image_to_latent(torch.rand(3, 64, 64), 4, 16)
        assert latent.shape == (4, 16, 16)
        assert torch.equal(latent[3], torch.zeros(16, 16))

    def test_latent_preview_range(self):
        preview = latent_preview(torch.randn(4, 16, 16))
        assert preview.shape == (3, 16, 16)
        assert float(preview.min()) >= 0.0 and float(preview.max()) <= 1.0


class TestContext:
    def test_caption_context_deterministic_and_caption_sensitive(self):
        a = caption_to_context("a portrait", 8, seed=0)
        b = caption_to_context("a portrait", 8, seed=0)
        c = caption_to_context("another portrait", 8, seed=0)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)
        assert a.shape == (1, 8)

    def test_stable_seed_is_stable(self):
        assert stable_seed("x", 1) == stable_seed("x", 1)
        assert stable_seed("x", 1) != stable_seed("x", 2)

    def test_identity_texture_tracks_shape_vector(self):
        a = identity_texture(np.array([1.0, -0.5]), 8, seed=0)
        b = identity_texture(np.array([1.0, -0.5]), 8, seed=0)
        c = identity_texture(np.array([-1.0, 0.5]), 8, seed=0)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert np.all(np.abs(a) <= 1.0)


class TestSyntheticDataset:
    def test_generate_and_load(self, tmp_path):
        config = tiny_config()
        ids = synthesize_dataset(tmp_path, 4, config, seed=1)
        assert len(ids) == 4
        samples = load_dataset(tmp_path, config)
        assert [s.item_id for s in samples] == ids
        for s in samples:
            assert s.latent.shape == (2, 8, 8)
            assert s.ctx.shape == (1, 8)
            assert s.mask.shape == (1, 8, 8)
            assert 0.0 <= min(s.bbox) and max(s.bbox) <= 1.0
            assert s.drive_params is not None

    def test_empty_manifest_gives_empty_sequence(self, tmp_path):
        (tmp_path / "manifest.json").write_text(
            json.dumps({"format_version": 1, "items": []}))
        assert load_dataset(tmp_path, tiny_config()) == []

    def test_same_seed_same_dataset(self, tmp_path):
        config = tiny_config()
        synthesize_dataset(tmp_path / "a", 3, config, seed=7)
        synthesize_dataset(tmp_path / "b", 3, config, seed=7)
        sa = load_dataset(tmp_path / "a", config)
        sb = load_dataset(tmp_path / "b", config)
        assert [s.item_id for s in sa] == [s.item_id for s in sb]
        for x, y in zip(sa, sb):
            assert torch.equal(x.latent, y.latent)
            assert x.caption == y.caption

    def test_missing_item_named_in_error(self, tmp_path):
        config = tiny_config()
        synthesize_dataset(tmp_path, 2, config, seed=0)
        (tmp_path / "item0001.lat").unlink()
        with pytest.raises(DatasetError, match="item0001"):
            load_dataset(tmp_path, config)

    def test_shape_mismatch_named_in_error(self, tmp_path):
        config = tiny_config()
        synthesize_dataset(tmp_path, 1, config, seed=0)
        other = tiny_config(latent_size=16, image_size=64)
        with pytest.raises(DatasetError, match="item0000"):
            load_dataset(tmp_path, other)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path, tiny_config())

    def test_eval_set_layout(self, tmp_path):
        config = tiny_config()
        synthesize_eval_set(tmp_path, 2, 3, config, seed=0)
        assert len(list((tmp_path / "ids").glob("*.png"))) == 2
        assert len(list((tmp_path / "ids").glob("*.json"))) == 2
        assert len(list((tmp_path / "poses").glob("*.json"))) == 3
        img = load_png(sorted((tmp_path / "ids").glob("*.png"))[0])
        assert img.shape == (3, 32, 32)
