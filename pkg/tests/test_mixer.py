import numpy as np
import pytest
import torch

from facesnap.errors import ConfigError, ShapeMismatchError
from facesnap.mixer import AttributeMixer, CrossAttention

from naive_ref import central_difference, naive_decode, naive_fuse, relative_close


def make_mixer(**kwargs) -> AttributeMixer:
    defaults = dict(id_dim=16, clip_dim=12, width=8, id_tokens=5, clip_tokens=9,
                    out_tokens=4, heads=1, depth=1, seed=7)
    defaults.update(kwargs)
    return AttributeMixer(**defaults)


class TestProjections:
    def test_default_token_shapes(self):
        mixer = AttributeMixer()
        out = mixer.project_id(torch.randn(1, 512))
        assert out.shape == (1, 20, 64)
        out = mixer.project_clip(torch.randn(1, 257, 64))
        assert out.shape == (1, 257, 64)

    def test_zero_vector_zero_bias_gives_zero_tokens(self):
        mixer = make_mixer()
        with torch.no_grad():
            mixer.proj_id.bias.zero_()
        out = mixer.project_id(torch.zeros(2, 16))
        assert torch.equal(out, torch.zeros(2, 5, 8))

    def test_project_id_matches_hand_matrix_product(self):
        mixer = make_mixer(id_dim=4, width=2, id_tokens=20)
        weight = torch.arange(40.0 * 4).reshape(40, 4) / 100.0
        bias = torch.linspace(-1, 1, 40)
        with torch.no_grad():
            mixer.proj_id.weight.copy_(weight)
            mixer.proj_id.bias.copy_(bias)
        vec = torch.tensor([0.5, -1.0, 2.0, 0.25])
        expected = (weight.double() @ vec.double() + bias.double()).reshape(20, 2)
        out = mixer.project_id(vec.unsqueeze(0))[0]
        assert np.allclose(out.detach().numpy(), expected.numpy(), atol=1e-6)

    def test_project_clip_identity_map(self):
        mixer = make_mixer(clip_dim=8, width=8)
        with torch.no_grad():
            mixer.proj_clip.weight.copy_(torch.eye(8))
            mixer.proj_clip.bias.zero_()
        tokens = torch.randn(1, 9, 8)
        assert torch.allclose(mixer.project_clip(tokens), tokens)

    def test_project_clip_matches_hand_rows(self):
        mixer = make_mixer(clip_dim=3, width=2, clip_tokens=2)
        weight = torch.tensor([[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]])
        bias = torch.tensor([0.1, -0.2])
        with torch.no_grad():
            mixer.proj_clip.weight.copy_(weight)
            mixer.proj_clip.bias.copy_(bias)
        tokens = torch.tensor([[[1.0, 0.0, -1.0], [2.0, 1.0, 0.5]]])
        out = mixer.project_clip(tokens)[0]
        expected = torch.stack([weight @ tokens[0, i] + bias for i in range(2)])
        assert torch.allclose(out, expected, atol=1e-6)

    def test_unbatched_inputs_gain_batch_dim(self):
        mixer = make_mixer()
        assert mixer.project_id(torch.randn(16)).shape == (1, 5, 8)
        assert mixer.project_clip(torch.randn(9, 12)).shape == (1, 9, 8)

    @pytest.mark.parametrize("bad_shape", [(1, 8), (1, 17), (2, 3, 16)])
    def test_project_id_shape_errors(self, bad_shape):
        mixer = make_mixer()
        with pytest.raises(ShapeMismatchError):
            mixer.project_id(torch.randn(*bad_shape))

    def test_project_clip_wrong_token_count(self):
        mixer = make_mixer()
        with pytest.raises(ShapeMismatchError):
            mixer.project_clip(torch.randn(1, 8, 12))


class TestFusion:
    def test_fused_shape_default(self):
        mixer = AttributeMixer()
        out, weights = mixer.fuse(torch.randn(1, 20, 64), torch.randn(1, 257, 64),
                                  return_weights=True)
        assert out.shape == (1, 20, 64)
        assert weights.shape[-1] == 277  # keys/values span both token sets

    def test_single_key_attention_returns_value(self):
        attn = CrossAttention(width=3, heads=1, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            for layer in (attn.to_q, attn.to_k, attn.to_v, attn.to_out):
                layer.weight.copy_(torch.eye(3))
                layer.bias.zero_()
        kv = torch.randn(1, 1, 3)
        out = attn(torch.randn(1, 1, 3), kv)
        assert torch.allclose(out, kv, atol=1e-6)

    def test_fuse_matches_naive_oracle(self):
        mixer = make_mixer(width=2, id_tokens=1, clip_tokens=1, heads=1).double()
        id_proj = torch.randn(1, 1, 2, dtype=torch.float64)
        clip_proj = torch.randn(1, 1, 2, dtype=torch.float64)
        out = mixer.fuse(id_proj, clip_proj)[0].detach().numpy()
        expected = naive_fuse(mixer, id_proj[0].numpy(), clip_proj[0].numpy())
        assert np.allclose(out, expected, atol=1e-9)

    def test_kv_axis_is_id_plus_clip_tokens(self):
        mixer = make_mixer()
        _, weights = mixer.fuse(torch.randn(2, 5, 8), torch.randn(2, 9, 8),
                                return_weights=True)
        assert weights.shape == (2, 1, 5, 14)

    def test_softmax_rows_sum_to_one(self):
        mixer = make_mixer()
        _, weights = mixer.fuse(torch.randn(3, 5, 8), torch.randn(3, 9, 8),
                                return_weights=True)
        sums = weights.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_width_mismatch_raises(self):
        mixer = make_mixer()
        with pytest.raises(ShapeMismatchError):
            mixer.fuse(torch.randn(1, 5, 8), torch.randn(1, 9, 4))

    def test_batch_mismatch_raises(self):
        mixer = make_mixer()
        with pytest.raises(ShapeMismatchError):
            mixer.fuse(torch.randn(1, 5, 8), torch.randn(2, 9, 8))


class TestDecode:
    def test_decode_shape_default(self):
        mixer = AttributeMixer()
        assert mixer.decode(torch.randn(1, 20, 64)).shape == (1, 16, 64)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_key_permutation_invariance(self, seed):
        mixer = make_mixer(depth=2)
        g = torch.Generator().manual_seed(seed)
        fused = torch.randn(1, 5, 8, generator=g)
        perm = torch.randperm(5, generator=g)
        out = mixer.decode(fused)
        out_perm = mixer.decode(fused[:, perm])
        assert torch.allclose(out, out_perm, atol=1e-6)

    def test_decode_matches_naive_oracle(self):
        mixer = make_mixer(width=2, out_tokens=1, depth=1, heads=1).double()
        fused = torch.randn(1, 2, 2, dtype=torch.float64)
        out = mixer.decode(fused)[0].detach().numpy()
        expected = naive_decode(mixer, fused[0].numpy())
        assert np.allclose(out, expected, atol=1e-9)

    def test_decode_width_mismatch(self):
        mixer = make_mixer()
        with pytest.raises(ShapeMismatchError):
            mixer.decode(torch.randn(1, 5, 4))


class TestForward:
    @pytest.mark.parametrize("batch", [1, 3])
    def test_output_shape_contract(self, batch):
        mixer = make_mixer()
        out = mixer(torch.randn(batch, 16), torch.randn(batch, 9, 12))
        assert out.shape == (batch, 4, 8)

    def test_default_config_shape(self):
        mixer = AttributeMixer()
        out = mixer(torch.randn(1, 512), torch.randn(1, 257, 64))
        assert out.shape == (1, 16, 64)

    def test_determinism_bit_identical(self):
        mixer = make_mixer()
        f_id = torch.randn(2, 16)
        f_clip = torch.randn(2, 9, 12)
        assert torch.equal(mixer(f_id, f_clip), mixer(f_id, f_clip))

    def test_same_seed_same_weights(self):
        a, b = make_mixer(seed=3), make_mixer(seed=3)
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        mixer = make_mixer(width=4, id_dim=6, clip_dim=5, id_tokens=3, clip_tokens=4,
                           out_tokens=2, depth=1).double()
        f_id = torch.randn(1, 6, dtype=torch.float64)
        f_clip = torch.randn(1, 4, 5, dtype=torch.float64)

        def loss_fn():
            return mixer(f_id, f_clip).mean()

        loss = loss_fn()
        loss.backward()
        checked = 0
        for name, param in mixer.named_parameters():
            assert param.grad is not None, name
            for index in (0, param.numel() - 1):
                fd = central_difference(loss_fn, param, index, step=1e-4)
                analytic = param.grad.view(-1)[index].item()
                assert relative_close(analytic, fd, rtol=1e-3), (name, index, analytic, fd)
                checked += 1
        assert checked >= 2 * len(list(mixer.parameters()))


class TestConfigGuards:
    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            make_mixer(width=8, heads=3)

    def test_multihead_runs(self):
        mixer = make_mixer(width=8, heads=2)
        out = mixer(torch.randn(1, 16), torch.randn(1, 9, 12))
        assert out.shape == (1, 4, 8)
