import numpy as np
import pytest
import torch

from conftest import dense_attention_oracle, finite_difference_max_rel_error, linear_np
from mcsr.attention import (
    CrossModalityFusion,
    NEG_INF,
    WindowCrossAttention,
    WindowSelfAttention,
    shifted_window_mask,
    window_partition,
    window_reverse,
)

torch.manual_seed(0)


def test_partition_counts_and_row_major_layout():
    x = torch.arange(16.0).reshape(1, 1, 4, 4)
    windows, meta = window_partition(x, 2)
    assert windows.shape == (4, 4, 1)
    # first window holds pixels (0,0) (0,1) (1,0) (1,1) in row-major order
    assert windows[0, :, 0].tolist() == [0.0, 1.0, 4.0, 5.0]
    assert windows[1, :, 0].tolist() == [2.0, 3.0, 6.0, 7.0]
    assert (meta.height, meta.width) == (4, 4)


def test_partition_reverse_identity_bit_exact():
    rng = np.random.default_rng(0)
    for _ in range(20):
        b = int(rng.integers(1, 3))
        c = int(rng.integers(1, 8))
        h = int(rng.integers(1, 20))
        w = int(rng.integers(1, 20))
        window = int(rng.choice([2, 4, 8]))
        x = torch.from_numpy(rng.standard_normal((b, c, h, w)).astype(np.float32))
        windows, meta = window_partition(x, window)
        assert torch.equal(window_reverse(windows, meta), x)


def test_partition_pads_and_records_crop():
    x = torch.randn(1, 3, 5, 5)
    windows, meta = window_partition(x, 4)
    assert (meta.padded_height, meta.padded_width) == (8, 8)
    assert windows.shape == (4, 16, 3)
    assert (meta.height, meta.width) == (5, 5)
    assert torch.equal(window_reverse(windows, meta), x)


def test_self_attention_rows_sum_to_one():
    attn = WindowSelfAttention(dim=8, heads=2)
    tokens = torch.randn(4, 9, 8)
    probs = attn.attention_probs(tokens)
    assert torch.allclose(probs.sum(-1), torch.ones(4, 2, 9), atol=1e-6)
    mask = torch.zeros(2, 9, 9)
    mask[0, 0, 1:] = NEG_INF
    probs = attn.attention_probs(tokens, mask)
    assert torch.allclose(probs.sum(-1), torch.ones(4, 2, 9), atol=1e-6)


def test_single_token_window_reduces_to_projected_value():
    attn = WindowSelfAttention(dim=6, heads=3).double()
    tokens = torch.randn(2, 1, 6, dtype=torch.float64)
    probs = attn.attention_probs(tokens)
    assert torch.allclose(probs, torch.ones_like(probs))
    w = attn.qkv.weight.detach().numpy()
    b = attn.qkv.bias.detach().numpy()
    v = linear_np(tokens.numpy(), w, b)[..., 12:]
    expected = linear_np(v, attn.proj.weight.detach().numpy(), attn.proj.bias.detach().numpy())
    assert np.allclose(attn(tokens).detach().numpy(), expected, atol=1e-12)


def test_self_attention_matches_dense_oracle():
    rng = np.random.default_rng(7)
    for window, heads in [(2, 1), (4, 2), (8, 4)]:
        dim = 8
        attn = WindowSelfAttention(dim, heads).double()
        n = window * window
        tokens = torch.from_numpy(rng.standard_normal((3, n, dim)))
        out = attn(tokens).detach().numpy()

        full = linear_np(tokens.numpy(), attn.qkv.weight.detach().numpy(), attn.qkv.bias.detach().numpy())
        q, k, v = full[..., :dim], full[..., dim : 2 * dim], full[..., 2 * dim :]
        oracle = dense_attention_oracle(q, k, v, heads)
        oracle = linear_np(oracle, attn.proj.weight.detach().numpy(), attn.proj.bias.detach().numpy())
        assert np.abs(out - oracle).max() < 1e-5


def test_cross_attention_matches_dense_oracle():
    rng = np.random.default_rng(8)
    attn = WindowCrossAttention(dim=8, kv_dim=6, heads=2).double()
    q_tokens = torch.from_numpy(rng.standard_normal((2, 16, 8)))
    kv_tokens = torch.from_numpy(rng.standard_normal((2, 16, 6)))
    out = attn(q_tokens, kv_tokens).detach().numpy()

    q = linear_np(q_tokens.numpy(), attn.q.weight.detach().numpy(), attn.q.bias.detach().numpy())
    k = linear_np(kv_tokens.numpy(), attn.k.weight.detach().numpy(), attn.k.bias.detach().numpy())
    v = linear_np(kv_tokens.numpy(), attn.v.weight.detach().numpy(), attn.v.bias.detach().numpy())
    oracle = dense_attention_oracle(q, k, v, heads=2)
    oracle = linear_np(oracle, attn.proj.weight.detach().numpy(), attn.proj.bias.detach().numpy())
    assert np.abs(out - oracle).max() < 1e-5


def test_cross_attention_constant_values_ignore_queries():
    attn = WindowCrossAttention(dim=8, kv_dim=4, heads=2)
    kv = torch.ones(3, 16, 4) * 0.7
    out_a = attn(torch.randn(3, 16, 8), kv)
    out_b = attn(torch.randn(3, 16, 8), kv)
    assert torch.allclose(out_a, out_b, atol=1e-5)
    assert torch.allclose(out_a, out_a.mean(dim=1, keepdim=True), atol=1e-5)


def test_cross_attention_rows_sum_to_one():
    attn = WindowCrossAttention(dim=8, kv_dim=5, heads=4)
    probs = attn.attention_probs(torch.randn(2, 9, 8), torch.randn(2, 9, 5))
    assert torch.allclose(probs.sum(-1), torch.ones(2, 4, 9), atol=1e-6)


def test_cross_attention_grid_mismatch_rejected():
    attn = WindowCrossAttention(dim=8, kv_dim=5, heads=2)
    with pytest.raises(ValueError, match="grid"):
        attn(torch.randn(2, 9, 8), torch.randn(2, 16, 5))


def test_cross_attention_output_is_convex_combination_of_values():
    attn = WindowCrossAttention(dim=8, kv_dim=8, heads=2).double()
    with torch.no_grad():
        attn.proj.weight.copy_(torch.eye(8, dtype=torch.float64))
        attn.proj.bias.zero_()
    q_tokens = torch.randn(3, 16, 8, dtype=torch.float64)
    kv_tokens = torch.randn(3, 16, 8, dtype=torch.float64)
    out = attn(q_tokens, kv_tokens).detach().numpy()
    v = linear_np(kv_tokens.numpy(), attn.v.weight.detach().numpy(), attn.v.bias.detach().numpy())
    eps = 1e-9
    assert (out <= v.max(axis=1, keepdims=True) + eps).all()
    assert (out >= v.min(axis=1, keepdims=True) - eps).all()


def test_heads_must_divide_dim():
    with pytest.raises(ValueError, match="heads"):
        WindowSelfAttention(dim=6, heads=4)
    with pytest.raises(ValueError, match="heads"):
        WindowCrossAttention(dim=6, kv_dim=4, heads=4)


def _wrapped_status_oracle(h, w, window, shift):
    """Allowed-pair matrices recomputed from first principles: two tokens of
    a shifted window may attend iff, per axis, both sit on the same side of
    the cyclic wrap seam (coordinate >= dim - shift on the rolled canvas)."""
    n = window * window
    masks = []
    for wy in range(h // window):
        for wx in range(w // window):
            wrapped = []
            for iy in range(window):
                for ix in range(window):
                    y, x = wy * window + iy, wx * window + ix
                    wrapped.append((y >= h - shift, x >= w - shift))
            allowed = np.zeros((n, n), dtype=bool)
            for i in range(n):
                for j in range(n):
                    allowed[i, j] = wrapped[i] == wrapped[j]
            masks.append(allowed)
    return np.stack(masks)


def test_shifted_mask_agrees_with_geometric_oracle():
    h = w = 16
    window, shift = 8, 4
    mask = shifted_window_mask(h, w, window, shift).numpy()
    allowed = _wrapped_status_oracle(h, w, window, shift)
    assert ((mask == 0.0) == allowed).all()
    assert ((mask == NEG_INF) == ~allowed).all()


def test_masked_pairs_get_no_attention_mass():
    h = w = 16
    window, shift = 8, 4
    torch.manual_seed(3)
    attn = WindowSelfAttention(dim=8, heads=2)
    x = torch.randn(1, 8, h, w)
    rolled = torch.roll(x, shifts=(-shift, -shift), dims=(2, 3))
    tokens, _ = window_partition(rolled, window)
    mask = shifted_window_mask(h, w, window, shift)
    probs = attn.attention_probs(tokens, mask).detach().numpy()
    allowed = _wrapped_status_oracle(h, w, window, shift)
    assert (~allowed).any()
    for widx in range(probs.shape[0]):
        if (~allowed[widx]).any():
            forbidden = probs[widx][:, ~allowed[widx]]
            assert forbidden.max() <= 1e-7


def test_window_locality_is_bitwise():
    torch.manual_seed(4)
    attn = WindowSelfAttention(dim=8, heads=2)
    x = torch.randn(1, 8, 8, 8)
    perturbed = x.clone()
    perturbed[:, :, 7, 7] += 1.0

    def run(inp):
        tokens, meta = window_partition(inp, 4)
        return window_reverse(attn(tokens), meta)

    with torch.no_grad():
        a, b = run(x), run(perturbed)
    assert torch.equal(a[:, :, :4, :4], b[:, :, :4, :4])
    assert not torch.equal(a[:, :, 4:, 4:], b[:, :, 4:, 4:])


def test_fusion_identity_with_zero_output_projections():
    fusion = CrossModalityFusion(dim=8, kv_dim=4, window=4, heads=2, mlp_ratio=2.0)
    with torch.no_grad():
        fusion.self_attn.proj.weight.zero_()
        fusion.self_attn.proj.bias.zero_()
        fusion.cross_attn.proj.weight.zero_()
        fusion.cross_attn.proj.bias.zero_()
        fusion.mlp.fc2.weight.zero_()
        fusion.mlp.fc2.bias.zero_()
    feat = torch.randn(2, 8, 8, 8)
    guidance = torch.randn(2, 4, 8, 8)
    with torch.no_grad():
        out = fusion(feat, guidance)
    assert torch.equal(out, feat)


def test_fusion_preserves_shape_with_padding():
    fusion = CrossModalityFusion(dim=8, kv_dim=4, window=4, heads=2, mlp_ratio=2.0)
    feat = torch.randn(1, 8, 10, 7)
    guidance = torch.randn(1, 4, 10, 7)
    assert fusion(feat, guidance).shape == feat.shape


def test_fusion_rejects_grid_mismatch():
    fusion = CrossModalityFusion(dim=8, kv_dim=4, window=4, heads=2, mlp_ratio=2.0)
    with pytest.raises(ValueError, match="grid"):
        fusion(torch.randn(1, 8, 8, 8), torch.randn(1, 4, 16, 16))


def test_fusion_gradients_match_finite_differences():
    torch.manual_seed(5)
    fusion = CrossModalityFusion(dim=4, kv_dim=4, window=4, heads=2, mlp_ratio=2.0).double()
    feat = torch.randn(1, 4, 8, 8, dtype=torch.float64, requires_grad=True)
    guidance = torch.randn(1, 4, 8, 8, dtype=torch.float64, requires_grad=True)
    weights = torch.randn(1, 4, 8, 8, dtype=torch.float64)

    def scalar():
        return (fusion(feat, guidance) * weights).sum()

    tensors = [feat, guidance] + list(fusion.parameters())
    err = finite_difference_max_rel_error(scalar, tensors, n_samples=250, h=1e-6)
    assert err < 1e-3, f"max relative error {err:.2e}"
