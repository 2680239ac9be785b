import numpy as np
import pytest
import torch

from glmae.errors import NumericFailure, ShapeMismatchError
from glmae.patcher import full_view, mask_patches, patchify
from glmae.views import View, CropGeometry
from glmae.vit3d import (
    Decoder3D,
    Encoder3D,
    EncoderConfig,
    ProjectionConfig,
    ProjectionHead,
    Student,
    decode,
    encode,
    encode_full,
    interp_pos_embed,
    project,
)

torch.set_default_dtype(torch.float32)


def tiny_cfg(**kw):
    base = dict(embed_dim=16, depth=2, num_heads=2, patch_size=(4, 4, 4), base_grid_dims=(2, 2, 2))
    base.update(kw)
    return EncoderConfig(**base)


def view_of(arr):
    shape = arr.shape
    return View(arr.astype(np.float32), CropGeometry((0, 0, 0), shape, shape), "local", shape)


def test_presets():
    t, b, d = EncoderConfig.vit_tiny(), EncoderConfig.vit_base(), EncoderConfig.desk()
    assert (t.embed_dim, t.depth, t.num_heads) == (192, 12, 3)
    assert (b.embed_dim, b.depth, b.num_heads) == (768, 12, 12)
    assert (d.embed_dim, d.depth, d.num_heads, d.patch_size) == (64, 4, 4, (8, 8, 8))
    assert b.decoder_dim == 384 and b.decoder_depth == 2
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=10, num_heads=3)


def test_interp_identity_and_constant():
    table = torch.randn(8, 5)
    assert torch.allclose(interp_pos_embed(table, (2, 2, 2), (2, 2, 2)), table, atol=1e-6)
    const = torch.full((8, 3), 0.7)
    assert torch.allclose(interp_pos_embed(const, (2, 2, 2), (5, 3, 4)), torch.full((60, 3), 0.7), atol=1e-6)
    with pytest.raises(ValueError):
        interp_pos_embed(table, (2, 2, 2), (0, 2, 2))


def test_interp_midpoint():
    e0, e1 = torch.tensor([1.0, -2.0]), torch.tensor([3.0, 4.0])
    out = interp_pos_embed(torch.stack([e0, e1]), (2, 1, 1), (3, 1, 1))
    assert torch.allclose(out[1], (e0 + e1) / 2, atol=1e-6)


def test_interp_follows_patch_order():
    # channel = h-coordinate of each base cell; upsampled values must be monotone along h only
    base = torch.tensor([[float(h)] for h in range(2) for _ in range(2) for _ in range(2)])
    out = interp_pos_embed(base, (2, 2, 2), (4, 4, 4)).reshape(4, 4, 4)
    assert torch.all(out[1:] >= out[:-1]) and torch.allclose(out[:, 0, 0], out[:, 3, 3])


def test_encode_shapes_and_full_equivalence():
    torch.manual_seed(0)
    enc = Encoder3D(tiny_cfg())
    v = view_of(np.random.default_rng(0).random((8, 8, 8)))
    grid = patchify(v, 4)
    mv = mask_patches(grid, 0.5, np.random.default_rng(0))
    te = encode(enc, mv)
    assert te.cls.shape == (16,) and te.patch_tokens.shape == (4, 16)
    full = encode_full(enc, v)
    ref = encode(enc, full_view(grid))
    assert torch.equal(full.cls, ref.cls) and torch.equal(full.patch_tokens, ref.patch_tokens)


def test_interpolated_positions_for_bigger_grid():
    torch.manual_seed(0)
    enc = Encoder3D(tiny_cfg())
    te = encode_full(enc, view_of(np.random.default_rng(1).random((16, 16, 16))))
    assert te.patch_tokens.shape == (64, 16)


def test_permutation_equivariance():
    torch.manual_seed(1)
    enc = Encoder3D(tiny_cfg()).double()
    mv = mask_patches(patchify(view_of(np.random.default_rng(2).random((8, 8, 8))), 4), 0.25, np.random.default_rng(1))
    order = np.random.default_rng(3).permutation(mv.visible_index)
    a, b = encode(enc, mv), encode(enc, mv, order=order)
    pos = {p: i for i, p in enumerate(mv.visible_index)}
    assert torch.allclose(a.cls, b.cls, atol=1e-5)
    assert torch.allclose(a.patch_tokens[[pos[p] for p in order]], b.patch_tokens, atol=1e-5)


def test_masked_patch_contents_are_ignored():
    torch.manual_seed(2)
    enc = Encoder3D(tiny_cfg())
    grid = patchify(view_of(np.random.default_rng(4).random((8, 8, 8))), 4)
    mv = mask_patches(grid, 0.5, np.random.default_rng(5))
    before = encode(enc, mv)
    grid.patches[torch.as_tensor(mv.masked_index)] = 1e3
    after = encode(enc, mv)
    assert torch.equal(before.cls, after.cls) and torch.equal(before.patch_tokens, after.patch_tokens)


def test_batch_of_identical_views_is_identical():
    torch.manual_seed(3)
    enc = Encoder3D(tiny_cfg())
    x = torch.rand(1, 8, 64).expand(2, -1, -1)
    cls, tok = enc(x, torch.arange(8).expand(2, -1), (2, 2, 2))
    assert torch.equal(cls[0], cls[1]) and torch.equal(tok[0], tok[1])


def test_zero_weights_give_finite_output():
    enc = Encoder3D(tiny_cfg())
    with torch.no_grad():
        for p in enc.parameters():
            p.zero_()
    cls, tok = enc(torch.rand(1, 8, 64), torch.arange(8)[None], (2, 2, 2))
    assert torch.isfinite(cls).all() and torch.isfinite(tok).all()


def test_nonfinite_activation_names_block():
    enc = Encoder3D(tiny_cfg())
    with torch.no_grad():
        enc.blocks[1].mlp[2].bias.fill_(float("inf"))
    with pytest.raises(NumericFailure) as e:
        enc(torch.rand(1, 8, 64), torch.arange(8)[None], (2, 2, 2))
    assert e.value.where == 1


def test_decode_contracts():
    torch.manual_seed(4)
    cfg = tiny_cfg()
    dec = Decoder3D(cfg)
    mask = np.array([True, False, True, False, False, True, False, False])
    out = decode(dec, torch.randn(5, 16), mask, (2, 2, 2))
    assert out.shape == (8, 64)
    # two masked rows share the mask token but differ by position
    assert not torch.allclose(out[0], out[2], atol=1e-8)
    assert decode(dec, torch.randn(8, 16), np.zeros(8, bool), (2, 2, 2)).shape == (8, 64)
    with pytest.raises(ShapeMismatchError):
        decode(dec, torch.randn(4, 16), mask, (2, 2, 2))


def test_projection_head():
    head = ProjectionHead(64)
    assert project(head, torch.randn(64)).shape == (512,)
    linears = [m for m in head.mlp if isinstance(m, torch.nn.Linear)]
    assert [m.out_features for m in linears] == [2048, 2048, 512]
    assert sum(isinstance(m, torch.nn.GELU) for m in head.mlp) == 2
    assert not any(isinstance(m, torch.nn.LayerNorm) for m in head.modules())
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    assert not project(head, torch.randn(64)).any()


def test_projection_gradient_finite_differences():
    torch.manual_seed(5)
    head = ProjectionHead(6, ProjectionConfig(hidden_dim=7, out_dim=5)).double()
    x = torch.randn(6, dtype=torch.float64)
    w = torch.randn(5, dtype=torch.float64)

    def f():
        return (torch.tanh(project(head, x)) * w).sum()

    f().backward()
    rng = np.random.default_rng(0)
    h = 1e-3
    for p in head.parameters():
        flat = p.data.view(-1)
        for j in rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False):
            old = flat[j].item()
            with torch.no_grad():
                flat[j] = old + h
                up = f().item()
                flat[j] = old - h
                down = f().item()
                flat[j] = old
            fd = (up - down) / (2 * h)
            g = p.grad.view(-1)[j].item()
            assert abs(fd - g) <= 1e-4 * max(abs(fd), abs(g), 1e-3)


def test_encode_decode_gradient_finite_differences():
    torch.manual_seed(6)
    cfg = EncoderConfig(embed_dim=8, depth=1, num_heads=2, patch_size=(2, 1, 1), base_grid_dims=(2, 1, 1))
    model = Student(cfg, ProjectionConfig(hidden_dim=8, out_dim=4)).double()
    x = torch.rand(1, 2, 2, dtype=torch.float64)
    idx = torch.tensor([[0]])

    def f():
        _, tok = model.encoder(x, idx, (2, 1, 1))
        rec = model.decoder(tok, idx, (2, 1, 1))
        return ((rec - x) ** 2).mean()

    f().backward()
    named = [(n, p) for n, p in model.named_parameters() if p.grad is not None and not n.startswith("projector")]
    rng = np.random.default_rng(1)
    picks = [(n, p, int(rng.integers(p.numel()))) for n, p in named for _ in range(3)][:50]
    assert len(picks) >= 50
    h = 1e-3
    pairs = []
    for n, p, j in picks:
        flat = p.data.view(-1)
        old = flat[j].item()
        with torch.no_grad():
            flat[j] = old + h
            up = f().item()
            flat[j] = old - h
            down = f().item()
            flat[j] = old
        pairs.append((n, (up - down) / (2 * h), p.grad.view(-1)[j].item()))
    # relative to the gradient scale of the sampled set (central differences carry O(h^2) error)
    scale = max(abs(g) for _, _, g in pairs)
    for n, fd, g in pairs:
        assert abs(fd - g) <= 1e-3 * max(abs(fd), abs(g), 0.1 * scale), (n, fd, g)
