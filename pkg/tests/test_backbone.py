import numpy as np
import pytest
import torch
import torch.nn.functional as F

from rtatl.models.backbone import (PredictionHeads, RoIBranches, TopDownFusion, Trunk, crop_roi_features,
                                   fuse_max)


@pytest.fixture(scope="module")
def trunk():
    torch.manual_seed(0)
    return Trunk(192).eval()


def test_trunk_stage_sizes(trunk):
    with torch.no_grad():
        stages = trunk(torch.rand(2, 3, 192, 192))
    assert [tuple(s.shape) for s in stages] == [(2, 64, 48, 48), (2, 128, 24, 24), (2, 256, 12, 12), (2, 512, 6, 6)]


def test_trunk_zero_image_is_finite(trunk):
    with torch.no_grad():
        assert all(torch.isfinite(s).all() for s in trunk(torch.zeros(1, 3, 192, 192)))


@pytest.mark.parametrize("shape", [(1, 3, 96, 96), (1, 1, 192, 192), (3, 192, 192)])
def test_trunk_rejects_wrong_shape(trunk, shape):
    with pytest.raises(ValueError):
        trunk(torch.zeros(shape))


def _stages(b=1, zero_low=False):
    g = torch.Generator().manual_seed(0)
    sizes = [(64, 48), (128, 24), (256, 12), (512, 6)]
    maps = [torch.randn(b, c, s, s, generator=g) for c, s in sizes]
    if zero_low:
        maps = [torch.zeros_like(m) for m in maps[:-1]] + maps[-1:]
    return maps


def test_fusion_output_shape():
    fusion = TopDownFusion(out_channels=128)
    assert fusion(_stages(2)).shape == (2, 128, 48, 48)
    assert TopDownFusion(out_channels=32)(_stages()).shape[1] == 32


def test_fusion_with_zero_lower_levels_is_upsampled_top():
    fusion = TopDownFusion(out_channels=16)
    stages = _stages(zero_low=True)
    top = fusion.lateral[-1](stages[-1])
    torch.testing.assert_close(fusion(stages), F.interpolate(top, scale_factor=8, mode="nearest"))


def test_fusion_is_additive_over_levels():
    fusion = TopDownFusion(out_channels=8)
    a, b = _stages(), [torch.randn_like(m) for m in _stages()]
    torch.testing.assert_close(fusion([x + y for x, y in zip(a, b)]), fusion(a) + fusion(b), atol=1e-4, rtol=1e-4)


def test_fusion_channel_mismatch():
    stages = _stages()
    stages[1] = torch.zeros(1, 100, 24, 24)
    with pytest.raises(ValueError, match="channels"):
        TopDownFusion()(stages)
    with pytest.raises(ValueError):
        TopDownFusion()(stages[:3])


def test_crop_centre_block_of_identity_map():
    fused = torch.randn(1, 5, 48, 48)
    centers = torch.full((1, 1, 2, 2), 96.0)
    # a 24-px box at stride 4 covers exactly 6 feature cells
    patch = crop_roi_features(fused, centers, box_size=24, stride=4, cells=6)
    assert patch.shape == (1, 1, 2, 5, 6, 6)
    torch.testing.assert_close(patch[0, 0, 0], fused[0, :, 21:27, 21:27], atol=1e-5, rtol=0)


def test_crop_samples_a_ramp_exactly():
    ys, xs = torch.meshgrid(torch.arange(48.0), torch.arange(48.0), indexing="ij")
    fused = torch.stack([xs, ys])[None]
    centers = torch.tensor([[[[90.0, 101.0], [70.0, 60.0]]]])
    patch = crop_roi_features(fused, centers, box_size=48, stride=4, cells=6)
    offs = (torch.arange(6.0) + 0.5) * 8 - 24
    for side in range(2):
        cx, cy = centers[0, 0, side]
        # value j lives at pixel centre j + 0.5 in edge coordinates
        torch.testing.assert_close(patch[0, 0, side, 0], ((cx + offs) / 4 - 0.5).expand(6, 6), atol=1e-4, rtol=0)
        torch.testing.assert_close(patch[0, 0, side, 1], ((cy + offs) / 4 - 0.5)[:, None].expand(6, 6), atol=1e-4, rtol=0)


def test_crop_impulse_shift():
    fused = torch.zeros(1, 1, 48, 48)
    fused[0, 0, 24, 23] = 1.0
    shifted = torch.roll(fused, 1, dims=3)
    centers = torch.full((1, 1, 2, 2), 96.0)
    a = crop_roi_features(fused, centers, 24)[0, 0, 0, 0]
    b = crop_roi_features(shifted, centers, 24)[0, 0, 0, 0]
    assert a.sum() == 1 and b.sum() == 1
    torch.testing.assert_close(torch.roll(a, 1, dims=1), b)


def test_crop_identical_centres_identical_patches():
    fused = torch.randn(2, 4, 48, 48)
    centers = torch.tensor([50.0, 70.0]).expand(2, 3, 2, 2).clone()
    p = crop_roi_features(fused, centers, 48)
    torch.testing.assert_close(p[:, 0, 0], p[:, 2, 1])


def test_roi_branches():
    torch.manual_seed(0)
    branches = RoIBranches(4, in_channels=16, hidden=8, out_dim=128)
    patches = torch.randn(3, 4, 2, 16, 6, 6)
    out = branches(patches)
    assert out.shape == (3, 4, 2, 128)
    for i in range(4):
        torch.testing.assert_close(out[:, i, 1], branches.branch(patches[:, i, 1], i), atol=1e-5, rtol=1e-5)
    one = patches[0, 0, 0]
    assert branches.branch(one, 0).shape == (128,)
    assert not torch.allclose(branches.branch(one, 0), branches.branch(one, 1))
    with pytest.raises(IndexError):
        branches.branch(one, 4)


def test_zero_patch_output_depends_only_on_biases():
    torch.manual_seed(0)
    branches = RoIBranches(2, in_channels=8, hidden=4, out_dim=16)
    zero = torch.zeros(2, 8, 6, 6)
    before = branches.branch(zero, 1)
    torch.testing.assert_close(before[0], before[1])
    with torch.no_grad():
        branches.weight1.normal_()
    torch.testing.assert_close(branches.branch(zero, 1), before)


def test_max_fusion():
    heads = PredictionHeads(3, d=8, global_dim=16)
    pred = heads(torch.randn(5, 16), torch.randn(5, 3, 8))
    assert torch.equal(pred.probs_fused, torch.maximum(pred.probs_global, pred.probs_roi))
    assert ((pred.probs_fused >= 0) & (pred.probs_fused <= 1)).all()
    g, r = torch.tensor([0.3, 0.5]), torch.tensor([0.7, 0.5])
    assert torch.equal(fuse_max(g, r), torch.tensor([0.7, 0.5]))


def test_max_fusion_is_monotone():
    rng = np.random.default_rng(0)
    for _ in range(100):
        g, r, bump = (torch.tensor(rng.random(4)) for _ in range(3))
        assert (fuse_max(g + bump, r) >= fuse_max(g, r)).all()
        assert (fuse_max(g, r + bump) >= fuse_max(g, r)).all()
