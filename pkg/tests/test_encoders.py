import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from piecediff import encoders as enc
from piecediff.errors import DimensionError, EmptyInputError


@pytest.fixture(scope="module")
def patch_encoder():
    torch.manual_seed(0)
    return enc.PatchEncoderC4(enc.EncoderConfig(dim=64, conv_channels=8)).eval()


@pytest.fixture(scope="module")
def cloud_encoder():
    torch.manual_seed(0)
    return enc.CloudEncoderVN(enc.EncoderConfig(vector_channels=42, hidden_channels=16)).double().eval()


def random_patches(n, P=16, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).random((n, 3, P, P)), dtype=torch.float32)


def random_clouds(n, seed=0):
    x = np.random.default_rng(seed).standard_normal((n, 1000, 3)) * [0.3, 0.2, 0.1]
    return x - x.mean(1, keepdims=True)


# centering


def test_center_constant_cloud():
    c, mu = enc.center_piece(np.tile([1.0, 2.0, 3.0], (10, 1)))
    np.testing.assert_allclose(c, 0, atol=1e-15)
    np.testing.assert_allclose(mu, [1, 2, 3])


def test_center_already_centered():
    x = random_clouds(1)[0]
    c, mu = enc.center_piece(x)
    np.testing.assert_allclose(c, x, atol=1e-12)
    np.testing.assert_allclose(mu, 0, atol=1e-12)


def test_center_idempotent_and_reconstructs():
    rng = np.random.default_rng(1)
    for _ in range(100):
        x = rng.standard_normal((50, 3)) + rng.standard_normal(3) * 5
        c, mu = enc.center_piece(x)
        np.testing.assert_allclose(c.mean(0), 0, atol=1e-9)
        np.testing.assert_allclose(c + mu, x, atol=1e-12)
        c2, mu2 = enc.center_piece(c)
        np.testing.assert_allclose(c2, c, atol=1e-12)


def test_center_empty():
    with pytest.raises(EmptyInputError):
        enc.center_piece(np.zeros((0, 3)))


# 2D


def test_patch_constant_color_blocks_equal(patch_encoder):
    x = torch.full((1, 3, 16, 16), 0.4)
    with torch.no_grad():
        f = patch_encoder(x).reshape(4, -1)
    for k in range(1, 4):
        torch.testing.assert_close(f[k], f[0], rtol=0, atol=0)


def test_patch_equivariance_bit_exact(patch_encoder):
    x = random_patches(100, seed=2)
    with torch.no_grad():
        f = patch_encoder(x)
        for k in range(1, 4):
            fr = patch_encoder(enc.rot90(x, k))
            assert torch.equal(fr, enc.group_act(k, f))


def test_patch_equivariance_matches_numpy_rot90(patch_encoder):
    img = np.random.default_rng(3).integers(0, 256, (5, 12, 12, 3), dtype=np.uint8)
    x = enc.patches_to_tensor(img)
    xr = enc.patches_to_tensor(np.rot90(img, 1, axes=(1, 2)))
    with torch.no_grad():
        assert torch.equal(patch_encoder(xr), enc.group_act(1, patch_encoder(x)))


def test_patch_full_turn(patch_encoder):
    x = random_patches(4, seed=4)
    with torch.no_grad():
        assert torch.equal(patch_encoder(enc.rot90(enc.rot90(enc.rot90(enc.rot90(x))))), patch_encoder(x))


def test_patch_non_square_rejected(patch_encoder):
    with pytest.raises(DimensionError):
        patch_encoder(torch.zeros(1, 3, 8, 10))
    with pytest.raises(DimensionError):
        enc.patches_to_tensor(np.zeros((1, 8, 10, 3)))


def test_patch_invariant_variant():
    torch.manual_seed(1)
    e = enc.PatchEncoderC4(enc.EncoderConfig(dim=64, conv_channels=8, variant="invariant")).eval()
    x = random_patches(20, seed=5)
    with torch.no_grad():
        assert (e(enc.rot90(x)) - e(x)).abs().max() < 1e-6


def test_patch_nonequivariant_variant_breaks_symmetry(patch_encoder):
    ne = enc.degrade_to_noneq(patch_encoder).eval()
    x = random_patches(100, seed=6)
    with torch.no_grad():
        res = (ne(enc.rot90(x)) - enc.group_act(1, ne(x))).abs().amax(-1)
    assert (res > 1e-3).float().mean() >= 0.9


# 3D


def test_cloud_identity_exact(cloud_encoder):
    x = torch.as_tensor(random_clouds(3, seed=7))
    with torch.no_grad():
        assert torch.equal(cloud_encoder(x @ torch.eye(3, dtype=x.dtype).T), cloud_encoder(x))


def test_cloud_equivariance_sweep(cloud_encoder):
    clouds = random_clouds(100, seed=8)
    R = Rotation.random(100, random_state=8).as_matrix()
    with torch.no_grad():
        f = cloud_encoder(torch.as_tensor(clouds)).numpy()
        fr = cloud_encoder(torch.as_tensor(np.einsum("bnj,bij->bni", clouds, R))).numpy()
    for i in range(100):
        ref = enc.group_act(R[i], f[i])
        assert np.linalg.norm(fr[i] - ref) / np.linalg.norm(ref) < 1e-5


def test_cloud_equivariance_float32_rounding():
    # float32 rounding only (median ~4e-5, max ~5e-4 over 100 pairs); the exact property is checked in float64
    torch.manual_seed(2)
    e = enc.CloudEncoderVN(enc.EncoderConfig()).eval()
    clouds = random_clouds(10, seed=9)
    R = Rotation.random(10, random_state=9).as_matrix()
    with torch.no_grad():
        f = e(torch.as_tensor(clouds, dtype=torch.float32)).double().numpy()
        fr = e(torch.as_tensor(np.einsum("bnj,bij->bni", clouds, R), dtype=torch.float32)).double().numpy()
    assert e.out_dim == 126
    for i in range(10):
        ref = enc.group_act(R[i], f[i])
        assert np.linalg.norm(fr[i] - ref) / np.linalg.norm(ref) < 1e-3


def test_cloud_channel_norms_invariant(cloud_encoder):
    clouds = random_clouds(10, seed=10)
    R = Rotation.random(random_state=10).as_matrix()
    with torch.no_grad():
        c = cloud_encoder.vector_features(torch.as_tensor(clouds))
        cr = cloud_encoder.vector_features(torch.as_tensor(clouds @ R.T))
    torch.testing.assert_close(c.norm(dim=-1), cr.norm(dim=-1), atol=1e-6, rtol=0)


def test_cloud_wrong_point_count(cloud_encoder):
    with pytest.raises(DimensionError):
        cloud_encoder(torch.zeros(1, 999, 3, dtype=torch.float64))


def test_cloud_invariant_variant(cloud_encoder):
    inv = enc.degrade_to_noneq(cloud_encoder, "invariant").double().eval()
    clouds = random_clouds(20, seed=11)
    R = Rotation.random(20, random_state=11).as_matrix()
    with torch.no_grad():
        a = inv(torch.as_tensor(clouds))
        b = inv(torch.as_tensor(np.einsum("bnj,bij->bni", clouds, R)))
    assert ((a - b).abs().max() / a.abs().max()) < 1e-5


def test_cloud_nonequivariant_variant_breaks_symmetry(cloud_encoder):
    ne = enc.degrade_to_noneq(cloud_encoder).double().eval()
    clouds = random_clouds(50, seed=12)
    R = Rotation.random(50, random_state=12).as_matrix()
    with torch.no_grad():
        f = ne(torch.as_tensor(clouds)).numpy()
        fr = ne(torch.as_tensor(np.einsum("bnj,bij->bni", clouds, R))).numpy()
    res = [np.linalg.norm(fr[i] - enc.group_act(R[i], f[i])) for i in range(50)]
    assert np.mean(np.array(res) > 1e-3) >= 0.9


# group action


def test_group_act_identity_and_cycles():
    h = np.random.default_rng(13).standard_normal(32)
    np.testing.assert_array_equal(enc.group_act(0, h), h)
    np.testing.assert_array_equal(enc.group_act(np.eye(3), np.arange(9.0)), np.arange(9.0))
    out = h
    for _ in range(4):
        out = enc.group_act(1, out)
    np.testing.assert_array_equal(out, h)
    np.testing.assert_array_equal(enc.group_act(1, enc.group_act(2, h)), enc.group_act(3, h))


def test_group_act_3d_composition():
    rng = np.random.default_rng(14)
    R1 = Rotation.random(100, random_state=14).as_matrix()
    R2 = Rotation.random(100, random_state=15).as_matrix()
    for i in range(100):
        h = rng.standard_normal(126)
        np.testing.assert_allclose(enc.group_act(R1[i], enc.group_act(R2[i], h)),
                                   enc.group_act(R1[i] @ R2[i], h), atol=1e-12)


def test_group_act_layout_errors():
    with pytest.raises(DimensionError):
        enc.group_act(1, np.zeros(10))
    with pytest.raises(DimensionError):
        enc.group_act(np.eye(3), np.zeros(10))


def test_encoders_deterministic(patch_encoder):
    x = random_patches(3, seed=16)
    with torch.no_grad():
        assert torch.equal(patch_encoder(x), patch_encoder(x))
