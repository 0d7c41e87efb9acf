"""Network components: keypoint encoder, heads, bundle plumbing."""

import numpy as np
import pytest
import torch

from civil import model


def blob_image(res, row, col, size=3):
    img = np.zeros((res, res, 3), dtype=np.uint8)
    img[row : row + size, col : col + size] = 255
    return img


def test_keypoint_encoder_learns_to_localize():
    # the design claim behind the soft-keypoint readout: a tiny conv stack
    # can regress a blob's position after a brief fit
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    enc = model.ImageEncoder(out_dim=2, channels=(4, 8))
    opt = torch.optim.Adam(enc.parameters(), lr=3e-3)

    def batch(n):
        imgs, targets = [], []
        for _ in range(n):
            r, c = rng.integers(0, 29), rng.integers(0, 29)
            imgs.append(blob_image(32, r, c))
            targets.append([(c + 1.5) / 32, 1.0 - (r + 1.5) / 32])
        return model.images_to_tensor(np.stack(imgs)), torch.tensor(targets)

    for _ in range(150):
        x, y = batch(32)
        loss = ((enc(x) - y) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()

    x, y = batch(64)
    with torch.no_grad():
        err = (enc(x) - y).norm(dim=1).mean().item()
    assert err < 0.06, err


def test_coord_channels_orientation():
    imgs = torch.zeros(1, 3, 8, 8)
    with_coords = model.ImageEncoder._with_coords(imgs)
    assert with_coords.shape == (1, 5, 8, 8)
    xs, ys = with_coords[0, 3], with_coords[0, 4]
    assert xs[0, 0] < xs[0, -1]          # x grows rightward
    assert ys[0, 0] > ys[-1, 0]          # y grows upward (row 0 is top)
    assert xs[0, 0] == pytest.approx(0.5 / 8)
    assert ys[-1, 0] == pytest.approx(0.5 / 8)


def test_marker_head_identity_and_linear():
    identity = model.MarkerHead(2, "identity")
    x = torch.randn(5, 2)
    torch.testing.assert_close(identity(x), x)
    identity.check_invertible()

    linear = model.MarkerHead(2, "linear")
    linear.check_invertible()
    with torch.no_grad():
        linear.linear.weight.zero_()
    with pytest.raises(ValueError):
        linear.check_invertible()

    with pytest.raises(ValueError):
        model.MarkerHead(2, "conv")


def test_action_head_decode_ranges():
    raw = torch.tensor([[3.0, -3.0, 0.7]])
    velocity, logit = model.ActionHead.decode(raw)
    assert velocity.abs().max() < 1.0
    assert logit.item() == pytest.approx(0.7)


def test_transformer_uses_newest_step():
    config = model.miniature_config()
    torch.manual_seed(1)
    policy = model.SlotTransformer(config)
    B, W = 2, config.window
    states = torch.randn(B, W, config.state_dim)
    fs = torch.randn(B, W, config.static_dim)
    fe = torch.randn(B, W, config.implicit_dim)
    base = policy(states, fs, fe)
    # perturbing the newest state changes the summary
    bumped = states.clone()
    bumped[:, -1] += 1.0
    assert not torch.allclose(policy(bumped, fs, fe), base)
    with pytest.raises(ValueError):
        policy(states[:, :1], fs[:, :1], fe[:, :1])


def test_bundle_checkpoint_roundtrip(tmp_path):
    config = model.miniature_config()
    bundle = model.build_bundle(config, seed=3)
    bundle.causal_trained = True
    path = tmp_path / "ckpt.pt"
    model.save_checkpoint(bundle, path, extra={"note": 7})
    loaded, extra = model.load_checkpoint(path)
    assert extra == {"note": 7}
    assert loaded.causal_trained
    assert loaded.config == config
    for name in model.ModelBundle.MODULE_NAMES:
        assert model.module_fingerprint(getattr(loaded, name)) == model.module_fingerprint(
            getattr(bundle, name)
        )


def test_checkpoint_version_guard(tmp_path):
    config = model.miniature_config()
    bundle = model.build_bundle(config)
    path = tmp_path / "ckpt.pt"
    model.save_checkpoint(bundle, path)
    payload = torch.load(path, weights_only=False)
    payload["checkpoint_version"] = 0
    torch.save(payload, path)
    with pytest.raises(ValueError):
        model.load_checkpoint(path)


def test_build_bundle_seeded_reproducibly():
    a = model.build_bundle(model.miniature_config(), seed=5)
    b = model.build_bundle(model.miniature_config(), seed=5)
    c = model.build_bundle(model.miniature_config(), seed=6)
    for name in model.ModelBundle.MODULE_NAMES:
        assert model.module_fingerprint(getattr(a, name)) == model.module_fingerprint(
            getattr(b, name)
        )
    assert model.module_fingerprint(a.policy) != model.module_fingerprint(c.policy)


def test_init_causal_from_encoders_copies_weights():
    bundle = model.build_bundle(model.miniature_config(), seed=2)
    assert model.module_fingerprint(bundle.causal_static) != model.module_fingerprint(
        bundle.static_encoder
    )
    bundle.init_causal_from_encoders()
    assert model.module_fingerprint(bundle.causal_static) == model.module_fingerprint(
        bundle.static_encoder
    )
    assert model.module_fingerprint(bundle.causal_ego) == model.module_fingerprint(
        bundle.ego_encoder
    )


def test_freeze_phase1_stops_gradients():
    bundle = model.build_bundle(model.miniature_config(), seed=0)
    bundle.freeze_phase1()
    for module in bundle.phase1_modules().values():
        assert all(not p.requires_grad for p in module.parameters())
    for module in bundle.causal_modules().values():
        assert all(p.requires_grad for p in module.parameters())


def test_miniature_bundle_is_finite_difference_sized():
    bundle = model.build_bundle(model.miniature_config())
    assert bundle.parameter_count() <= 500


def test_explicit_slice_width():
    config = model.miniature_config()
    bundle = model.build_bundle(config)
    feats = torch.randn(4, config.static_dim)
    assert bundle.explicit_slice(feats).shape == (4, config.marker_dim)


def test_images_to_tensor_scales_and_moves_channels():
    img = np.zeros((2, 4, 4, 3), dtype=np.uint8)
    img[0, 0, 0] = (255, 0, 127)
    out = model.images_to_tensor(img)
    assert out.shape == (2, 3, 4, 4)
    assert out.max() <= 1.0
    assert out[0, 0, 0, 0] == pytest.approx(1.0)
    assert out[0, 2, 0, 0] == pytest.approx(127 / 255)
