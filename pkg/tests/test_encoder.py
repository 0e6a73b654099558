import numpy as np
import pytest

from amdim import tensor as T
from amdim.augment import ImageBatch
from amdim.checkpoint import CheckpointError, load_checkpoint, load_encoder, save_checkpoint, save_encoder, state_hash
from amdim.encoder import ARCHITECTURES, EncoderConfig, build_encoder
from amdim.errors import ConfigError, ShapeError


def tiny(**kw):
    base = dict(ndf=8, nrkhs=16, ndepth=2, use_bn=False, seed=0)
    base.update(kw)
    return build_encoder(EncoderConfig(**base))


def images(n, size=32, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, 3, size, size))


@pytest.mark.parametrize("size", sorted(ARCHITECTURES))
def test_shapes(size):
    enc = tiny(input_size=size)
    f = enc(ImageBatch(images(2, size), np.arange(2)))
    assert f.phi1.shape == (2, 16)
    assert f.phi7.shape == (2, 16, 7, 7) and f.phi5.shape == (2, 16, 5, 5)
    assert f.f7.shape[2:] == (7, 7) and f.f5.shape[2:] == (5, 5) and f.f1.shape[2:] == (1, 1)
    assert f.f1.shape[1] == 64


def test_wide_encoder_builds_float32():
    with T.default_dtype(np.float32):
        enc = build_encoder(EncoderConfig(ndf=128, nrkhs=1024, ndepth=10))
        enc.eval()
        f = enc(images(1))
    assert f.phi1.shape == (1, 1024)
    assert np.all(np.isfinite(f.phi1.data))


def test_widest_config_accepted():
    cfg = EncoderConfig(ndf=192, nrkhs=1536, ndepth=8)
    assert cfg.nrkhs == 1536


@pytest.mark.parametrize("kw", [dict(ndf=4), dict(ndf=16, nrkhs=8), dict(ndepth=0), dict(input_size=48)])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        EncoderConfig(**kw)


def test_depth_one_still_taps():
    enc = tiny(ndepth=1)
    assert all(len(b.layers) == 0 for b in enc.blocks)
    f = enc(images(2))
    assert f.phi7.shape[2:] == (7, 7) and f.phi1.shape == (2, 16)


def test_wrong_input_size_rejected():
    with pytest.raises(ShapeError):
        tiny()(images(2, 64))


def test_identical_images_identical_features():
    x = images(1)
    f = tiny()(np.concatenate([x, x, images(1, seed=3)]))
    np.testing.assert_array_equal(f.phi1.data[0], f.phi1.data[1])
    np.testing.assert_array_equal(f.phi7.data[0], f.phi7.data[1])


def test_batch_permutation_equivariant():
    enc, x = tiny(), images(4)
    perm = np.array([2, 0, 3, 1])
    a, b = enc(x), enc(x[perm])
    np.testing.assert_allclose(b.phi5.data, a.phi5.data[perm], rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.phi1.data, a.phi1.data[perm], rtol=0, atol=1e-12)


def test_zero_image_finite():
    enc = build_encoder(EncoderConfig(ndf=16, nrkhs=32))
    f = enc(np.zeros((2, 3, 32, 32)))
    for t in (f.f7, f.f5, f.f1, f.phi7, f.phi5, f.phi1):
        assert np.all(np.isfinite(t.data))


def test_parameter_count_pure_and_grows():
    a = tiny(ndf=8).num_parameters()
    assert tiny(ndf=8, seed=5).num_parameters() == a
    assert tiny(ndf=16, nrkhs=32).num_parameters() > tiny(ndf=8, nrkhs=32).num_parameters()


def test_init_is_seeded():
    a, b, c = tiny(seed=1), tiny(seed=1), tiny(seed=2)
    assert state_hash(a.state_dict()) == state_hash(b.state_dict()) != state_hash(c.state_dict())


# --- receptive fields -----------------------------------------------------

def test_rf_examples():
    enc = tiny()
    assert enc.receptive_field(1, 0, 0).rect == (0, 0, 31, 31)
    rf = enc.receptive_field(7, 0, 0)
    assert (rf.height, rf.width) == (8, 8)
    assert enc.receptive_field(7, 6, 6).rect == (24, 24, 31, 31)
    assert enc.receptive_field(7, 2, 3).rect[:2] == (8, 12)
    assert enc.receptive_field(5, 0, 0).height == 16


def test_rf_rejects_bad_position():
    with pytest.raises(ShapeError):
        tiny().receptive_field(7, 7, 0)
    with pytest.raises(ShapeError):
        tiny().receptive_field(3, 0, 0)


def test_rf_overlap_values():
    enc = tiny()
    assert enc.rf_overlap(7, (3, 3), (3, 3)) == 1.0
    assert enc.rf_overlap(7, (0, 0), (6, 6)) == 0.0
    # 8x8 fields offset by 4: intersection 4*8=32, union 96
    assert enc.rf_overlap(7, (2, 2), (2, 3)) == pytest.approx(1 / 3)


def test_rf_inside_image_for_every_position():
    enc = tiny()
    for d in (7, 5, 1):
        for i in range(d):
            for j in range(d):
                t, l, b, r = enc.receptive_field(d, i, j).rect
                assert 0 <= t <= b < 32 and 0 <= l <= r < 32


@pytest.mark.parametrize("d", [7, 5])
def test_gradient_masking(d):
    enc = tiny(ndf=8, ndepth=1)
    rng = np.random.default_rng(d)
    x = images(1, seed=d)
    base = enc.trunk(x)[d].data
    for _ in range(10):
        i, j = rng.integers(0, d, size=2)
        t, l, b, r = enc.receptive_field(d, i, j).rect
        while True:
            py, px = rng.integers(0, 32, size=2)
            if not (t <= py <= b and l <= px <= r):
                break
        x2 = x.copy()
        x2[0, :, py, px] += 1.0
        out = enc.trunk(x2)[d].data
        np.testing.assert_array_equal(out[:, :, i, j], base[:, :, i, j])
    # and a pixel inside the field does move it
    x2 = x.copy()
    x2[0, :, t, l] += 1.0
    assert not np.array_equal(enc.trunk(x2)[d].data[:, :, i, j], base[:, :, i, j])


def test_layer_table_matches_geometry():
    rows = tiny().layer_table()
    assert [r["out_extent"] for r in rows] == [30, 14, 7, 5, 1]
    assert [r["tap"] for r in rows] == [None, None, 7, 5, 1]
    assert rows[2]["rf_size"] == 8 and rows[2]["rf_jump"] == 4


# --- checkpoint -----------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    enc = tiny(use_bn=True)
    enc(images(4))  # moves running statistics
    save_encoder(tmp_path / "e.ckpt", enc, {"step": 3})
    enc2, cfg, meta = load_encoder(tmp_path / "e.ckpt")
    assert meta == {"step": 3} and cfg["encoder"]["ndf"] == 8
    for (n, a), (m, b) in zip(sorted(enc.state_dict().items()), sorted(enc2.state_dict().items())):
        assert n == m and a.dtype == b.dtype
        np.testing.assert_array_equal(a, b)
    enc.eval(), enc2.eval()
    np.testing.assert_array_equal(enc(images(2)).phi1.data, enc2(images(2)).phi1.data)


def test_checkpoint_float32_round_trip(tmp_path):
    with T.default_dtype(np.float32):
        enc = tiny()
    save_encoder(tmp_path / "e.ckpt", enc)
    enc2, _, _ = load_encoder(tmp_path / "e.ckpt")
    assert enc2.blocks[0].conv_a.weight.dtype == np.float32
    assert state_hash(enc.state_dict()) == state_hash(enc2.state_dict())


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"notackpt" + bytes(20))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    save_checkpoint(tmp_path / "t", {"a": np.arange(10.0)})
    raw = (tmp_path / "t").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="offset"):
        load_checkpoint(tmp_path / "t")
