import numpy as np
import pytest

from fafnet.errors import BadMagicError, DimensionOverflowError, FormatError, ShapeError, TruncatedPayloadError
from fafnet.losses import HfsConfig
from fafnet.model import (
    Checkpoint,
    ModelConfig,
    conv_block,
    fab_forward,
    fafnet_forward,
    ffb_forward,
    hfs_input_dims,
    init_fafnet,
    is_wavelet_param,
    load_checkpoint,
    save_checkpoint,
)
from fafnet.tensor import Tensor
from fafnet.wavelet import WaveletBands, haar_bank, idwt2

SMALL = ModelConfig(bands=4, channels=4, patch_size=16, hfs=HfsConfig(hidden=8, dim=4))


def shape_walk_count(b, c, depth, patch, hidden, dim, learnable=True):
    """Independent parameter tally from the layer list."""

    def conv(cin, cout, k):
        return cin * cout * k * k + cout

    def cb(cin, cout):
        total = 0
        for i in range(depth):
            total += conv(cin if i == 0 else cout, cout, 3) + 2 * cout
        return total

    wave = 4 if learnable else 0
    total = 0
    for cin in (b, 1):
        total += wave + cb(cin, c) + cb(3 * cin, 3 * c)
        total += wave + cb(c, c) + cb(3 * c, 3 * c)
    total += 2 * (conv(6 * c, 3 * c, 1) + cb(3 * c, 3 * c) + wave) + cb(c, c)
    total += (depth - 1) * (conv(c, c, 3) + 2 * c) + conv(c, b, 3)
    for side in (patch // 2, patch // 4):
        din = 3 * c * side * side
        total += din * hidden + hidden + hidden * dim + dim
    return total


def inputs(cfg, n=2, seed=0, size=None):
    s = size or cfg.patch_size
    rng = np.random.default_rng(seed)
    ms = rng.uniform(-1, 1, (n, cfg.bands, s, s)).astype(np.float32)
    pan = rng.uniform(-1, 1, (n, 1, s, s)).astype(np.float32)
    return ms, pan


def test_parameter_count_matches_shape_walk():
    cfg = ModelConfig(bands=4, channels=32, cb_depth=2)
    assert init_fafnet(cfg).num_parameters() == shape_walk_count(4, 32, 2, 64, 512, 128)


@pytest.mark.parametrize("depth", [1, 3])
def test_parameter_count_other_depths(depth):
    cfg = SMALL.with_(cb_depth=depth)
    assert init_fafnet(cfg).num_parameters() == shape_walk_count(4, 4, depth, 16, 8, 4)


def test_init_deterministic():
    a, b = init_fafnet(SMALL), init_fafnet(SMALL)
    assert a.names() == b.names()
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    c = init_fafnet(SMALL.with_(seed=1))
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a)


def test_band_count_only_changes_facing_layers():
    a, b = init_fafnet(SMALL), init_fafnet(SMALL.with_(bands=8))
    assert a.names() == b.names()
    differ = {k for k in a if a[k].shape != b[k].shape}
    assert differ == {
        "ms.fab1.cb_l.0.conv.w",
        "ms.fab1.cb_h.0.conv.w",
        "recon.1.conv.w",
        "recon.1.conv.b",
    }


def test_fixed_haar_changes_only_wavelet_params():
    learn, fixed = init_fafnet(SMALL), init_fafnet(SMALL.with_(wavelet="fixed_haar"))
    extra = set(learn.names()) - set(fixed.names())
    assert extra and all(is_wavelet_param(k) for k in extra)
    assert set(fixed.names()) <= set(learn.names())
    assert all(np.array_equal(learn[k].data, fixed[k].data) for k in fixed)


def test_learnable_at_init_equals_fixed_forward():
    ms, pan = inputs(SMALL)
    a = fafnet_forward(ms, pan, init_fafnet(SMALL), SMALL, train=True).fused.data
    fixed = SMALL.with_(wavelet="fixed_haar")
    b = fafnet_forward(ms, pan, init_fafnet(fixed), fixed, train=True).fused.data
    assert np.array_equal(a, b)


def test_fab_shapes():
    cfg = ModelConfig(channels=4, patch_size=64, hfs=HfsConfig(hidden=4, dim=2))
    params = init_fafnet(cfg)
    pan = Tensor(np.random.default_rng(0).uniform(-1, 1, (2, 1, 64, 64)).astype(np.float32))
    fl, fh = fab_forward(pan, 1, "pan", params, cfg, train=True)
    assert fl.shape == (2, 4, 32, 32) and fh.shape == (2, 12, 32, 32)
    fl2, fh2 = fab_forward(fl, 2, "pan", params, cfg, train=True)
    assert fl2.shape == (2, 4, 16, 16) and fh2.shape == (2, 12, 16, 16)
    with pytest.raises(ShapeError):
        fab_forward(pan, 1, "ms", params, cfg)


def test_fab_zero_input_gives_zero():
    params = init_fafnet(SMALL)
    fl, fh = fab_forward(Tensor(np.zeros((1, 4, 16, 16), np.float32)), 1, "ms", params, SMALL, train=False)
    assert not fl.data.any() and not fh.data.any()


def test_ffb_shapes_and_zero_hf_path():
    cfg = SMALL.with_(wavelet="fixed_haar")
    params = init_fafnet(cfg)
    c = cfg.channels
    rng = np.random.default_rng(0)
    lf = Tensor(rng.normal(size=(2, c, 4, 4)).astype(np.float32))
    zero = Tensor(np.zeros((2, 3 * c, 4, 4), np.float32))
    out = ffb_forward(zero, zero, lf, 2, params, cfg, train=False)
    assert out.shape == (2, c, 8, 8)
    lf_cb = conv_block(lf, params, "ffb2.cb_l", cfg.cb_depth, False)
    want = idwt2(WaveletBands(lf_cb, Tensor(np.zeros((2, 3 * c, 4, 4), np.float32))), haar_bank())
    np.testing.assert_allclose(out.data, want.data, atol=1e-6)
    hf = Tensor(rng.normal(size=(2, 3 * c, 8, 8)).astype(np.float32))
    assert ffb_forward(hf, hf, out, 1, params, cfg, train=False).shape == (2, c, 16, 16)
    with pytest.raises(ShapeError):
        ffb_forward(hf, hf, lf, 1, params, cfg)


@pytest.mark.parametrize("bands", [4, 8])
def test_forward_contract(bands):
    cfg = ModelConfig(bands=bands, channels=4, patch_size=64, hfs=HfsConfig(hidden=4, dim=2))
    params = init_fafnet(cfg)
    ms, pan = inputs(cfg, n=1)
    rec = fafnet_forward(ms, pan, params, cfg, train=False)
    assert rec.fused.shape == (1, bands, 64, 64)
    assert np.all(np.abs(rec.fused.data) < 1)
    assert rec.hf_p1.shape == rec.hf_m1.shape == (1, 12, 32, 32)
    assert rec.hf_p2.shape == rec.hf_m2.shape == (1, 12, 16, 16)
    again = fafnet_forward(ms, pan, params, cfg, train=False)
    assert np.array_equal(rec.fused.data, again.fused.data)


def test_forward_rejects_bad_sizes():
    params = init_fafnet(SMALL)
    ms, pan = inputs(SMALL, size=18)
    with pytest.raises(ShapeError, match="divisible by 4"):
        fafnet_forward(ms, pan, params, SMALL)
    ms, pan = inputs(SMALL)
    with pytest.raises(ShapeError):
        fafnet_forward(ms[:, :3], pan, params, SMALL)


def test_hfs_dims():
    assert hfs_input_dims(ModelConfig(channels=32, patch_size=64)) == (3 * 32 * 32 * 32, 3 * 32 * 16 * 16)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(channels=0)
    with pytest.raises(ValueError):
        ModelConfig(wavelet="db4")


# ---------------------------------------------------------------- checkpoints


@pytest.fixture
def ckpt(tmp_path):
    params = init_fafnet(SMALL)
    for t in params._params.values():
        t.data += np.float32(0.125)
    params.buffers["recon.0.bn.var"][:] = 3.5
    state = {"adam.step": np.array(7, np.float32), "trainer.epoch": np.array(2, np.float32)}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, Checkpoint(SMALL, params, 2047.0, state))
    return path, params, state


def test_checkpoint_round_trip_bit_exact(ckpt, tmp_path):
    path, params, state = ckpt
    back = load_checkpoint(path)
    assert back.config == SMALL and back.max_value == 2047.0
    assert back.params.names() == params.names()
    for k in params:
        assert back.params[k].data.tobytes() == params[k].data.tobytes()
    for k, v in params.buffers.items():
        assert back.params.buffers[k].tobytes() == v.tobytes()
    assert back.state.keys() == state.keys()
    again = tmp_path / "again.ckpt"
    save_checkpoint(again, back)
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_corruption(ckpt, tmp_path):
    path, _, _ = ckpt
    raw = path.read_bytes()
    bad = tmp_path / "bad.ckpt"

    bad.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(BadMagicError):
        load_checkpoint(bad)

    for cut in (10, 60, len(raw) // 2, len(raw) - 1):
        bad.write_bytes(raw[:cut])
        with pytest.raises(TruncatedPayloadError):
            load_checkpoint(bad)

    bad.write_bytes(raw + b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(bad)

    # first parameter's rank field sits after magic, header, count, name length and name
    first = init_fafnet(SMALL).names()[0].encode()
    off = 8 + 49 + 4 + 4 + len(first)
    mutated = bytearray(raw)
    mutated[off : off + 4] = (2).to_bytes(4, "little")
    mutated[off + 4 : off + 20] = (2**40).to_bytes(8, "little") * 2
    bad.write_bytes(bytes(mutated))
    with pytest.raises(DimensionOverflowError):
        load_checkpoint(bad)


def test_checkpoint_random_corruption_never_crashes(ckpt, tmp_path):
    path, _, _ = ckpt
    raw = path.read_bytes()
    rng = np.random.default_rng(0)
    bad = tmp_path / "fuzz.ckpt"
    for _ in range(40):
        mutated = bytearray(raw)
        pos = int(rng.integers(8, 200))
        mutated[pos] ^= int(rng.integers(1, 256))
        bad.write_bytes(bytes(mutated))
        try:
            load_checkpoint(bad)
        except FormatError:
            pass
