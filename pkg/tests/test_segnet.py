import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afami import autodiff as ad
from afami.segnet import NetConfig, build, check_spatial, default_attack_layer, load_checkpoint, save_checkpoint


def small_net(seed=0, depth=3, base=2, classes=4):
    return build(NetConfig(depth=depth, base_channels=base, num_classes=classes, seed=seed))


def rand_x(shape=(2, 1, 8, 8, 8), seed=0):
    return np.random.default_rng(seed).standard_normal(shape).astype(np.float32)


def test_same_seed_identical_params():
    a, b = small_net(3), small_net(3)
    for (na, pa), (nb, pb) in zip(a.parameters(), b.parameters()):
        assert na == nb and pa.value.tobytes() == pb.value.tobytes()


def test_different_seed_differs():
    a, b = small_net(1), small_net(2)
    assert any(not np.array_equal(pa.value, pb.value) for (_, pa), (_, pb) in zip(a.parameters(), b.parameters()))


def test_param_count_hand_computed():
    # e1.conv 4*1*27+4, e1.down 4*4*27+4, e2.conv 8*4*27+8, d1.conv 4*12*27+4, head 3*4+3
    net = build(NetConfig(depth=2, base_channels=4, num_classes=3))
    assert net.num_parameters() == 112 + 436 + 872 + 1300 + 15 == 2735


def test_declared_order():
    names = [n for n, _ in NetConfig(depth=3).layer_shapes()]
    blocks = [n.rsplit(".", 1)[0] for n in names[::2]]
    assert blocks == ["e1.conv", "e1.down", "e2.conv", "e2.down", "e3.conv", "d2.conv", "d1.conv", "head"]


def test_logit_shape():
    net = small_net()
    assert net.forward_clean(np.zeros((1, 1, 16, 16, 8), np.float32)).shape == (1, 4, 16, 16, 8)


def test_batch_independence():
    net = small_net()
    one = rand_x((1, 1, 8, 8, 8))
    out = net.forward_clean(np.concatenate([one, one])).value
    np.testing.assert_array_equal(out[0], out[1])


def test_bad_input_shape():
    with pytest.raises(ValueError):
        small_net().forward_clean(np.zeros((1, 2, 8, 8, 8), np.float32))
    with pytest.raises(ValueError, match="divisible"):
        small_net().forward_clean(np.zeros((1, 1, 6, 8, 8), np.float32))


@pytest.mark.parametrize("i", [1, 2, 3])
def test_tap_matches_clean_and_shape(i):
    net, x = small_net(), rand_x()
    clean = net.forward_clean(x).value
    logits, f = net.forward_with_tap(x, i)
    assert logits.value.tobytes() == clean.tobytes()
    f_scale = 2 ** (i - 1)
    assert f.shape == (2, 2 * 2 ** (i - 1), 8 // f_scale, 8 // f_scale, 8 // f_scale)
    assert (f.value >= 0).all()
    assert f.tag == f"f{i}"


@pytest.mark.parametrize("i", [1, 2, 3])
@pytest.mark.parametrize("use_cache", [False, True])
def test_identity_injection_bitwise(i, use_cache):
    net, x = small_net(), rand_x()
    clean = net.forward_clean(x).value
    _, f, feats = net.forward_with_tap(x, i, return_features=True)
    out = net.forward_with_injection(x, i, f.value.copy(), cached=feats if use_cache else None)
    assert out.value.tobytes() == clean.tobytes()


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 4), st.data())
def test_tap_shape_law(depth, data):
    i = data.draw(st.integers(1, depth))
    net = build(NetConfig(depth=depth, base_channels=2))
    side = 2 ** (depth - 1)
    x = np.zeros((1, 1, side, 2 * side, side), np.float32)
    _, f = net.forward_with_tap(x, i)
    assert f.shape == net.tap_shape(x.shape, i) == (1, 2 * 2 ** (i - 1), side >> (i - 1), (2 * side) >> (i - 1), side >> (i - 1))


def test_injection_changes_output():
    net, x = small_net(), rand_x()
    clean = net.forward_clean(x).value
    out = net.forward_with_injection(x, 3, np.zeros(net.tap_shape(x.shape, 3), np.float32)).value
    assert not np.allclose(out, clean)


def test_injection_shape_mismatch():
    net, x = small_net(), rand_x()
    with pytest.raises(ValueError, match="shape"):
        net.forward_with_injection(x, 2, np.zeros((2, 4, 3, 4, 4), np.float32))


def test_block_index_range():
    net, x = small_net(), rand_x()
    for bad in (0, 4):
        with pytest.raises(ValueError):
            net.forward_with_tap(x, bad)


def test_injected_leaf_cuts_encoder_path():
    # blocks <= i only receive gradient through skips of earlier blocks, never through the replaced f_i
    net, x = small_net(), rand_x()
    rep = ad.param(np.abs(rand_x((2, 4, 4, 4, 4), 1)))
    ad.backward(ad.mean(net.forward_with_injection(x, 2, rep)))
    assert net.params["e2.conv.w"].grad is None
    assert net.params["e1.down.w"].grad is None
    assert net.params["e1.conv.w"].grad is not None  # via the f_1 skip
    assert net.params["e2.down.w"].grad is not None
    assert rep.grad is not None and rep.grad.shape == rep.shape


def test_default_attack_layer():
    assert [default_attack_layer(L) for L in (2, 3, 4, 5)] == [1, 2, 2, 3]


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(depth=1)
    with pytest.raises(ValueError):
        NetConfig(num_classes=1)
    with pytest.raises(ValueError):
        NetConfig(patch_size=(10, 16, 16))
    check_spatial((16, 32, 32), 3)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = small_net(5)
        save_checkpoint(net, tmp_path / "c.ckpt", step=17)
        back, header = load_checkpoint(tmp_path / "c.ckpt")
        assert header["step"] == 17 and back.cfg == net.cfg
        for (_, a), (_, b) in zip(net.parameters(), back.parameters()):
            assert a.value.tobytes() == b.value.tobytes()
        x = rand_x()
        assert back.forward_clean(x).value.tobytes() == net.forward_clean(x).value.tobytes()

    def test_layout(self, tmp_path):
        save_checkpoint(small_net(), tmp_path / "c.ckpt", 0)
        assert (tmp_path / "c.ckpt").read_bytes()[:8] == b"MICKPT01"

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"NOTACKPT" + bytes(8))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_truncated(self, tmp_path):
        save_checkpoint(small_net(), tmp_path / "c.ckpt", 0)
        blob = (tmp_path / "c.ckpt").read_bytes()
        (tmp_path / "c.ckpt").write_bytes(blob[:-8])
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "c.ckpt")
