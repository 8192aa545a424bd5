import numpy as np
import pytest
from hypothesis import given, strategies as st

from mtkd import models as M
from mtkd.numerics import tensor as T


def pair(seed, n=None, size=8):
    r = np.random.default_rng(seed)
    shape = (3, size, size) if n is None else (n, 3, size, size)
    return r.random(shape).astype(np.float32), r.random(shape).astype(np.float32)


@pytest.mark.parametrize("arch", M.ARCHS)
def test_build_is_deterministic(arch):
    assert M.build_model(arch, 8, 3).equals(M.build_model(arch, 8, 3))
    assert not M.build_model(arch, 8, 3).equals(M.build_model(arch, 8, 4))


def test_param_counts_match_layer_table():
    # fcef width 8, (cin*cout*9 + cout) per 3x3 conv:
    # 6->8: 440, 8->8: 584, 8->16: 1168, 16->16: 2320, 16->32: 4640, 32->32: 9248,
    # 48->16: 6928, 24->8: 1736, 1x1 head 8->1: 9
    assert M.build_model("fcef-mini", 8).num_params() == 27073
    # the siamese encoder sees 3 channels: first conv 3->8 is 224, i.e. 216 fewer
    assert M.build_model("fcsiam-diff-mini", 8).num_params() == 26857
    for arch in M.ARCHS:
        for w in (4, 8, 12):
            assert M.build_model(arch, w).num_params() == M.expected_param_count(arch, w)
        assert M.build_model(arch, 8).num_params() < 100_000


def test_build_errors():
    with pytest.raises(ValueError):
        M.build_model("fcef-mini", 3)
    with pytest.raises(ValueError):
        M.build_model("unet", 8)


def test_init_bounds_and_zero_bias():
    m = M.build_model("fcef-mini", 8, 0)
    w = m.params["enc1.conv1.weight"]
    assert np.abs(w).max() <= np.sqrt(6.0 / (6 * 9))
    assert all(not m.params[k].any() for k in m.params if k.endswith(".bias"))


@pytest.mark.parametrize("arch", M.ARCHS)
@pytest.mark.parametrize("size", [4, 8, 12])
def test_output_shape_and_range(arch, size):
    m = M.build_model(arch, 4, 1)
    x1, x2 = pair(0, 2, size)
    cm = M.forward(m, x1, x2).data
    assert cm.shape == (2, 1, size, size)
    assert np.all((cm >= 0) & (cm <= 1))
    assert M.change_map(m, x1[0], x2[0]).shape == (size, size)


def test_forward_rejects_bad_sizes():
    m = M.build_model("fcef-mini", 4)
    with pytest.raises(ValueError):
        M.forward(m, np.zeros((3, 6, 6)), np.zeros((3, 6, 6)))
    with pytest.raises(ValueError):
        M.forward(m, np.zeros((3, 8, 8)), np.zeros((3, 4, 4)))


def test_fcef_is_order_sensitive():
    m = M.build_model("fcef-mini", 8, 0)
    x1, x2 = pair(5)
    assert not np.array_equal(M.change_map(m, x1, x2), M.change_map(m, x2, x1))


def test_siamese_identical_inputs_give_zero_difference_features():
    m = M.build_model("fcsiam-diff-mini", 8, 0)
    x, _ = pair(2, 1)
    p = M.as_tensors(m)
    for d in M.difference_features(p, T.Tensor(x), T.Tensor(x)):
        assert not d.data.any()


@given(st.integers(0, 2**16), st.integers(0, 5))
def test_siamese_is_swap_invariant(data_seed, model_seed):
    m = M.build_model("fcsiam-diff-mini", 4, model_seed)
    x1, x2 = pair(data_seed, 2)
    p = M.as_tensors(m)
    for a, b in zip(M.difference_features(p, T.Tensor(x1), T.Tensor(x2)),
                    M.difference_features(p, T.Tensor(x2), T.Tensor(x1))):
        assert a.data.tobytes() == b.data.tobytes()
    assert M.forward(m, x1, x2).data.tobytes() == M.forward(m, x2, x1).data.tobytes()


def test_predict_mask_examples():
    np.testing.assert_array_equal(M.predict_mask(np.array([0.4, 0.6]), 0.5), [0, 1])
    assert not M.predict_mask(np.full((3, 3), 0.5), 0.5).any()
    np.testing.assert_array_equal(M.predict_mask(np.array([0.51, 0.49, 0.99])), [1, 0, 1])
    with pytest.raises(ValueError):
        M.predict_mask(np.zeros(2), 1.0)


def test_prediction_is_deterministic():
    m = M.build_model("fcef-mini", 8, 0)
    x1, x2 = pair(9)
    a = M.predict_mask(M.change_map(m, x1, x2))
    b = M.predict_mask(M.change_map(m, x1, x2))
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("arch", M.ARCHS)
def test_end_to_end_gradient_check(arch):
    from mtkd.cli import grad_check_models
    assert grad_check_models(arch, seed=0).max_rel_error <= 1e-4


@pytest.mark.parametrize("arch", M.ARCHS)
def test_checkpoint_round_trip_is_bit_exact(tmp_path, arch):
    m = M.build_model(arch, 8, 7)
    m.params["head.bias"][:] = 0.123
    M.save_checkpoint(m, tmp_path / "a.ckpt")
    back = M.load_checkpoint(tmp_path / "a.ckpt")
    assert back.equals(m)
    blob = (tmp_path / "a.ckpt").read_bytes()
    assert blob.startswith(b"MTKDCKPT1")
    M.save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "b.ckpt").read_bytes() == blob


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="magic"):
        M.load_checkpoint(tmp_path / "x.ckpt")
    m = M.build_model("fcef-mini", 4)
    M.save_checkpoint(m, tmp_path / "t.ckpt")
    blob = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[:-10])
    with pytest.raises(ValueError, match="truncated"):
        M.load_checkpoint(tmp_path / "t.ckpt")
