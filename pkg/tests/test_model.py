import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import conv2d_reference, numeric_grad
from ssl_lab import model as M
from ssl_lab import tensor as T
from ssl_lab.tensor import Tensor


def as_float64(params: M.ModelParams) -> M.ModelParams:
    for t in params.tensors.values():
        t.data = t.data.astype(np.float64)
    for k, v in params.buffers.items():
        params.buffers[k] = v.astype(np.float64)
    return params


@pytest.fixture(scope="module")
def mini():
    return M.build(M.sononet_mini(num_classes=5, input_shape=(8, 8), width=2), seed=3)


def test_full_preset_topology():
    cfg = M.sononet_full()
    assert cfg.num_convs == 15
    assert cfg.num_pools == 4
    kinds = [k for *_, k in M._layer_plan(cfg)]
    assert kinds.count("pool") == 4
    assert kinds.count("conv") + kinds.count("conv_out") == 15


def test_mini_preset_topology_and_size():
    cfg = M.sononet_mini()
    assert cfg.num_convs == 7
    assert cfg.num_pools == 2
    wide = M.build(M.ModelConfig(((2, 16), (2, 32), (3, 64)), 14), seed=0)
    assert wide.num_parameters() < 500_000


def test_indivisible_input_rejected():
    with pytest.raises(ValueError, match="divisible"):
        M.ModelConfig(((1, 4), (1, 4), (1, 4)), 3, input_shape=(30, 32))


def test_build_is_deterministic():
    a = M.build(M.sononet_mini(), seed=11)
    b = M.build(M.sononet_mini(), seed=11)
    c = M.build(M.sononet_mini(), seed=12)
    for name in a.tensors:
        assert a.tensors[name].data.tobytes() == b.tensors[name].data.tobytes()
    assert any(a.tensors[n].data.tobytes() != c.tensors[n].data.tobytes() for n in a.tensors)


def test_forward_shape_and_shape_errors(mini):
    x = np.random.default_rng(0).random((3, 1, 8, 8)).astype(np.float32)
    assert M.forward(mini, x, mode="eval").shape == (3, 5)
    with pytest.raises(ValueError, match="does not match"):
        M.forward(mini, np.zeros((3, 1, 16, 16), np.float32))
    with pytest.raises(ValueError, match="mode"):
        M.forward(mini, x, mode="test")


def test_identical_images_identical_logits(mini):
    img = np.random.default_rng(1).random((1, 1, 8, 8)).astype(np.float32)
    out = M.forward(mini, np.repeat(img, 4, axis=0), mode="eval").data
    assert all(np.array_equal(out[0], row) for row in out[1:])


@settings(max_examples=20, deadline=None)
@given(st.permutations(range(6)))
def test_eval_forward_is_permutation_equivariant(perm):
    params = M.build(M.sononet_mini(num_classes=4, input_shape=(8, 8), width=2), seed=5)
    x = np.random.default_rng(2).random((6, 1, 8, 8)).astype(np.float32)
    perm = list(perm)
    a = M.forward(params, x, mode="eval").data
    b = M.forward(params, x[perm], mode="eval").data
    np.testing.assert_allclose(b, a[perm], rtol=1e-6, atol=1e-6)


def test_full_preset_forward_runs_on_small_input():
    cfg = M.sononet_full(num_classes=3, input_shape=(16, 16))
    params = M.build(cfg, seed=0)
    assert M.forward(params, np.zeros((1, 1, 16, 16), np.float32), mode="eval").shape == (1, 3)


def test_end_to_end_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    params = as_float64(M.build(M.sononet_mini(num_classes=4, input_shape=(8, 8), width=2), seed=9))
    x = rng.random((4, 1, 8, 8))
    y = rng.integers(0, 4, 4)

    def loss_value():
        snapshot = {k: v.copy() for k, v in params.buffers.items()}
        val = T.cross_entropy(T.softmax(M.forward(params, x, mode="train")), y).item()
        params.buffers.update(snapshot)
        return val

    snapshot = {k: v.copy() for k, v in params.buffers.items()}
    params.zero_grad()
    T.cross_entropy(T.softmax(M.forward(params, x, mode="train")), y).backward()
    params.buffers.update(snapshot)

    checked = 0
    names = sorted(params.tensors)
    for trial in range(60):
        name = names[rng.integers(len(names))]
        t = params.tensors[name]
        i = int(rng.integers(t.data.size))
        num = numeric_grad(loss_value, t.data, coords=[i]).reshape(-1)[i]
        ana = t.grad.reshape(-1)[i]
        assert abs(num - ana) <= 1e-2 * max(abs(num), abs(ana), 1e-4), (name, i, num, ana)
        checked += 1
    assert checked >= 50


def test_tiny_batch_loss_decreases_under_adam():
    from ssl_lab.train import Adam

    rng = np.random.default_rng(4)
    params = M.build(M.sononet_mini(num_classes=3, input_shape=(8, 8), width=2), seed=1)
    x = rng.random((6, 1, 8, 8)).astype(np.float32)
    y = np.array([0, 1, 2, 0, 1, 2])
    opt = Adam(1e-2)
    losses = []
    for _ in range(20):
        params.zero_grad()
        loss = T.cross_entropy(T.softmax(M.forward(params, x, mode="train")), y)
        losses.append(loss.item())
        loss.backward()
        opt.step(params)
    assert losses[-1] < losses[0]


def test_checkpoint_round_trip(tmp_path, mini):
    path = tmp_path / "ckpt.bin"
    M.save_checkpoint(mini, path)
    loaded = M.load_checkpoint(path)
    assert loaded.config == mini.config
    for name, arr in mini.state().items():
        assert loaded.state()[name].tobytes() == arr.astype(np.float32).tobytes()
    x = np.random.default_rng(3).random((2, 1, 8, 8)).astype(np.float32)
    assert M.predict(loaded, x).tobytes() == M.predict(mini, x).tobytes()
    # byte-stable: saving the loaded copy reproduces the file
    M.save_checkpoint(loaded, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="not a checkpoint"):
        M.load_checkpoint(bad)


def test_recalibrate_bn_first_layer_matches_reference_statistics(mini):
    rng = np.random.default_rng(4)
    images = rng.uniform(0, 1, size=(10, 8, 8)).astype(np.float32)
    before = {k: v.copy() for k, v in mini.buffers.items()}
    # uneven batches: 4 + 4 + 2
    cal = M.recalibrate_bn(mini, images, batch_size=4)
    for k, v in mini.buffers.items():
        np.testing.assert_array_equal(v, before[k])

    k = mini.tensors["block0.conv0.kernel"].data.astype(np.float64)
    b = mini.tensors["block0.conv0.bias"].data.astype(np.float64)
    pre = conv2d_reference(images[:, None].astype(np.float64), k, b, "same")
    means, variances, sizes = [], [], []
    for chunk in (pre[:4], pre[4:8], pre[8:]):
        flat = chunk.transpose(1, 0, 2, 3).reshape(k.shape[0], -1)
        means.append(flat.mean(axis=1))
        variances.append(flat.var(axis=1, ddof=1))
        sizes.append(len(chunk))
    w = np.asarray(sizes, dtype=np.float64)[:, None] / len(images)
    np.testing.assert_allclose(cal.buffers["block0.conv0.bn_mean"], (w * np.asarray(means)).sum(0), rtol=1e-4, atol=1e-6)
    np.testing.assert_allclose(cal.buffers["block0.conv0.bn_var"], (w * np.asarray(variances)).sum(0), rtol=1e-4, atol=1e-6)


def test_recalibrate_bn_is_deterministic_and_keeps_weights(mini):
    images = np.random.default_rng(5).uniform(0, 1, size=(7, 1, 8, 8)).astype(np.float32)
    a = M.recalibrate_bn(mini, images)
    b = M.recalibrate_bn(mini, images)
    for name in a.buffers:
        np.testing.assert_array_equal(a.buffers[name], b.buffers[name])
    for name, t in a.tensors.items():
        np.testing.assert_array_equal(t.data, mini.tensors[name].data)
