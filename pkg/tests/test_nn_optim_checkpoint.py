import numpy as np
import pytest

from partsum import checkpoint
from partsum import tensor as T
from partsum.checkpoint import CheckpointError
from partsum.nn import MLP, Linear, substituted
from partsum.optim import SGD, Adam, clip_grad_norm
from partsum.tensor import Tensor


def test_linear_init_bounds_and_zero_bias():
    lin = Linear(16, 5, np.random.default_rng(0))
    assert np.all(np.abs(lin.weight.data) <= 1 / 4)
    assert np.all(lin.bias.data == 0)


def test_parameter_names_are_deterministic():
    a = MLP([3, 4, 2], np.random.default_rng(0))
    b = MLP([3, 4, 2], np.random.default_rng(1))
    assert list(a.parameters()) == list(b.parameters())


def test_state_roundtrip_and_shape_check():
    a = MLP([3, 4, 2], np.random.default_rng(0))
    b = MLP([3, 4, 2], np.random.default_rng(1))
    b.load_state(a.state())
    x = np.ones((1, 3))
    np.testing.assert_array_equal(a(Tensor(x)).data, b(Tensor(x)).data)
    bad = a.state()
    name = next(iter(bad))
    bad[name] = np.zeros((9, 9))
    with pytest.raises(T.ShapeError):
        b.load_state(bad)


def test_substituted_restores_parameters():
    lin = Linear(2, 2, np.random.default_rng(0))
    original = lin.weight
    with substituted(lin, {"weight": Tensor(np.eye(2))}):
        np.testing.assert_array_equal(lin(Tensor([[1.0, 2.0]])).data, [[1.0, 2.0]])
    assert lin.weight is original


def test_sgd_momentum_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD({"p": p}, lr=0.1, momentum=0.5)
    p.grad = np.array([2.0])
    opt.step()
    opt.step()
    # v1 = 2, v2 = 0.5 * 2 + 2 = 3 -> 1 - 0.2 - 0.3
    assert p.data[0] == pytest.approx(0.5)


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.01)
    p.grad = np.array([3.0, -0.5])
    opt.step()
    np.testing.assert_allclose(p.data, [0.99, -0.99], atol=1e-8)


def test_adam_state_roundtrip_continues_identically():
    def run(split):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        for i in range(4):
            if i == split:
                state, data = opt.state(), p.data.copy()
                p = Tensor(data, requires_grad=True)
                opt = Adam({"p": p}, lr=0.1)
                opt.load_state(state)
            p.grad = np.array([np.sin(i), np.cos(i)])
            opt.step()
        return p.data
    np.testing.assert_array_equal(run(None), run(2))


def test_clip_grad_norm():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    assert clip_grad_norm({"p": p}, 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(p.grad) == pytest.approx(1.0)


def test_checkpoint_roundtrip_bytes_and_layout(tmp_path):
    entries = {"a": np.arange(6.0).reshape(2, 3), "b.c": np.array([1.5])}
    blob = checkpoint.dumps(entries)
    assert blob[:8] == b"PSTCKPT1"
    # header, then per entry: name len, name, ndim, dims, data
    assert len(blob) == 8 + 4 + (4 + 1 + 4 + 8 + 48) + (4 + 3 + 4 + 4 + 8)
    back = checkpoint.loads(blob)
    assert list(back) == ["a", "b.c"]
    for k in entries:
        np.testing.assert_array_equal(back[k], entries[k])
    path = tmp_path / "x.ckpt"
    checkpoint.save(path, entries)
    assert path.read_bytes() == blob


@pytest.mark.parametrize("blob", [b"NOTACKPT", checkpoint.dumps({"a": np.ones(3)})[:-4],
                                  checkpoint.dumps({"a": np.ones(3)}) + b"x"])
def test_checkpoint_rejects_corruption(blob):
    with pytest.raises(CheckpointError):
        checkpoint.loads(blob)
