import struct

import numpy as np
import pytest

from rdcl import container
from rdcl.autograd import Tensor
from rdcl.container import ContainerError, ContainerVersionError
from rdcl.nn import MLP2, SGD, Adam, Linear, LSTMCell


class TestModules:
    def test_linear_shapes_and_init(self, rng):
        lin = Linear(5, 3, rng)
        assert lin.W.shape == (3, 5) and lin.b.shape == (3,)
        assert np.all(np.abs(lin.W.data) <= 1 / np.sqrt(5))
        np.testing.assert_array_equal(lin.b.data, 0.0)

    def test_zero_output_layer(self, rng):
        mlp = MLP2(4, 6, 2, rng, zero_out=True)
        out = mlp(Tensor(rng.standard_normal((3, 4))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_state_dict_round_trip(self, rng):
        a, b = MLP2(3, 4, 2, rng), MLP2(3, 4, 2, rng)
        b.load_state_dict(a.state_dict())
        x = Tensor(rng.standard_normal((2, 3)))
        np.testing.assert_array_equal(a(x).data, b(x).data)

    def test_load_rejects_wrong_shape(self, rng):
        a = Linear(3, 2, rng)
        state = a.state_dict()
        state["W"] = np.zeros((2, 2))
        with pytest.raises(ValueError):
            a.load_state_dict(state)

    def test_lstm_named_parameters(self, rng):
        names = [n for n, _ in LSTMCell(2, 3, rng).named_parameters()]
        assert names == ["W_ih", "W_hh", "b"]


class TestOptimizers:
    def test_sgd_step(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        p.grad = np.array([0.5, -1.0])
        SGD([p], lr=0.1).step()
        np.testing.assert_allclose(p.data, [0.95, 2.1])

    def test_adam_first_step_is_lr_times_sign(self):
        p = Tensor([1.0, -1.0], requires_grad=True)
        opt = Adam([p], lr=0.01)
        p.grad = np.array([3.0, -0.2])
        opt.step()
        np.testing.assert_allclose(p.data, [0.99, -0.99], atol=1e-8)

    def test_adam_minimizes_quadratic(self):
        p = Tensor([3.0, -2.0], requires_grad=True)
        opt = Adam([p], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            (p * p).sum().backward()
            opt.step()
        assert np.abs(p.data).max() < 1e-2

    def test_skips_params_without_grad(self):
        p = Tensor([1.0], requires_grad=True)
        Adam([p]).step()
        assert p.data[0] == 1.0


class TestContainer:
    def test_round_trip_bit_exact(self, rng):
        tensors = {"a": rng.standard_normal((2, 3)), "b": np.arange(4.0), "empty": np.zeros((0, 2))}
        out, meta = container.loads(container.dumps(tensors, "demo", {"x": 1}), kind="demo")
        assert meta == {"x": 1}
        for k, v in tensors.items():
            assert out[k].shape == v.shape
            assert out[k].tobytes() == v.astype("<f8").tobytes()

    def test_layout(self):
        buf = container.dumps({"v": np.array([1.5])}, "demo")
        magic, version, hlen = struct.unpack_from("<8sIQ", buf, 0)
        assert magic == b"RDCLTNSR" and version == 1
        assert struct.unpack_from("<d", buf, 20 + hlen)[0] == 1.5

    @pytest.mark.parametrize("cut", [0, 5, 19, 25, -3])
    def test_truncated(self, cut):
        buf = container.dumps({"v": np.arange(3.0)}, "demo")
        with pytest.raises(ContainerError) as err:
            container.loads(buf[:cut])
        assert isinstance(err.value.offset, int)

    def test_bad_magic(self):
        buf = bytearray(container.dumps({"v": np.arange(3.0)}, "demo"))
        buf[0:8] = b"NOTMAGIC"
        with pytest.raises(ContainerError):
            container.loads(bytes(buf))

    def test_version_mismatch(self):
        buf = bytearray(container.dumps({"v": np.arange(3.0)}, "demo"))
        struct.pack_into("<I", buf, 8, 99)
        with pytest.raises(ContainerVersionError):
            container.loads(bytes(buf))

    def test_kind_mismatch(self):
        with pytest.raises(ContainerError):
            container.loads(container.dumps({}, "a"), kind="b")

    def test_file_round_trip(self, tmp_path):
        container.save(tmp_path / "c.bin", {"w": np.eye(2)}, "demo")
        t, _ = container.load(tmp_path / "c.bin")
        np.testing.assert_array_equal(t["w"], np.eye(2))
