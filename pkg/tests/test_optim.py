import numpy as np
import pytest

from cunet import optim
from cunet import tensor as T
from cunet.errors import ContractViolation, FormatError, NumericError


def single(value):
    p = optim.ParamSet()
    p.add("theta", np.array([value]))
    return p


def test_first_step_is_gradient_step():
    p = single(1.0)
    p["theta"].grad = np.array([1.0])
    optim.sgd_momentum_step(p, 0.1, 0.9, 0.0)
    assert p["theta"].data[0] == pytest.approx(0.9, abs=1e-15)


def test_velocity_carries_over():
    p = single(1.0)
    p["theta"].grad = np.array([1.0])
    optim.sgd_momentum_step(p, 0.1, 0.9, 0.0)
    p["theta"].grad = np.array([0.0])
    optim.sgd_momentum_step(p, 0.1, 0.9, 0.0)
    # zero gradient: the step is lr * momentum * v
    assert p["theta"].data[0] == pytest.approx(0.9 - 0.1 * 0.9, abs=1e-15)


def test_weight_decay_enters_velocity():
    p = single(2.0)
    p["theta"].grad = np.array([0.0])
    optim.sgd_momentum_step(p, 0.5, 0.0, 0.1)
    assert p["theta"].data[0] == pytest.approx(2.0 - 0.5 * 0.2, abs=1e-15)


def _scalar_momentum(theta, lr, m, steps):
    v = 0.0
    out = []
    for _ in range(steps):
        v = m * v + 2 * theta
        theta -= lr * v
        out.append(theta)
    return out


def test_quadratic_bowl_matches_scalar_recursion():
    p = optim.ParamSet()
    t = p.add("x", np.array([3.0, -2.0]))
    expected = [_scalar_momentum(3.0, 0.05, 0.9, 200), _scalar_momentum(-2.0, 0.05, 0.9, 200)]
    for step in range(200):
        p.zero_grad()
        T.square_sum(t).backward()
        optim.sgd_momentum_step(p, 0.05, 0.9, 0.0)
        np.testing.assert_allclose(t.data, [expected[0][step], expected[1][step]], rtol=0, atol=1e-12)
    assert T.square_sum(t).item() < 1e-3


def test_missing_gradient():
    p = single(1.0)
    with pytest.raises(ContractViolation):
        optim.sgd_momentum_step(p, 0.1, 0.9, 0.0)


def test_divergence_detected():
    p = single(1e308)
    p["theta"].grad = np.array([1e308])
    with pytest.raises(NumericError):
        optim.sgd_momentum_step(p, 10.0, 0.0, 0.0)


def test_duplicate_name():
    p = single(1.0)
    with pytest.raises(ContractViolation):
        p.add("theta", np.zeros(1))


def _params(seed=0):
    rng = np.random.default_rng(seed)
    p = optim.ParamSet()
    p.add("conv.w", rng.standard_normal((3, 2, 3, 3)))
    p.add("conv.b", rng.standard_normal(3))
    p.add("scalar", np.array(1.5))
    for name, t in p:
        p.momentum[name][...] = rng.standard_normal(t.data.shape)
    return p


class TestCheckpoint:
    def test_round_trip_is_byte_exact(self, tmp_path):
        p = _params()
        optim.save_checkpoint(tmp_path / "a.ckpt", p)
        q = _params(seed=1)
        optim.load_checkpoint(tmp_path / "a.ckpt", q)
        for (n, a), (_, b) in zip(p, q):
            assert a.data.tobytes() == b.data.tobytes()
            assert p.momentum[n].tobytes() == q.momentum[n].tobytes()
        optim.save_checkpoint(tmp_path / "b.ckpt", q)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_without_momentum(self, tmp_path):
        p = _params()
        optim.save_checkpoint(tmp_path / "a.ckpt", p, include_momentum=False)
        state = optim.load_checkpoint(tmp_path / "a.ckpt")
        assert list(state) == p.names()
        q = _params(1)
        q.load_state(state)
        assert not any(m.any() for m in q.momentum.values())

    def test_header_layout(self, tmp_path):
        p = optim.ParamSet()
        p.add("ab", np.array([1.0, 2.0]))
        optim.save_checkpoint(tmp_path / "c.ckpt", p, include_momentum=False)
        raw = (tmp_path / "c.ckpt").read_bytes()
        header = b"CUN1" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + b"ab"
        header += (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert raw == header + np.array([1.0, 2.0], "<f8").tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(FormatError) as e:
            optim.load_checkpoint(path)
        assert e.value.offset == 0 and "offset 0" in str(e.value)

    def test_truncated_payload(self, tmp_path):
        optim.save_checkpoint(tmp_path / "a.ckpt", _params())
        raw = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:-3])
        with pytest.raises(FormatError):
            optim.load_checkpoint(tmp_path / "t.ckpt")

    def test_truncated_header(self, tmp_path):
        (tmp_path / "h.ckpt").write_bytes(b"CUN1\x05\x00")
        with pytest.raises(FormatError) as e:
            optim.load_checkpoint(tmp_path / "h.ckpt")
        assert e.value.offset == 4

    def test_shape_mismatch_on_load(self, tmp_path):
        optim.save_checkpoint(tmp_path / "a.ckpt", _params())
        q = optim.ParamSet()
        q.add("conv.w", np.zeros((1, 1, 1, 1)))
        with pytest.raises(ContractViolation):
            optim.load_checkpoint(tmp_path / "a.ckpt", q)
