import numpy as np
import pytest

from cunet import model as M
from cunet import tensor as T
from cunet.errors import ConfigError, ContractViolation, NumericError


def small(depth=2, base=4, **kw):
    return M.CUNet(M.CUNetConfig(depth=depth, base_channels=base, **kw))


@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_supervision_counts_and_shapes(depth):
    m = small(depth, base=2)
    size = 2**depth
    out = m(np.random.default_rng(0).standard_normal((2, 4, size, size)))
    assert len(out.aux) == 2 * depth == m.config.aux_heads
    assert out.branch1.shape == (2, 2, size, size)
    assert out.branch2.shape == (2, 4, size, size)
    for a in out.aux[:depth]:
        assert a.shape == (2, 2, size, size)
    for a in out.aux[depth:]:
        assert a.shape == (2, 4, size, size)
    for o in out.all():
        assert np.abs(o.data.sum(axis=1) - 1).max() <= 1e-12
        assert (o.data >= 0).all()


def test_zero_input_gives_uniform_output():
    out = small()(np.zeros((1, 4, 8, 8)))
    np.testing.assert_allclose(out.branch1.data, 0.5, atol=1e-15)
    np.testing.assert_allclose(out.branch2.data, 0.25, atol=1e-15)


def test_between_net_wiring():
    cfg = M.CUNetConfig(depth=3, base_channels=4)
    linked, plain = M.CUNet(cfg), M.CUNet(M.CUNetConfig(depth=3, base_channels=4, between_net=False))
    widths = cfg.widths()
    assert plain.unet2.encoder_in_channels == [widths[0], widths[0], widths[1]]
    assert [a - b for a, b in zip(linked.unet2.encoder_in_channels, plain.unet2.encoder_in_channels)] == widths[:3]
    assert linked.unet1.encoder_in_channels == plain.unet1.encoder_in_channels == [4, 4, 8]


def test_unet2_depends_on_unet1_features():
    m = small()
    x = np.random.default_rng(1).standard_normal((1, 4, 8, 8))
    base = m(x).branch2.data.copy()
    m.params["u1.dec0.project.w"].data += 0.5
    assert not np.allclose(m(x).branch2.data, base)


def test_batch_items_are_independent():
    m = small()
    x = np.random.default_rng(2).standard_normal((3, 4, 8, 8))
    joint = m(x)
    for i in range(3):
        alone = m(x[i : i + 1])
        for a, b in zip(joint.all(), alone.all()):
            assert np.abs(a.data[i] - b.data[0]).max() <= 1e-12


def test_seeded_construction():
    a, b = small(seed=5), small(seed=5)
    for (n1, t1), (n2, t2) in zip(a.params, b.params):
        assert n1 == n2 and np.array_equal(t1.data, t2.data)
    c = small(seed=6)
    assert not np.array_equal(a.params["u1.enc0.conv1.w"].data, c.params["u1.enc0.conv1.w"].data)


def test_cascade_has_more_parameters_than_one_unet():
    cfg = M.CUNetConfig(depth=2, base_channels=4)
    assert M.CUNet(cfg).params.count() > M.single_unet_parameter_count(cfg)


class TestResidualBlock:
    def test_zero_residual_is_relu(self):
        block = M.build_residual_block(3, 3, seed=0)
        block.conv1.w.data[...] = 0
        block.conv2.w.data[...] = 0
        x = np.random.default_rng(3).standard_normal((2, 3, 5, 5))
        np.testing.assert_array_equal(block(T.Tensor(x)).data, np.maximum(x, 0))

    def test_projection_when_widths_differ(self):
        assert M.build_residual_block(3, 5).project is not None
        assert M.build_residual_block(3, 3).project is None
        out = M.build_residual_block(3, 5)(T.Tensor(np.ones((1, 3, 4, 4))))
        assert out.shape == (1, 5, 4, 4)

    def test_bad_channels(self):
        with pytest.raises(ContractViolation):
            M.build_residual_block(0, 3)


class TestErrors:
    def test_indivisible_size(self):
        with pytest.raises(ConfigError):
            small(depth=3)(np.zeros((1, 4, 12, 12)))

    def test_wrong_channels(self):
        with pytest.raises(ContractViolation):
            small()(np.zeros((1, 3, 8, 8)))

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            M.CUNetConfig(depth=0).validate()
        with pytest.raises(ConfigError):
            M.CUNetConfig(branch2_classes=3).validate()

    def test_non_finite_names_layer(self):
        m = small()
        m.params["u1.enc1.conv1.w"].data[...] = np.inf
        with pytest.raises(NumericError, match="u1.enc1"), np.errstate(invalid="ignore", over="ignore"):
            m(np.random.default_rng(0).standard_normal((1, 4, 8, 8)))


def test_config_file_round_trip(tmp_path):
    cfg = M.CUNetConfig(depth=3, base_channels=8, seed=4, between_net=False)
    cfg.save(tmp_path / "m.json")
    assert M.CUNetConfig.load(tmp_path / "m.json") == cfg
    (tmp_path / "bad.json").write_text('{"depth": 2, "width": 3}')
    with pytest.raises(ConfigError):
        M.CUNetConfig.load(tmp_path / "bad.json")


def _fuse_oracle(p1, p2, mask):
    out = np.zeros(mask.shape, np.uint8)
    for i in range(mask.shape[0]):
        for j in range(mask.shape[1]):
            if mask[i, j] or p1[1, i, j] <= p1[0, i, j]:
                continue
            best = max(range(1, 4), key=lambda c: (p2[c, i, j], -c))
            out[i, j] = (1, 2, 4)[best - 1]
    return out


class TestFusion:
    def test_matches_pixel_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            p1 = rng.dirichlet([1, 1], size=(6, 7)).transpose(2, 0, 1)
            p2 = rng.dirichlet([1, 1, 1, 1], size=(6, 7)).transpose(2, 0, 1)
            mask = rng.random((6, 7)) < 0.2
            np.testing.assert_array_equal(M.fuse_predictions(p1, p2, mask), _fuse_oracle(p1, p2, mask))

    def test_mask_forces_background(self):
        p1 = np.zeros((2, 3, 3))
        p1[1] = 1
        p2 = np.zeros((4, 3, 3))
        p2[3] = 1
        mask = np.zeros((3, 3), bool)
        mask[0] = True
        out = M.fuse_predictions(p1, p2, mask)
        assert (out[0] == 0).all() and (out[1:] == 4).all()
        assert set(np.unique(out)) <= {0, 1, 2, 4} and out.dtype == np.uint8

    def test_substructure_ignored_without_tumor(self):
        p1 = np.zeros((2, 2, 2))
        p1[0] = 1
        p2 = np.full((4, 2, 2), 0.25)
        assert not M.fuse_predictions(p1, p2, np.zeros((2, 2), bool)).any()

    def test_batched(self):
        rng = np.random.default_rng(5)
        p1 = rng.dirichlet([1, 1], size=(2, 4, 4)).transpose(0, 3, 1, 2)
        p2 = rng.dirichlet([1, 1, 1, 1], size=(2, 4, 4)).transpose(0, 3, 1, 2)
        mask = rng.random((2, 4, 4)) < 0.3
        out = M.fuse_predictions(p1, p2, mask)
        for i in range(2):
            np.testing.assert_array_equal(out[i], M.fuse_predictions(p1[i], p2[i], mask[i]))

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            M.fuse_predictions(np.zeros((2, 3, 3)), np.zeros((4, 3, 2)), np.zeros((3, 3), bool))
