import numpy as np
import pytest

from cunet import data
from cunet.errors import FormatError
from cunet.metrics import region_masks


def phantom(seed, size=32, q=1.0):
    return data.generate_phantom(np.random.default_rng(seed), size, q, f"p{seed}")


class TestGenerator:
    def test_deterministic(self):
        a, b = phantom(3), phantom(3)
        assert data.encode_sample(a) == data.encode_sample(b)

    def test_nesting_and_invariants(self):
        for seed in range(50):
            s = phantom(seed, 64, 0.7).validate()
            m = region_masks(s.labels)
            assert not (m.et & ~m.tc).any() and not (m.tc & ~m.wt).any()
            assert not (s.labels.astype(bool) & ~s.brain_mask).any()
            assert s.image.dtype == np.float32

    def test_class_imbalance(self):
        cases = data.synthesize(1000, 64, seed=11)
        tumor = sum(int(np.count_nonzero(c.labels)) for c in cases)
        brain = sum(int(c.brain_mask.sum()) for c in cases)
        assert tumor / brain <= 0.25
        assert 0.6 < np.mean([c.has_tumor for c in cases]) < 0.8

    def test_contrasts(self):
        s = phantom(4, 64)
        flair, t1ce = s.image[0], s.image[2]
        normal = s.brain_mask & (s.labels == 0)
        assert flair[s.labels == 2].mean() > 1.5 * flair[normal].mean()
        assert t1ce[s.labels == 4].mean() > 1.5 * t1ce[normal].mean()


class TestNormalize:
    def test_zero_mean_unit_std(self):
        s = data.normalize_intensity(phantom(1))
        for m in range(4):
            vals = s.image[m][s.brain_mask]
            assert abs(vals.mean()) <= 1e-6 and abs(vals.std() - 1) <= 1e-6
            assert not s.image[m][~s.brain_mask].any()

    def test_constant_modality(self):
        s = phantom(2)
        s.image[1][s.brain_mask] = 7.0
        out = data.normalize_intensity(s)
        assert not out.image[1].any()

    def test_idempotent(self):
        once = data.normalize_intensity(phantom(3))
        twice = data.normalize_intensity(once)
        np.testing.assert_allclose(twice.image, once.image, atol=1e-6)

    def test_empty_brain(self):
        s = phantom(3)
        s.brain_mask[:] = False
        s.labels[:] = 0
        with pytest.raises(ValueError):
            data.normalize_intensity(s)


class TestNonBrainMask:
    def test_matches_generator(self):
        agree = total = 0
        for seed in range(100):
            s = phantom(seed, 32, 0.7)
            nb = data.extract_nonbrain_mask(s)
            agree += int(np.count_nonzero(nb == ~s.brain_mask))
            total += nb.size
        assert agree / total >= 0.999

    def test_background_and_interior(self):
        s = phantom(5)
        nb = data.extract_nonbrain_mask(s)
        assert nb[0, 0] and not nb[16, 16]


class TestAugment:
    def test_identity(self):
        s = phantom(6)
        t = data.apply_transform(s, 0, False)
        np.testing.assert_array_equal(t.image, s.image)
        np.testing.assert_array_equal(t.labels, s.labels)

    def test_four_quarter_turns(self):
        s = phantom(7)
        t = s
        for _ in range(4):
            t = data.apply_transform(t, 1, False)
        np.testing.assert_array_equal(t.image, s.image)
        np.testing.assert_array_equal(t.brain_mask, s.brain_mask)

    def test_shared_transform_and_counts(self):
        s = phantom(8)
        rng = np.random.default_rng(0)
        for _ in range(10):
            t = data.augment(s, rng)
            # a pixel keeps its label and its intensities together
            for lab in (0, 1, 2, 4):
                assert np.count_nonzero(t.labels == lab) == np.count_nonzero(s.labels == lab)
                np.testing.assert_allclose(np.sort(t.image[0][t.labels == lab]), np.sort(s.image[0][s.labels == lab]))
            np.testing.assert_array_equal(t.labels.astype(bool) & ~t.brain_mask, False)

    def test_explicit_coordinates(self):
        s = phantom(9)
        t = data.apply_transform(s, 1, True)
        h = s.labels.shape[0]
        for i, j in [(3, 5), (10, 20), (0, 31)]:
            # rot90 by one quarter: (i, j) -> (h-1-j, i); then horizontal flip: column c -> h-1-c
            ti, tj = h - 1 - j, h - 1 - i
            assert t.labels[ti, tj] == s.labels[i, j]
            np.testing.assert_array_equal(t.image[:, ti, tj], s.image[:, i, j])


class TestFilterAndSplit:
    def test_filter(self):
        cases = [phantom(i, 32, q) for i, q in enumerate([1, 0, 1, 0, 0])]
        kept = data.filter_tumorless(cases)
        assert [c.id for c in kept] == [c.id for c in cases if c.has_tumor]
        assert data.filter_tumorless(kept) == kept
        assert data.filter_tumorless(cases, split="val") == cases

    @pytest.mark.parametrize("n,sizes", [(210, (126, 42, 42)), (10, (6, 2, 2)), (130, (78, 26, 26))])
    def test_split_sizes(self, n, sizes):
        sp = data.split_dataset([f"c{i}" for i in range(n)], np.random.default_rng(0))
        assert (len(sp.train), len(sp.val), len(sp.test)) == sizes
        assert sorted(sp.train + sp.val + sp.test) == sorted(f"c{i}" for i in range(n))

    def test_split_is_seeded(self):
        ids = list(range(20))
        a = data.split_dataset(ids, np.random.default_rng(1))
        b = data.split_dataset(ids, np.random.default_rng(1))
        assert a == b


class TestFileFormat:
    def test_round_trip(self, tmp_path):
        cases = data.synthesize(50, 32, seed=3)
        data.write_dataset(tmp_path, cases)
        back = data.read_dataset(tmp_path)
        assert len(back) == 50
        for a, b in zip(cases, back):
            assert data.encode_sample(a) == data.encode_sample(b)
            assert a.id == b.id
            np.testing.assert_array_equal(a.image, b.image)
            np.testing.assert_array_equal(a.labels, b.labels)
            np.testing.assert_array_equal(a.brain_mask, b.brain_mask)

    def test_same_seed_same_bytes(self, tmp_path):
        for d in ("a", "b"):
            data.write_dataset(tmp_path / d, data.synthesize(5, 32, seed=9))
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()

    def test_bad_magic(self):
        buf = bytearray(data.encode_sample(phantom(1)))
        buf[:4] = b"XXXX"
        with pytest.raises(FormatError) as e:
            data.decode_sample(bytes(buf))
        assert e.value.offset == 0

    def test_truncated(self):
        buf = data.encode_sample(phantom(1))
        with pytest.raises(FormatError) as e:
            data.decode_sample(buf[:-10])
        assert e.value.offset is not None

    def test_invalid_label_rejected(self):
        s = phantom(1)
        buf = bytearray(data.encode_sample(s))
        h, w = s.labels.shape
        buf[len(buf) - 2 * h * w] = 3
        with pytest.raises(FormatError):
            data.decode_sample(bytes(buf))

    def test_split_layout(self, tmp_path):
        cases = data.synthesize(10, 32, seed=0)
        sp = data.split_dataset([c.id for c in cases], np.random.default_rng(0))
        data.write_split_dataset(tmp_path, cases, sp)
        back = data.read_split_dataset(tmp_path)
        assert {k: len(v) for k, v in back.items()} == {"train": 6, "val": 2, "test": 2}
