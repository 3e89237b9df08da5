import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vampmix.data import (Dataset, IdxCountMismatchError, IdxMagicError, IdxTruncatedError,
                          SynthSpec, load_csv, load_idx, polygon_means, read_idx, split,
                          synth_mixture, write_idx)


def write_raw(path, magic, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">i", magic))
        f.write(struct.pack(">" + "i" * len(dims), *dims))
        f.write(bytes(payload))


class TestIdx:
    def test_shape_and_scaling(self, tmp_path, rng):
        images = rng.integers(0, 256, (3, 28, 28), dtype=np.uint8)
        images[0, 0, 0], images[0, 0, 1] = 0, 255
        write_idx(tmp_path / "img", images)
        write_idx(tmp_path / "lab", np.array([4, 1, 9], dtype=np.uint8))
        ds = load_idx(tmp_path / "img", tmp_path / "lab")
        assert ds.features.shape == (3, 784)
        assert ds.features[0, 0] == -1.0 and ds.features[0, 1] == 1.0
        np.testing.assert_array_equal(ds.labels, [4, 1, 9])
        assert ds.image_shape == (28, 28) and ds.scaling == "symmetric-unit"
        assert ds.pseudo_transform == "tanh"

    def test_round_trip_bit_exact(self, tmp_path, rng):
        images = rng.integers(0, 256, (2, 5, 4), dtype=np.uint8)
        write_idx(tmp_path / "img", images)
        magic, back = read_idx(tmp_path / "img")
        assert magic == 2051
        np.testing.assert_array_equal(back, images)
        ds = load_idx(tmp_path / "img")
        pixels = np.rint((ds.features + 1.0) * 127.5).astype(np.uint8).reshape(images.shape)
        np.testing.assert_array_equal(pixels, images)

    def test_header_bytes(self, tmp_path):
        write_idx(tmp_path / "lab", np.array([7, 8], dtype=np.uint8))
        raw = (tmp_path / "lab").read_bytes()
        assert raw == b"\x00\x00\x08\x01\x00\x00\x00\x02\x07\x08"

    def test_gzip(self, tmp_path, rng):
        images = rng.integers(0, 256, (2, 3, 3), dtype=np.uint8)
        write_idx(tmp_path / "img", images)
        with gzip.open(tmp_path / "img.gz", "wb") as f:
            f.write((tmp_path / "img").read_bytes())
        np.testing.assert_array_equal(read_idx(tmp_path / "img.gz")[1], images)

    def test_wrong_magic(self, tmp_path):
        write_raw(tmp_path / "bad", 1234, (1,), [0])
        with pytest.raises(IdxMagicError):
            read_idx(tmp_path / "bad")

    def test_label_file_as_images(self, tmp_path):
        write_idx(tmp_path / "lab", np.array([1], dtype=np.uint8))
        with pytest.raises(IdxMagicError):
            load_idx(tmp_path / "lab")

    @pytest.mark.parametrize("blob", [b"\x00\x00", b"\x00\x00\x08\x03\x00\x00\x00\x01",
                                      b"\x00\x00\x08\x03" + struct.pack(">iii", 1, 2, 2) + b"\x00"])
    def test_truncated(self, tmp_path, blob):
        (tmp_path / "t").write_bytes(blob)
        with pytest.raises(IdxTruncatedError):
            read_idx(tmp_path / "t")

    def test_count_mismatch(self, tmp_path):
        write_idx(tmp_path / "img", np.zeros((2, 2, 2), dtype=np.uint8))
        write_idx(tmp_path / "lab", np.zeros(3, dtype=np.uint8))
        with pytest.raises(IdxCountMismatchError):
            load_idx(tmp_path / "img", tmp_path / "lab")

    def test_errors_are_distinct(self):
        kinds = {IdxMagicError, IdxTruncatedError, IdxCountMismatchError}
        for a in kinds:
            for b in kinds - {a}:
                assert not issubclass(a, b)

    def test_limit(self, tmp_path):
        write_idx(tmp_path / "img", np.zeros((5, 2, 2), dtype=np.uint8))
        write_idx(tmp_path / "lab", np.arange(5, dtype=np.uint8))
        ds = load_idx(tmp_path / "img", tmp_path / "lab", limit=3)
        assert len(ds) == 3 and list(ds.labels) == [0, 1, 2]

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5))))
    def test_features_in_unit_box(self, tmp_path_factory, images):
        path = tmp_path_factory.mktemp("idx") / "img"
        write_idx(path, images)
        f = load_idx(path).features
        assert f.min() >= -1.0 and f.max() <= 1.0


class TestCsv:
    def test_header_and_labels(self, tmp_path):
        (tmp_path / "d.csv").write_text("a,b,label\n1.5,2,0\n-3,4e-1,1\n", encoding="utf-8")
        ds = load_csv(tmp_path / "d.csv", labels=True)
        np.testing.assert_array_equal(ds.features, [[1.5, 2.0], [-3.0, 0.4]])
        np.testing.assert_array_equal(ds.labels, [0, 1])

    def test_no_header(self, tmp_path):
        (tmp_path / "d.csv").write_text("1,2\n3,4\n", encoding="utf-8")
        np.testing.assert_array_equal(load_csv(tmp_path / "d.csv").features, [[1, 2], [3, 4]])

    def test_empty(self, tmp_path):
        (tmp_path / "d.csv").write_text("x,y\n", encoding="utf-8")
        with pytest.raises(ValueError):
            load_csv(tmp_path / "d.csv")


class TestDataset:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[np.nan]]))

    def test_label_length(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), np.zeros(2))

    def test_unsplit_views_cover_everything(self):
        ds = Dataset(np.arange(6.0).reshape(3, 2), np.arange(3))
        np.testing.assert_array_equal(ds.train_features(), ds.features)
        np.testing.assert_array_equal(ds.validation_labels(), [0, 1, 2])


class TestSynth:
    def test_zero_scale_sits_on_means(self):
        spec = SynthSpec(n_components=3, dim=2, points_per_component=5, scale=1.0, seed=1)
        spec.scales = [0.0, 0.0, 0.0]
        ds = synth_mixture(spec)
        np.testing.assert_array_equal(ds.features, np.repeat(spec.resolved_means(), 5, axis=0))

    def test_sample_means_clt(self):
        spec = SynthSpec(n_components=4, dim=3, points_per_component=2000, scale=1.5, seed=3)
        ds = synth_mixture(spec)
        for j, mu in enumerate(spec.resolved_means()):
            got = ds.features[ds.labels == j].mean(0)
            assert np.all(np.abs(got - mu) < 4 * 1.5 / np.sqrt(2000))

    def test_label_histogram(self):
        ds = synth_mixture(SynthSpec(points_per_component=17))
        np.testing.assert_array_equal(np.bincount(ds.labels), [17, 17, 17])

    def test_deterministic(self):
        a, b = synth_mixture(SynthSpec(seed=9)), synth_mixture(SynthSpec(seed=9))
        assert a.features.tobytes() == b.features.tobytes()

    def test_polygon_separation(self):
        m = polygon_means(3, 2, 8.0)
        d = np.linalg.norm(m[:, None] - m[None], axis=-1)
        np.testing.assert_allclose(d[~np.eye(3, dtype=bool)], 8.0)
        np.testing.assert_allclose(np.diff(polygon_means(4, 1, 2.0)[:, 0]), 2.0)

    def test_explicit_means_must_differ(self):
        with pytest.raises(ValueError):
            synth_mixture(SynthSpec(n_components=2, dim=1, means=[1.0, 1.0]))


class TestSplit:
    def test_disjoint_and_covering(self):
        ds = split(Dataset(np.zeros((50, 1))), 0.2, 4)
        assert len(ds.val_idx) == 10
        assert not set(ds.train_idx) & set(ds.val_idx)
        np.testing.assert_array_equal(np.sort(np.concatenate([ds.train_idx, ds.val_idx])), np.arange(50))

    def test_same_seed_same_folds(self):
        a = split(Dataset(np.zeros((30, 1))), 0.3, 7)
        b = split(Dataset(np.zeros((30, 1))), 0.3, 7)
        np.testing.assert_array_equal(a.val_idx, b.val_idx)
        c = split(Dataset(np.zeros((30, 1))), 0.3, 8)
        assert not np.array_equal(a.val_idx, c.val_idx)

    @pytest.mark.parametrize("frac", [0.0, 1.0, 0.01, 0.99])
    def test_empty_fold(self, frac):
        with pytest.raises(ValueError):
            split(Dataset(np.zeros((10, 1))), frac, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 200), st.floats(0.05, 0.95), st.integers(0, 2**31))
    def test_partition_property(self, n, frac, seed):
        n_val = int(round(frac * n))
        if n_val in (0, n):
            return
        ds = split(Dataset(np.zeros((n, 1))), frac, seed)
        assert len(ds.train_idx) + len(ds.val_idx) == n
        assert len(np.union1d(ds.train_idx, ds.val_idx)) == n
