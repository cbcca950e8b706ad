"""Checks for IDX parsing, mixture generation, and stratified splitting.

The IDX layer is held to byte-exact round trips.  Mixture overlap is judged
against closed-form Gaussian error rates (Phi(-1) = 0.1587 for unit-variance
clusters two apart) using the known optimal threshold as the oracle.
"""

import struct

import numpy as np
import pytest

from evibench.data_io import (
    DatasetBundle,
    MixtureSpec,
    Provenance,
    one_hot,
    read_idx,
    split_dataset,
    stratified_indices,
    synth_mixture,
    write_idx,
)
from evibench.errors import (
    DomainError,
    IdxFormatError,
    ShapeError,
    StratificationError,
)


def make_idx_pair(tmp_path, images, labels):
    """Write a raw IDX pair from uint8 arrays; returns the two paths."""
    n, rows, cols = images.shape
    img_path = tmp_path / "imgs.idx3-ubyte"
    lab_path = tmp_path / "labs.idx1-ubyte"
    with open(img_path, "wb") as f:
        f.write(struct.pack(">iiii", 0x00000803, n, rows, cols))
        f.write(images.tobytes())
    with open(lab_path, "wb") as f:
        f.write(struct.pack(">ii", 0x00000801, n))
        f.write(labels.tobytes())
    return img_path, lab_path


@pytest.fixture
def small_pair(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(20, 5, 4), dtype=np.uint8)
    labels = rng.integers(0, 10, size=20, dtype=np.uint8)
    return make_idx_pair(tmp_path, images, labels), images, labels


class TestReadIdx:
    def test_basic_decode(self, small_pair):
        (img_path, lab_path), images, labels = small_pair
        bundle = read_idx(img_path, lab_path)
        assert bundle.n == 20
        assert bundle.d == 20
        assert bundle.image_shape == (5, 4)
        np.testing.assert_array_equal(bundle.labels, labels.astype(np.int64))

    def test_pixel_scaling(self, tmp_path):
        images = np.array([[[0, 128], [255, 51]]], dtype=np.uint8)
        labels = np.array([9], dtype=np.uint8)
        bundle = read_idx(*make_idx_pair(tmp_path, images, labels))
        np.testing.assert_allclose(
            bundle.features[0], [0.0, 128 / 255, 1.0, 0.2], atol=1e-15
        )
        assert bundle.labels[0] == 9

    def test_wrong_image_magic(self, tmp_path):
        img = tmp_path / "bad.idx"
        with open(img, "wb") as f:
            f.write(struct.pack(">iiii", 0x00000801, 1, 2, 2))
            f.write(bytes(4))
        lab = tmp_path / "labs.idx"
        with open(lab, "wb") as f:
            f.write(struct.pack(">ii", 0x00000801, 1))
            f.write(bytes(1))
        with pytest.raises(IdxFormatError, match="0x00000801"):
            read_idx(img, lab)

    def test_wrong_label_magic(self, small_pair, tmp_path):
        (img_path, _), _, _ = small_pair
        lab = tmp_path / "badlab.idx"
        with open(lab, "wb") as f:
            f.write(struct.pack(">ii", 0x00000803, 20))
            f.write(bytes(20))
        with pytest.raises(IdxFormatError, match="magic"):
            read_idx(img_path, lab)

    def test_truncated_payload(self, tmp_path):
        img = tmp_path / "short.idx"
        with open(img, "wb") as f:
            f.write(struct.pack(">iiii", 0x00000803, 2, 2, 2))
            f.write(bytes(5))  # needs 8
        lab = tmp_path / "labs.idx"
        with open(lab, "wb") as f:
            f.write(struct.pack(">ii", 0x00000801, 2))
            f.write(bytes(2))
        with pytest.raises(IdxFormatError, match="truncated"):
            read_idx(img, lab)

    def test_trailing_bytes(self, tmp_path):
        img = tmp_path / "long.idx"
        with open(img, "wb") as f:
            f.write(struct.pack(">iiii", 0x00000803, 1, 2, 2))
            f.write(bytes(6))  # 2 extra
        lab = tmp_path / "labs.idx"
        with open(lab, "wb") as f:
            f.write(struct.pack(">ii", 0x00000801, 1))
            f.write(bytes(1))
        with pytest.raises(IdxFormatError, match="trailing"):
            read_idx(img, lab)

    def test_count_mismatch(self, tmp_path):
        images = np.zeros((3, 2, 2), dtype=np.uint8)
        labels = np.zeros(3, dtype=np.uint8)
        img_path, _ = make_idx_pair(tmp_path, images, labels)
        lab_path = tmp_path / "two.idx"
        with open(lab_path, "wb") as f:
            f.write(struct.pack(">ii", 0x00000801, 2))
            f.write(bytes(2))
        with pytest.raises(IdxFormatError, match="counts differ"):
            read_idx(img_path, lab_path)


class TestRoundTrip:
    def test_byte_exact(self, small_pair, tmp_path):
        (img_path, lab_path), _, _ = small_pair
        bundle = read_idx(img_path, lab_path)
        out_img = tmp_path / "out_imgs.idx"
        out_lab = tmp_path / "out_labs.idx"
        write_idx(bundle.features, bundle.labels, out_img, out_lab, bundle.image_shape)
        assert out_img.read_bytes() == img_path.read_bytes()
        assert out_lab.read_bytes() == lab_path.read_bytes()

    def test_write_validates_range(self, tmp_path):
        with pytest.raises(DomainError):
            write_idx(
                np.array([[1.5]]), np.array([0]), tmp_path / "a", tmp_path / "b", (1, 1)
            )


class TestBundleValidation:
    def test_rejects_label_range(self):
        with pytest.raises(DomainError):
            DatasetBundle(
                features=np.zeros((2, 2)),
                labels=np.array([0, 5]),
                K=3,
                split_tag="full",
                provenance=Provenance("x"),
            )

    def test_rejects_nonfinite_features(self):
        with pytest.raises(DomainError):
            DatasetBundle(
                features=np.array([[np.nan, 0.0]]),
                labels=np.array([0]),
                K=2,
                split_tag="full",
                provenance=Provenance("x"),
            )

    def test_rejects_count_mismatch(self):
        with pytest.raises(ShapeError):
            DatasetBundle(
                features=np.zeros((3, 2)),
                labels=np.array([0, 1]),
                K=2,
                split_tag="full",
                provenance=Provenance("x"),
            )

    def test_immutable(self):
        b = DatasetBundle(
            features=np.zeros((2, 2)),
            labels=np.array([0, 1]),
            K=2,
            split_tag="full",
            provenance=Provenance("x"),
        )
        with pytest.raises(ValueError):
            b.features[0, 0] = 1.0


class TestSynthMixture:
    def test_deterministic_and_exact_counts(self):
        spec = MixtureSpec(
            K=3,
            means=((0.0, 0.0), (3.0, 0.0), (0.0, 3.0)),
            stddev=1.0,
            samples_per_class=40,
            seed=5,
        )
        a, b = synth_mixture(spec), synth_mixture(spec)
        np.testing.assert_array_equal(a.features, b.features)
        assert [int((a.labels == k).sum()) for k in range(3)] == [40, 40, 40]

    def test_two_unit_clusters_overlap(self):
        # Means two apart, sigma 1: the optimal rule x0 < 1 errs Phi(-1).
        spec = MixtureSpec(
            K=2,
            means=((0.0, 0.0), (2.0, 0.0)),
            stddev=1.0,
            samples_per_class=50_000,
            seed=11,
        )
        b = synth_mixture(spec)
        pred = (b.features[:, 0] > 1.0).astype(int)
        err = float((pred != b.labels).mean())
        assert err == pytest.approx(0.15866, abs=0.01)

    def test_coincident_means_indistinguishable(self):
        spec = MixtureSpec(
            K=2,
            means=((0.0, 0.0), (0.0, 0.0)),
            stddev=1.0,
            samples_per_class=50_000,
            seed=12,
        )
        b = synth_mixture(spec)
        pred = (b.features[:, 0] > 0.0).astype(int)
        err = float((pred != b.labels).mean())
        assert err == pytest.approx(0.5, abs=0.02)

    def test_far_clusters_separable(self):
        spec = MixtureSpec(
            K=2,
            means=((0.0, 0.0), (8.0, 0.0)),
            stddev=1.0,
            samples_per_class=50_000,
            seed=13,
        )
        b = synth_mixture(spec)
        pred = (b.features[:, 0] > 4.0).astype(int)
        assert float((pred != b.labels).mean()) < 5e-4

    def test_per_class_stddev(self):
        spec = MixtureSpec(
            K=2,
            means=((0.0, 0.0), (5.0, 5.0)),
            stddev=(0.5, 2.0),
            samples_per_class=20_000,
            seed=14,
        )
        b = synth_mixture(spec)
        s0 = b.features[b.labels == 0].std(axis=0).mean()
        s1 = b.features[b.labels == 1].std(axis=0).mean()
        assert s0 == pytest.approx(0.5, abs=0.02)
        assert s1 == pytest.approx(2.0, abs=0.05)

    def test_spec_validation(self):
        with pytest.raises(DomainError):
            MixtureSpec(K=2, means=((0.0,), (1.0,)), stddev=0.0)
        with pytest.raises(ShapeError):
            MixtureSpec(K=3, means=((0.0,), (1.0,)))
        with pytest.raises(DomainError):
            MixtureSpec(K=2, means=((0.0,), (np.inf,)))


class TestSplitDataset:
    def balanced_bundle(self, n_per_class=5, k=2):
        rng = np.random.default_rng(1)
        return DatasetBundle(
            features=rng.normal(size=(n_per_class * k, 3)),
            labels=np.repeat(np.arange(k), n_per_class),
            K=k,
            split_tag="full",
            provenance=Provenance("test"),
        )

    def test_80_20_balanced(self):
        b = self.balanced_bundle()
        train, test = split_dataset(b, (0.8, 0.2), seed=0)
        assert train.n == 8 and test.n == 2
        assert set(train.labels) == {0, 1}
        assert set(test.labels) == {0, 1}
        assert train.split_tag == "train" and test.split_tag == "test"

    def test_identity_split(self):
        b = self.balanced_bundle()
        (only,) = split_dataset(b, (1.0,), seed=3)
        np.testing.assert_array_equal(only.features, b.features)
        np.testing.assert_array_equal(only.labels, b.labels)

    def test_deterministic(self):
        b = self.balanced_bundle(n_per_class=50)
        s1 = split_dataset(b, (0.8, 0.2), seed=9)
        s2 = split_dataset(b, (0.8, 0.2), seed=9)
        for a, c in zip(s1, s2):
            np.testing.assert_array_equal(a.features, c.features)

    def test_disjoint_exhaustive(self):
        b = self.balanced_bundle(n_per_class=33, k=3)
        parts = stratified_indices(b.labels, (0.5, 0.3, 0.2), seed=4)
        joined = np.concatenate(parts)
        assert len(joined) == b.n
        assert len(set(joined.tolist())) == b.n

    def test_stratification_within_one(self):
        rng = np.random.default_rng(6)
        labels = rng.integers(0, 4, size=400)
        parts = stratified_indices(labels, (0.7, 0.3), seed=7)
        for frac, idx in zip((0.7, 0.3), parts):
            for cls in range(4):
                expected = frac * (labels == cls).sum()
                actual = (labels[idx] == cls).sum()
                assert abs(actual - expected) <= 1.0

    def test_class_too_small(self):
        labels = np.array([0, 0, 0, 1])
        with pytest.raises(StratificationError):
            stratified_indices(labels, (0.4, 0.3, 0.3), seed=0)

    def test_bad_fractions(self):
        labels = np.array([0, 0, 1, 1])
        with pytest.raises(DomainError):
            stratified_indices(labels, (0.5, 0.4), seed=0)
        with pytest.raises(DomainError):
            stratified_indices(labels, (1.2, -0.2), seed=0)


class TestOneHot:
    def test_basic(self):
        out = one_hot([0, 2, 1], 3)
        np.testing.assert_array_equal(
            out, [[1, 0, 0], [0, 0, 1], [0, 1, 0]]
        )

    def test_range_check(self):
        with pytest.raises(DomainError):
            one_hot([0, 3], 3)
