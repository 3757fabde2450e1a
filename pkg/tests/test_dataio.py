import itertools

import numpy as np
import pytest

from novelkit import dataio
from novelkit.dataio import (
    DatasetError,
    EmbeddingDataset,
    MixtureSpec,
    load_dataset,
    save_dataset,
    split_probe,
    synth_mixture,
)
from novelkit.evaluate import clustering_acc
from novelkit.kmeans import kmeans


def _write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestCsv:
    def test_two_rows_mixed_labels(self, tmp_path):
        path = _write(tmp_path, "d,3,labels,1\n0.5,1,2,0\n-1.5,2.25,3,-1\n")
        ds = load_dataset(path)
        assert ds.n == 2 and ds.dim == 3
        assert ds.labels.tolist() == [0, -1]
        assert ds.labelled_mask().tolist() == [True, False]

    def test_without_labels(self, tmp_path):
        ds = load_dataset(_write(tmp_path, "d,2,labels,0\n1,2\n3,4\n"))
        assert ds.labels is None
        np.testing.assert_array_equal(ds.features, [[1, 2], [3, 4]])

    def test_ragged_row_names_row(self, tmp_path):
        path = _write(tmp_path, "d,3,labels,0\n1,2,3\n1,2\n")
        with pytest.raises(DatasetError, match="row 2"):
            load_dataset(path)

    @pytest.mark.parametrize("header", ["x,3,labels,1", "d,three,labels,1", "d,3,labels,2", "d,3"])
    def test_malformed_header(self, tmp_path, header):
        with pytest.raises(DatasetError, match="header"):
            load_dataset(_write(tmp_path, header + "\n1,2,3,0\n"))

    def test_label_out_of_declared_range(self, tmp_path):
        path = _write(tmp_path, "d,1,labels,1\n0.0,0\n1.0,7\n")
        with pytest.raises(DatasetError, match="row 1"):
            load_dataset(path, n_labelled_classes=2, n_unlabelled_classes=3)

    def test_empty_csv_rejected(self, tmp_path):
        with pytest.raises(DatasetError, match="empty"):
            load_dataset(_write(tmp_path, "d,2,labels,0\n"))


class TestBinary:
    def test_empty_binary_rejected(self, tmp_path):
        path = tmp_path / "e.bin"
        save_dataset(EmbeddingDataset(np.zeros((0, 4))), path)
        with pytest.raises(DatasetError, match="empty"):
            load_dataset(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XXXX" + bytes(17))
        with pytest.raises(DatasetError, match="magic"):
            load_dataset(path)

    def test_layout_is_little_endian(self, tmp_path):
        path = tmp_path / "one.bin"
        save_dataset(EmbeddingDataset(np.array([[1.0, -2.0]]), np.array([3])), path)
        raw = path.read_bytes()
        assert raw[:4] == b"NVK1"
        assert int.from_bytes(raw[4:12], "little") == 1
        assert int.from_bytes(raw[12:20], "little") == 2
        assert raw[20] == 1
        assert np.frombuffer(raw[21:37], "<f8").tolist() == [1.0, -2.0]
        assert int.from_bytes(raw[37:45], "little", signed=True) == 3


@pytest.mark.parametrize("suffix", [".csv", ".bin"])
def test_round_trip_bit_exact(tmp_path, suffix):
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(17, 5)) * 10.0 ** rng.integers(-20, 20, size=(17, 5))
    labels = rng.integers(-1, 4, size=17)
    ds = EmbeddingDataset(feats, labels)
    path = tmp_path / f"rt{suffix}"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.features.tobytes() == ds.features.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)


class TestSynth:
    def test_deterministic_bytes(self):
        spec = MixtureSpec(5, 5, 20, 16, 1.0, 10.0, seed=7)
        a = synth_mixture(spec)
        b = synth_mixture(spec)
        for x, y in zip(a, b):
            assert x.features.tobytes() == y.features.tobytes()
            assert x.labels.tobytes() == y.labels.tobytes()

    def test_label_histograms(self):
        labelled, unlabelled, test = synth_mixture(MixtureSpec(3, 4, 11, 6, seed=1))
        assert np.bincount(labelled.labels).tolist() == [11] * 3
        assert np.bincount(unlabelled.labels)[3:].tolist() == [11] * 4
        assert np.bincount(test.labels).tolist() == [11] * 7

    def test_known_and_novel_ids_disjoint(self):
        labelled, unlabelled, _ = synth_mixture(MixtureSpec(3, 4, 5, 6, seed=2))
        assert set(labelled.labels) == {0, 1, 2}
        assert set(unlabelled.labels) == {3, 4, 5, 6}

    def test_singleton_classes(self):
        labelled, unlabelled, test = synth_mixture(MixtureSpec(2, 2, 1, 3, seed=0))
        assert labelled.n == 2 and unlabelled.n == 2 and test.n == 4

    def test_means_respect_separation(self):
        spec = MixtureSpec(4, 4, 400, 8, 0.5, 6.0, seed=4)
        _, _, test = synth_mixture(spec)
        means = np.array([test.features[test.labels == c].mean(axis=0) for c in range(8)])
        # sample means are within a few standard errors of the true means
        gaps = [np.linalg.norm(a - b) for a, b in itertools.combinations(means, 2)]
        assert min(gaps) >= spec.separation * spec.cluster_std - 0.5

    def test_kmeans_recovers_well_separated_mixture(self):
        # oracle: Lloyd with restarts on the pooled data at the true k
        labelled, unlabelled, _ = synth_mixture(MixtureSpec(5, 5, 200, 16, 1.0, 10.0, seed=7))
        x = np.vstack([labelled.features, unlabelled.features])
        y = np.concatenate([labelled.labels, unlabelled.labels])
        assert clustering_acc(kmeans(x, 10, seed=0).assignments, y) >= 0.99

    def test_masked_hides_labels(self):
        _, unlabelled, _ = synth_mixture(MixtureSpec(2, 2, 3, 2, seed=0))
        masked = unlabelled.masked()
        assert np.all(masked.labels == -1)
        assert masked.features is unlabelled.features

    @pytest.mark.parametrize("kw", [{"n_labelled_classes": 0}, {"points_per_class": 0}, {"separation": 0.0}])
    def test_invalid_spec(self, kw):
        base = dict(n_labelled_classes=2, n_unlabelled_classes=2, points_per_class=3, dim=2)
        with pytest.raises(DatasetError):
            synth_mixture(MixtureSpec(**{**base, **kw}))

    def test_impossible_separation(self, monkeypatch):
        # with no retry budget the first rejected draw aborts generation
        monkeypatch.setattr(dataio, "MAX_PLACEMENT_RETRIES", 0)
        with pytest.raises(DatasetError, match="separation"):
            synth_mixture(MixtureSpec(50, 50, 1, 1, 1.0, 5.0, seed=0))


class TestProbeSplit:
    @staticmethod
    def _labelled(n_classes):
        labels = np.repeat(np.arange(n_classes), 2)
        return EmbeddingDataset(np.zeros((labels.size, 1)), labels)

    def test_paper_ratio(self):
        split = split_probe(self._labelled(10), 5, 0.8, seed=0)
        assert len(split.anchor_probe) == 4
        assert len(split.validation_probe) == 1
        assert len(split.train_classes) == 5

    def test_minimal(self):
        split = split_probe(self._labelled(3), 2, 0.5, seed=1)
        assert len(split.anchor_probe) == 1 and len(split.validation_probe) == 1

    def test_must_leave_training_classes(self):
        with pytest.raises(DatasetError):
            split_probe(self._labelled(4), 4, 0.8)

    def test_empty_validation_rejected(self):
        with pytest.raises(DatasetError):
            split_probe(self._labelled(4), 2, 0.9)

    def test_deterministic(self):
        ds = self._labelled(12)
        assert split_probe(ds, 6, 0.5, seed=3) == split_probe(ds, 6, 0.5, seed=3)

    def test_partition_exhaustive(self):
        for n_classes in range(2, 9):
            ds = self._labelled(n_classes)
            for probe in range(1, n_classes):
                for ratio in (0.2, 0.5, 0.8):
                    for seed in range(3):
                        try:
                            split = split_probe(ds, probe, ratio, seed)
                        except DatasetError:
                            continue
                        parts = [set(split.train_classes), set(split.anchor_probe), set(split.validation_probe)]
                        assert set().union(*parts) == set(range(n_classes))
                        assert sum(len(p) for p in parts) == n_classes
                        assert all(parts[1:]) and len(parts[1]) == int(np.floor(ratio * probe + 0.5))
