import numpy as np
import pytest

from hfedsim.data import (
    DataSpec,
    FederatedDataset,
    gen_synthetic,
    load_shards,
    refresh_shard,
    save_dataset,
)
from hfedsim.errors import ConfigurationError, DatasetFormatError


def spec(**kw):
    base = dict(
        num_devices=6,
        num_classes=10,
        classes_per_device=2,
        samples_per_device=30,
        input_dim=4,
        cluster_spread=0.3,
    )
    base.update(kw)
    return DataSpec(**base)


class TestGenSynthetic:
    def test_label_skew(self):
        ds = gen_synthetic(spec(), seed=1)
        for shard, classes in zip(ds.shards, ds.class_map):
            assert len(classes) == 2
            assert set(shard.labels.tolist()) == set(classes)

    def test_iid_degenerate_case(self):
        ds = gen_synthetic(spec(classes_per_device=10, samples_per_device=50), seed=2)
        for shard in ds.shards:
            assert set(shard.labels.tolist()) == set(range(10))

    def test_test_set_covers_all_classes(self):
        ds = gen_synthetic(spec(), seed=3)
        assert set(ds.test.labels.tolist()) == set(range(10))
        assert ds.test.n == 100 * 10

    def test_deterministic(self):
        a = gen_synthetic(spec(), seed=7)
        b = gen_synthetic(spec(), seed=7)
        assert a.class_map == b.class_map
        for sa, sb in zip(a.shards, b.shards):
            assert np.array_equal(sa.features, sb.features)
            assert np.array_equal(sa.labels, sb.labels)
        assert np.array_equal(a.test.features, b.test.features)

    def test_same_class_map_devices_have_same_label_sets(self):
        # With few classes some devices share a class_map; their label sets match.
        ds = gen_synthetic(spec(num_devices=20, num_classes=3), seed=5)
        seen = {}
        for shard, classes in zip(ds.shards, ds.class_map):
            key = tuple(classes)
            labels = set(shard.labels.tolist())
            if key in seen:
                assert labels == seen[key]
            seen[key] = labels

    def test_centroids_on_unit_sphere(self):
        ds = gen_synthetic(spec(), seed=4)
        np.testing.assert_allclose(np.linalg.norm(ds.centroids, axis=1), 1.0, rtol=1e-12)

    def test_bad_spec(self):
        with pytest.raises(ConfigurationError):
            spec(classes_per_device=11)
        with pytest.raises(ConfigurationError):
            spec(num_devices=0)


class TestRefreshShard:
    def test_disabled_returns_same_object(self):
        ds = gen_synthetic(spec(), seed=1)
        out = refresh_shard(ds.shards[0], ds.class_map[0], spec(), 99, ds.centroids)
        assert out is ds.shards[0]

    def test_preserves_size_and_labels(self):
        s = spec(refresh=True)
        ds = gen_synthetic(s, seed=1)
        out = refresh_shard(ds.shards[0], ds.class_map[0], s, 99, ds.centroids)
        assert out is not ds.shards[0]
        assert out.n == ds.shards[0].n
        assert set(out.labels.tolist()) == set(ds.shards[0].labels.tolist())
        assert not np.array_equal(out.features, ds.shards[0].features)

    def test_mean_tracks_centroid_mixture(self):
        s = spec(refresh=True, samples_per_device=4000, cluster_spread=0.5)
        ds = gen_synthetic(s, seed=8)
        out = refresh_shard(ds.shards[0], ds.class_map[0], s, 123, ds.centroids)
        mixture_mean = ds.centroids[ds.class_map[0]].mean(axis=0)
        tol = 3 * 0.5 / np.sqrt(out.n)
        assert np.all(np.abs(out.features.mean(axis=0) - mixture_mean) < tol * 3)

    def test_requires_centroids(self):
        s = spec(refresh=True)
        ds = gen_synthetic(s, seed=1)
        with pytest.raises(ConfigurationError):
            refresh_shard(ds.shards[0], ds.class_map[0], s, 0, None)


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path):
        ds = gen_synthetic(spec(), seed=6)
        manifest = save_dataset(ds, tmp_path)
        back = load_shards(manifest)
        assert back.num_devices == ds.num_devices
        assert back.class_map == ds.class_map
        for sa, sb in zip(ds.shards, back.shards):
            assert np.array_equal(sa.features, sb.features)
            assert np.array_equal(sa.labels, sb.labels)
        assert np.array_equal(ds.test.features, back.test.features)
        assert back.centroids is None

    def test_load_from_directory(self, tmp_path):
        ds = gen_synthetic(spec(), seed=6)
        save_dataset(ds, tmp_path)
        assert load_shards(tmp_path).num_devices == ds.num_devices


class TestLoadErrors:
    def _saved(self, tmp_path):
        ds = gen_synthetic(spec(num_devices=2, num_classes=3), seed=1)
        return save_dataset(ds, tmp_path), ds

    def test_label_out_of_range(self, tmp_path):
        manifest, _ = self._saved(tmp_path)
        target = tmp_path / "device_1.csv"
        lines = target.read_text().splitlines()
        parts = lines[3].split(",")
        parts[-1] = "3"  # num_classes is 3, so label 3 is invalid
        lines[3] = ",".join(parts)
        target.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match=r"device_1\.csv line 4.*label 3"):
            load_shards(manifest)

    def test_malformed_row_reports_line(self, tmp_path):
        manifest, _ = self._saved(tmp_path)
        target = tmp_path / "device_0.csv"
        lines = target.read_text().splitlines()
        lines[2] = "not-a-number," + ",".join(lines[2].split(",")[1:])
        target.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match=r"device_0\.csv line 3"):
            load_shards(manifest)

    def test_empty_device_list(self, tmp_path):
        manifest, _ = self._saved(tmp_path)
        import json

        data = json.loads(manifest.read_text())
        data["devices"] = []
        manifest.write_text(json.dumps(data))
        with pytest.raises(DatasetFormatError, match="at least one device required"):
            load_shards(manifest)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetFormatError, match="manifest not found"):
            load_shards(tmp_path / "nope")

    def test_undeclared_label_rejected(self, tmp_path):
        manifest, ds = self._saved(tmp_path)
        import json

        data = json.loads(manifest.read_text())
        data["class_map"][0] = data["class_map"][0][:1]
        manifest.write_text(json.dumps(data))
        with pytest.raises(DatasetFormatError, match="device 0"):
            load_shards(manifest)
