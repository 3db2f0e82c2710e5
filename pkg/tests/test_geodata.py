"""Dataset geometry: distances, radii semantics, synthesis, persistence."""


import numpy as np
import pytest

from vgssl.geodata import (
    GeoDataset,
    GeoSample,
    Position,
    PositionMode,
    Role,
    distance_m,
    load_csv,
    save_csv,
    synth_dataset,
)


def planar(x, y):
    return Position(PositionMode.PLANAR, x, y)


def db_sample(sid, x, y, feats=None):
    return GeoSample(sid, Role.DATABASE, planar(x, y), feats if feats is not None else np.zeros(3))


def q_sample(sid, x, y, feats=None):
    return GeoSample(sid, Role.QUERY, planar(x, y), feats if feats is not None else np.zeros(3))


class TestDistance:
    def test_planar_3_4_5(self):
        assert distance_m(planar(0, 0), planar(3, 4)) == pytest.approx(5.0)

    def test_haversine_one_degree_longitude_at_equator(self):
        p = Position(PositionMode.GEODETIC, 0.0, 0.0)
        q = Position(PositionMode.GEODETIC, 0.0, 1.0)
        # pi * 6371000 / 180
        assert distance_m(p, q) == pytest.approx(111194.9266445587, rel=1e-12)

    def test_haversine_symmetry_and_zero(self):
        p = Position(PositionMode.GEODETIC, 48.85, 2.35)
        q = Position(PositionMode.GEODETIC, 48.86, 2.36)
        assert distance_m(p, q) == pytest.approx(distance_m(q, p))
        assert distance_m(p, p) == 0.0

    def test_mixed_modes_rejected(self):
        with pytest.raises(ValueError):
            distance_m(planar(0, 0), Position(PositionMode.GEODETIC, 0, 0))

    def test_geodetic_range_validation(self):
        with pytest.raises(ValueError):
            Position(PositionMode.GEODETIC, 91.0, 0.0)
        with pytest.raises(ValueError):
            Position(PositionMode.GEODETIC, 0.0, 181.0)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            planar(float("nan"), 0.0)


class TestNeighborhoods:
    def make_ds(self):
        # Query at origin; db at 5 m, exactly 10 m, 20 m, exactly 25 m, 30 m.
        db = [
            db_sample(0, 5, 0),
            db_sample(1, 10, 0),
            db_sample(2, 20, 0),
            db_sample(3, 25, 0),
            db_sample(4, 30, 0),
        ]
        return GeoDataset(queries=[q_sample(100, 0, 0)], database=db)

    def test_positive_boundary_inclusive(self):
        # <= 10 m is positive, so the sample at exactly 10 m is included.
        assert self.make_ds().positive_set(100) == [0, 1]

    def test_negative_boundary_exclusive(self):
        # > 25 m is negative, so the sample at exactly 25 m is excluded.
        assert self.make_ds().negative_set(100) == [4]

    def test_annulus_in_neither_set(self):
        ds = self.make_ds()
        assert 2 not in ds.positive_set(100)
        assert 2 not in ds.negative_set(100)

    def test_unknown_query_raises(self):
        with pytest.raises(KeyError):
            self.make_ds().positive_set(999)

    def test_sample_lookup(self):
        ds = self.make_ds()
        assert ds.sample(3).position.a == 25
        with pytest.raises(KeyError):
            ds.sample(555)


class TestDatasetValidation:
    def test_radius_ordering_enforced(self):
        with pytest.raises(ValueError):
            GeoDataset(queries=[], database=[db_sample(0, 0, 0)], r_pos=25, r_neg=10)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            GeoDataset(queries=[q_sample(0, 0, 0)], database=[db_sample(0, 1, 1)])

    def test_mixed_feature_widths_rejected(self):
        with pytest.raises(ValueError):
            GeoDataset(
                queries=[],
                database=[db_sample(0, 0, 0, np.zeros(3)), db_sample(1, 1, 1, np.zeros(4))],
            )

    def test_empty_database_rejected(self):
        with pytest.raises(ValueError):
            GeoDataset(queries=[], database=[])


class TestSynthDataset:
    def test_counts_and_ids(self):
        ds = synth_dataset(seed=0, n_places=10, db_per_place=4, query_fraction=0.5)
        assert len(ds.database) == 40
        assert len(ds.queries) == 5
        ids = [s.id for s in ds.database] + [s.id for s in ds.queries]
        assert sorted(ids) == list(range(45))

    def test_same_place_within_positive_radius(self):
        ds = synth_dataset(seed=1, n_places=6, db_per_place=5, query_fraction=1.0)
        for q in ds.queries:
            pos = ds.positive_set(q.id)
            # Each query must see at least its own place's database samples.
            assert len(pos) == 5
            for pid in pos:
                assert distance_m(q.position, ds.sample(pid).position) <= ds.r_pos

    def test_cross_place_beyond_negative_radius(self):
        ds = synth_dataset(seed=2, n_places=5, db_per_place=3, query_fraction=1.0)
        for q in ds.queries:
            negs = set(ds.negative_set(q.id))
            # Everything outside the query's own place is negative.
            assert len(negs) == 4 * 3

    def test_determinism(self):
        a = synth_dataset(seed=7, n_places=4, db_per_place=3)
        b = synth_dataset(seed=7, n_places=4, db_per_place=3)
        for s, t in zip(a.database + a.queries, b.database + b.queries):
            assert s.id == t.id
            assert s.position == t.position
            np.testing.assert_array_equal(s.features, t.features)

    def test_seed_changes_content(self):
        a = synth_dataset(seed=7, n_places=4, db_per_place=3)
        b = synth_dataset(seed=8, n_places=4, db_per_place=3)
        assert not np.array_equal(a.database[0].features, b.database[0].features)

    def test_view_noise_scales_spread(self):
        lo = synth_dataset(seed=3, n_places=4, db_per_place=20, view_noise=0.1)
        hi = synth_dataset(seed=3, n_places=4, db_per_place=20, view_noise=2.0)

        def place_spread(ds):
            feats = np.stack([s.features for s in ds.database[:20]])
            return float(feats.std(axis=0).mean())

        assert place_spread(hi) > 5 * place_spread(lo)

    def test_spacing_guard(self):
        with pytest.raises(ValueError):
            synth_dataset(seed=0, n_places=4, spacing_m=40.0)  # 2*r_neg = 50

    def test_min_places_guard(self):
        with pytest.raises(ValueError):
            synth_dataset(seed=0, n_places=1)

    def test_buffer_samples_fall_in_annulus(self):
        ds = synth_dataset(
            seed=4, n_places=3, db_per_place=2, query_fraction=1.0, buffer_per_place=2
        )
        assert len(ds.database) == 3 * 4
        for q in ds.queries:
            pos = set(ds.positive_set(q.id))
            neg = set(ds.negative_set(q.id))
            limbo = [s.id for s in ds.database if s.id not in pos and s.id not in neg]
            assert len(limbo) == 2  # this place's buffer samples


class TestPersistence:
    def test_roundtrip_exact(self, tmp_path):
        ds = synth_dataset(seed=11, n_places=4, db_per_place=3, query_fraction=0.75)
        path = tmp_path / "world.csv"
        save_csv(ds, path)
        back = load_csv(path)
        assert back.r_pos == ds.r_pos and back.r_neg == ds.r_neg
        assert len(back.queries) == len(ds.queries)
        for s, t in zip(
            sorted(ds.database, key=lambda s: s.id), sorted(back.database, key=lambda s: s.id)
        ):
            assert s.id == t.id and s.role == t.role
            assert s.position == t.position
            np.testing.assert_array_equal(s.features, t.features)

    def test_write_is_byte_stable(self, tmp_path):
        ds = synth_dataset(seed=11, n_places=4, db_per_place=3)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        save_csv(ds, p1)
        save_csv(ds, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert (tmp_path / "a.meta.json").read_bytes() == (tmp_path / "b.meta.json").read_bytes()

    def test_missing_sidecar_raises(self, tmp_path):
        ds = synth_dataset(seed=1, n_places=2, db_per_place=2)
        path = tmp_path / "world.csv"
        save_csv(ds, path)
        (tmp_path / "world.meta.json").unlink()
        with pytest.raises(FileNotFoundError):
            load_csv(path)

    def test_header_names(self, tmp_path):
        ds = synth_dataset(seed=1, n_places=2, db_per_place=2, feature_dim=3)
        path = tmp_path / "world.csv"
        save_csv(ds, path)
        header = path.read_text().splitlines()[0]
        assert header == "id,role,lat_or_x,lon_or_y,f0,f1,f2"
