import json

import numpy as np
import pytest

from tractmil import (
    ConfigError,
    DataError,
    FormatError,
    GeometryError,
    SplitPlan,
    TractBoundary,
    assign_to_tracts,
    build_bags,
    holdout_city_split,
    load_atlas,
    load_boundaries,
    load_embeddings,
    load_income,
    load_split,
    save_split,
    stratified_split,
)
from tractmil.geodata import point_in_rings

from helpers import make_bag, make_instances


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


def embedding_record(image_id, embedding, lat=0.5, lon=0.5, city="cityA"):
    return {"image_id": image_id, "lat": lat, "lon": lon, "city": city, "embedding": embedding}


def square_boundary(tract_id, lon0=0.0, lat0=0.0, side=1.0):
    ring = [
        [lon0, lat0],
        [lon0 + side, lat0],
        [lon0 + side, lat0 + side],
        [lon0, lat0 + side],
        [lon0, lat0],
    ]
    return TractBoundary(tract_id=tract_id, geometry={"type": "Polygon", "coordinates": [ring]})


class TestLoadEmbeddings:
    def test_well_formed(self, tmp_path):
        path = tmp_path / "emb.jsonl"
        write_jsonl(path, [embedding_record(f"i{j}", [0.5, 1.0, -1.0, float(j)]) for j in range(3)])
        instances = load_embeddings(path)
        assert len(instances) == 3
        assert all(inst.dim == 4 for inst in instances)
        assert instances[1].features[3] == 1.0

    def test_ragged_dimension_names_line(self, tmp_path):
        path = tmp_path / "emb.jsonl"
        write_jsonl(path, [
            embedding_record("a", [1.0, 2.0]),
            embedding_record("b", [1.0, 2.0, 3.0]),
        ])
        with pytest.raises(FormatError, match="line 2"):
            load_embeddings(path)

    def test_duplicate_image_id(self, tmp_path):
        path = tmp_path / "emb.jsonl"
        write_jsonl(path, [embedding_record("a", [1.0]), embedding_record("a", [2.0])])
        with pytest.raises(FormatError, match="duplicate"):
            load_embeddings(path)

    def test_empty_file_warns(self, tmp_path, caplog):
        path = tmp_path / "emb.jsonl"
        path.write_text("")
        with caplog.at_level("WARNING"):
            instances = load_embeddings(path)
        assert instances == []
        assert any("no embedding records" in r.message for r in caplog.records)

    def test_invalid_json_names_line(self, tmp_path):
        path = tmp_path / "emb.jsonl"
        path.write_text('{"image_id": "a"\n')
        with pytest.raises(FormatError, match="line 1"):
            load_embeddings(path)

    def test_missing_field_names_line(self, tmp_path):
        path = tmp_path / "emb.jsonl"
        write_jsonl(path, [{"image_id": "a", "lat": 0, "lon": 0, "city": "x"}])
        with pytest.raises(FormatError, match="line 1"):
            load_embeddings(path)

    def test_non_finite_feature_rejected(self, tmp_path):
        path = tmp_path / "emb.jsonl"
        path.write_text('{"image_id": "a", "lat": 0, "lon": 0, "city": "x", "embedding": [1.0, null]}\n')
        with pytest.raises(FormatError):
            load_embeddings(path)


class TestLoadAtlas:
    def write_atlas(self, path, rows, header=None):
        header = header or "CensusTract,LILATracts_1And10,LILATracts_halfAnd10,LILATracts_1And20,LILATracts_Vehicle"
        path.write_text(header + "\n" + "\n".join(rows) + "\n")

    def test_flag_or(self, tmp_path):
        path = tmp_path / "atlas.csv"
        self.write_atlas(path, [
            "00000000001,0,0,0,0",
            "00000000002,0,1,0,0",
            "00000000003,1,1,1,1",
            "00000000004,true,false,,0",
        ])
        labels = load_atlas(path)
        assert labels["00000000001"] == 0
        assert labels["00000000002"] == 1
        assert labels["00000000003"] == 1
        assert labels["00000000004"] == 1

    def test_geoid_zero_padded(self, tmp_path):
        path = tmp_path / "atlas.csv"
        self.write_atlas(path, ["1001,0,0,1,0"])
        assert load_atlas(path) == {"00000001001": 1}

    def test_missing_column_lists_available(self, tmp_path):
        path = tmp_path / "atlas.csv"
        path.write_text("tract,flagA\n1,0\n")
        with pytest.raises(ConfigError, match="flagA"):
            load_atlas(path)

    def test_unparseable_flag(self, tmp_path):
        path = tmp_path / "atlas.csv"
        self.write_atlas(path, ["00000000001,0,maybe,0,0"])
        with pytest.raises(FormatError, match="maybe"):
            load_atlas(path)

    def test_duplicate_tract(self, tmp_path):
        path = tmp_path / "atlas.csv"
        self.write_atlas(path, ["00000000001,0,0,0,0", "00000000001,1,0,0,0"])
        with pytest.raises(FormatError, match="duplicate"):
            load_atlas(path)


class TestLoadIncome:
    def test_basic_and_missing(self, tmp_path):
        path = tmp_path / "income.csv"
        path.write_text("GEOID,median_household_income\n00000000001,52000\n00000000002,\n")
        incomes = load_income(path)
        assert incomes == {"00000000001": 52000.0}

    def test_bad_value(self, tmp_path):
        path = tmp_path / "income.csv"
        path.write_text("GEOID,median_household_income\n00000000001,lots\n")
        with pytest.raises(FormatError):
            load_income(path)


class TestPointInPolygon:
    def test_unit_square(self):
        boundary = square_boundary("00000000001")
        assert point_in_rings(0.5, 0.5, boundary.rings)
        assert not point_in_rings(2.0, 2.0, boundary.rings)

    def test_hole_is_outside(self):
        outer = [[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0], [0.0, 0.0]]
        hole = [[1.0, 1.0], [3.0, 1.0], [3.0, 3.0], [1.0, 3.0], [1.0, 1.0]]
        boundary = TractBoundary(
            tract_id="00000000001",
            geometry={"type": "Polygon", "coordinates": [outer, hole]},
        )
        assert point_in_rings(0.5, 0.5, boundary.rings)
        assert not point_in_rings(2.0, 2.0, boundary.rings)  # inside the hole

    def test_multipolygon(self):
        part1 = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]
        part2 = [[5.0, 5.0], [6.0, 5.0], [6.0, 6.0], [5.0, 6.0], [5.0, 5.0]]
        boundary = TractBoundary(
            tract_id="00000000001",
            geometry={"type": "MultiPolygon", "coordinates": [[part1], [part2]]},
        )
        assert point_in_rings(0.5, 0.5, boundary.rings)
        assert point_in_rings(5.5, 5.5, boundary.rings)
        assert not point_in_rings(3.0, 3.0, boundary.rings)

    def test_unclosed_ring_names_geoid(self):
        ring = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
        with pytest.raises(GeometryError, match="00000000009"):
            TractBoundary(tract_id="00000000009", geometry={"type": "Polygon", "coordinates": [ring]})

    def test_short_ring_rejected(self):
        ring = [[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]]
        with pytest.raises(GeometryError):
            TractBoundary(tract_id="00000000009", geometry={"type": "Polygon", "coordinates": [ring]})


def brute_force_point_in_polygon(lon, lat, rings):
    """Independent scalar even-odd oracle (no vectorization, no bbox)."""
    crossings = 0
    for ring in rings:
        for i in range(len(ring) - 1):
            x0, y0 = float(ring[i][0]), float(ring[i][1])
            x1, y1 = float(ring[i + 1][0]), float(ring[i + 1][1])
            if (y0 > lat) != (y1 > lat):
                x_at = (x1 - x0) * (lat - y0) / (y1 - y0) + x0
                if lon < x_at:
                    crossings += 1
    return crossings % 2 == 1


def random_convex_polygon(rng, center, radius, n_vertices):
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n_vertices))
    pts = [
        [center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)]
        for a in angles
    ]
    pts.append(pts[0])
    return pts


class TestSpatialJoin:
    def test_assignment_matches_brute_force_oracle(self):
        rng = np.random.default_rng(42)
        boundaries = []
        for i in range(20):
            center = rng.uniform(-5, 5, size=2)
            ring = random_convex_polygon(rng, center, rng.uniform(0.5, 2.0), int(rng.integers(4, 9)))
            boundaries.append(
                TractBoundary(tract_id=f"{i:011d}", geometry={"type": "Polygon", "coordinates": [ring]})
            )
        points = make_instances(rng, 300, 2)
        # pull coordinates into the polygon field
        for inst in points:
            inst.lon = float(rng.uniform(-6, 6))
            inst.lat = float(rng.uniform(-6, 6))
        fast = assign_to_tracts(points, boundaries)
        expected = {}
        for inst in points:
            for boundary in boundaries:
                if brute_force_point_in_polygon(inst.lon, inst.lat, boundary.rings):
                    expected[inst.image_id] = boundary.tract_id
                    break
        assert fast == expected

    def test_unmatched_points_dropped(self):
        rng = np.random.default_rng(1)
        points = make_instances(rng, 2, 3)
        points[0].lon, points[0].lat = 0.5, 0.5
        points[1].lon, points[1].lat = 2.0, 2.0
        assignment = assign_to_tracts(points, [square_boundary("00000000001")])
        assert assignment == {points[0].image_id: "00000000001"}

    def test_overlapping_boundaries_take_first_in_file_order(self, caplog):
        rng = np.random.default_rng(2)
        points = make_instances(rng, 1, 3)
        points[0].lon, points[0].lat = 0.5, 0.5
        boundaries = [square_boundary("00000000002"), square_boundary("00000000001")]
        with caplog.at_level("WARNING"):
            assignment = assign_to_tracts(points, boundaries)
        assert assignment[points[0].image_id] == "00000000002"
        assert any("multiple" in r.message for r in caplog.records)

    def test_no_boundaries_raises(self):
        rng = np.random.default_rng(3)
        with pytest.raises(DataError):
            assign_to_tracts(make_instances(rng, 1, 3), [])


class TestLoadBoundaries:
    def test_geojson_round_trip(self, tmp_path):
        ring = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]
        doc = {
            "type": "FeatureCollection",
            "features": [
                {
                    "type": "Feature",
                    "geometry": {"type": "Polygon", "coordinates": [ring]},
                    "properties": {"GEOID10": "00000000001"},
                }
            ],
        }
        path = tmp_path / "b.geojson"
        path.write_text(json.dumps(doc))
        boundaries = load_boundaries(path)
        assert len(boundaries) == 1
        assert boundaries[0].tract_id == "00000000001"
        assert boundaries[0].geometry["type"] == "Polygon"

    def test_missing_geoid_property(self, tmp_path):
        doc = {
            "type": "FeatureCollection",
            "features": [
                {
                    "type": "Feature",
                    "geometry": {"type": "Polygon",
                                 "coordinates": [[[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]]]},
                    "properties": {"NAME": "x"},
                }
            ],
        }
        path = tmp_path / "b.geojson"
        path.write_text(json.dumps(doc))
        with pytest.raises(FormatError, match="GEOID10"):
            load_boundaries(path)

    def test_not_a_feature_collection(self, tmp_path):
        path = tmp_path / "b.geojson"
        path.write_text(json.dumps({"type": "Feature"}))
        with pytest.raises(FormatError):
            load_boundaries(path)


class TestBuildBags:
    def test_grouping_preserves_order(self):
        rng = np.random.default_rng(4)
        instances = make_instances(rng, 5, 3)
        assignment = {
            instances[0].image_id: "00000000001",
            instances[1].image_id: "00000000002",
            instances[2].image_id: "00000000001",
            instances[3].image_id: "00000000001",
            instances[4].image_id: "00000000002",
        }
        bags = build_bags(instances, assignment, labels={"00000000001": 1})
        assert [b.tract_id for b in bags] == ["00000000001", "00000000002"]
        assert [b.size for b in bags] == [3, 2]
        assert bags[0].image_ids == [instances[i].image_id for i in (0, 2, 3)]
        assert bags[0].label == 1
        assert bags[1].label is None

    def test_labeled_tract_without_images_warns(self, caplog):
        rng = np.random.default_rng(5)
        instances = make_instances(rng, 2, 3)
        assignment = {i.image_id: "00000000001" for i in instances}
        with caplog.at_level("WARNING"):
            bags = build_bags(instances, assignment, labels={"00000000001": 0, "00000000002": 1})
        assert len(bags) == 1
        assert any("no images" in r.message for r in caplog.records)

    def test_incomes_attached(self):
        rng = np.random.default_rng(6)
        instances = make_instances(rng, 2, 3)
        assignment = {i.image_id: "00000000001" for i in instances}
        bags = build_bags(instances, assignment, incomes={"00000000001": 51000.0})
        assert bags[0].income == 51000.0

    def test_order_stability_follows_input_order(self):
        rng = np.random.default_rng(7)
        instances = make_instances(rng, 6, 3)
        assignment = {}
        for i, inst in enumerate(instances):
            assignment[inst.image_id] = "00000000001" if i % 2 == 0 else "00000000002"
        reversed_instances = list(reversed(instances))
        bags_fwd = build_bags(instances, assignment)
        bags_rev = build_bags(reversed_instances, assignment)
        assert [b.tract_id for b in bags_fwd] == ["00000000001", "00000000002"]
        assert [b.tract_id for b in bags_rev] == ["00000000002", "00000000001"]
        assert bags_rev[1].image_ids == list(reversed(bags_fwd[0].image_ids))


def labeled_bags(n_secure, n_insecure, seed=0, city_cycle=("A", "B")):
    rng = np.random.default_rng(seed)
    bags = []
    for i in range(n_secure + n_insecure):
        bags.append(
            make_bag(
                rng, 2, 3,
                label=0 if i < n_secure else 1,
                tract_id=f"{i:011d}",
                city=city_cycle[i % len(city_cycle)],
            )
        )
    return bags


class TestStratifiedSplit:
    def test_exact_counts(self):
        bags = labeled_bags(30, 10)
        plan = stratified_split(bags, seed=1)
        secure = {b.tract_id for b in bags if b.label == 0}
        insecure = {b.tract_id for b in bags if b.label == 1}
        assert (len(plan.train & secure), len(plan.train & insecure)) == (18, 6)
        assert (len(plan.validation & secure), len(plan.validation & insecure)) == (6, 2)
        assert (len(plan.test & secure), len(plan.test & insecure)) == (6, 2)

    def test_leftover_goes_to_train(self):
        bags = labeled_bags(31, 10)
        plan = stratified_split(bags, seed=1)
        secure = {b.tract_id for b in bags if b.label == 0}
        assert len(plan.train & secure) == 19
        assert len(plan.validation & secure) == 6
        assert len(plan.test & secure) == 6

    def test_deterministic(self):
        bags = labeled_bags(25, 9)
        a = stratified_split(bags, seed=7)
        b = stratified_split(bags, seed=7)
        assert (a.train, a.validation, a.test) == (b.train, b.validation, b.test)
        c = stratified_split(bags, seed=8)
        assert (a.train, a.validation, a.test) != (c.train, c.validation, c.test)

    def test_partitions_disjoint_and_exhaustive(self):
        bags = labeled_bags(40, 17)
        plan = stratified_split(bags, seed=2)
        ids = {b.tract_id for b in bags}
        assert plan.train | plan.validation | plan.test == ids
        assert not plan.train & plan.validation
        assert not plan.train & plan.test
        assert not plan.validation & plan.test

    def test_share_bound(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n0 = int(rng.integers(6, 60))
            n1 = int(rng.integers(6, 60))
            bags = labeled_bags(n0, n1, seed=int(rng.integers(1000)))
            plan = stratified_split(bags, seed=int(rng.integers(1000)))
            insecure = {b.tract_id for b in bags if b.label == 1}
            global_share = n1 / (n0 + n1)
            for part in (plan.train, plan.validation, plan.test):
                share = len(part & insecure) / len(part)
                assert abs(share - global_share) <= 1.0 / len(part) + 1e-12

    def test_small_class_raises(self):
        bags = labeled_bags(10, 2)
        with pytest.raises(DataError):
            stratified_split(bags)

    def test_bad_ratios(self):
        bags = labeled_bags(10, 10)
        with pytest.raises(ConfigError):
            stratified_split(bags, ratios=(0.5, 0.2, 0.2))

    def test_unlabeled_bags_excluded(self):
        rng = np.random.default_rng(4)
        bags = labeled_bags(10, 10)
        bags.append(make_bag(rng, 2, 3, label=None, tract_id="99999999999"))
        plan = stratified_split(bags, seed=1)
        assert "99999999999" not in plan.all_ids


class TestHoldoutCitySplit:
    def test_test_set_is_exactly_the_city(self):
        bags = labeled_bags(40, 14, city_cycle=("Austin", "Boston", "Chicago"))
        plan = holdout_city_split(bags, "Austin", seed=1)
        austin = {b.tract_id for b in bags if b.city == "Austin"}
        assert plan.test == austin
        assert plan.method == "city-holdout"
        assert plan.train | plan.validation == {b.tract_id for b in bags} - austin

    def test_unknown_city_lists_known(self):
        bags = labeled_bags(10, 5, city_cycle=("A", "B"))
        with pytest.raises(DataError, match="known cities"):
            holdout_city_split(bags, "Nowhere")

    def test_deterministic(self):
        bags = labeled_bags(40, 14, city_cycle=("Austin", "Boston", "Chicago"))
        a = holdout_city_split(bags, "Boston", seed=5)
        b = holdout_city_split(bags, "Boston", seed=5)
        assert (a.train, a.validation, a.test) == (b.train, b.validation, b.test)

    def test_validation_fraction(self):
        bags = labeled_bags(40, 20, city_cycle=("Austin", "Boston"))
        plan = holdout_city_split(bags, "Austin", val_fraction=0.2, seed=1)
        rest = [b for b in bags if b.city != "Austin"]
        n0 = sum(1 for b in rest if b.label == 0)
        n1 = sum(1 for b in rest if b.label == 1)
        assert len(plan.validation) == (n0 * 2) // 10 + (n1 * 2) // 10


class TestSplitPlanSerialization:
    def test_round_trip(self, tmp_path):
        bags = labeled_bags(20, 8)
        plan = stratified_split(bags, seed=3)
        path = tmp_path / "split.json"
        save_split(plan, path)
        loaded = load_split(path)
        assert loaded.train == plan.train
        assert loaded.validation == plan.validation
        assert loaded.test == plan.test
        assert loaded.seed == plan.seed
        assert loaded.method == plan.method

    def test_overlapping_partitions_rejected(self):
        with pytest.raises(DataError):
            SplitPlan(train={"a"}, validation={"a"}, test={"b"}, seed=0, method="city-holdout")

    def test_missing_field(self, tmp_path):
        path = tmp_path / "split.json"
        path.write_text(json.dumps({"train": [], "validation": []}))
        with pytest.raises(FormatError):
            load_split(path)
