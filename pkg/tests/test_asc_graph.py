import json
import logging
import math

import numpy as np
import pytest

from sargtr.asc_graph import (AUTO, DiscreteCodebook, alpha_indices, alpha_to_index, as_center, build_graph,
                              inverse_permutation, permute_graph, read_jsonl, validate_record, write_jsonl)
from sargtr.exceptions import DegenerateGraphException, UnknownAlphaException, ValidationException
from test_util import TestGraphs

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


@pytest.mark.graph
class TestBuildGraph:

    def test_identical_positions_give_unit_weight(self):
        logger.info("Checking that two coincident centers are joined by a weight-1 edge")
        g = TestGraphs.graph([(0.5, 0.5), (0.5, 0.5)], sigma_d=1.0)
        assert g.num_edges == 1
        assert g.weights[0] == 1.0

    def test_distance_sigma_gives_exp_minus_half(self):
        logger.info("Checking the kernel value at distance sigma_d")
        g = TestGraphs.graph([(0.0, 0.0), (0.0, 2.5)], sigma_d=2.5)
        assert g.weights[0] == pytest.approx(0.606531, abs=1e-6)
        assert g.weights[0] == pytest.approx(math.exp(-0.5), rel=1e-12)

    def test_edge_count_is_complete(self):
        logger.info("Checking K(K-1)/2 edges for several K")
        for k in (2, 4, 7, 40):
            g = TestGraphs.random_graph(k, seed=k)
            assert g.num_edges == k * (k - 1) // 2
            assert np.all(g.edges[:, 0] < g.edges[:, 1])
        assert TestGraphs.square().num_edges == 6

    def test_weight_matrix_properties(self):
        logger.info("Checking symmetry, empty diagonal and weight range")
        g = TestGraphs.random_graph(12, seed=3)
        w = g.weight_matrix()
        assert np.array_equal(w, w.T)
        assert np.all(np.diag(w) == 0)
        assert np.all((g.weights > 0) & (g.weights <= 1))

    def test_far_pairs_stay_positive(self):
        logger.info("Checking that underflowing kernel values are clamped above zero")
        g = TestGraphs.graph([(0.0, 0.0), (1e6, 0.0)], sigma_d=1.0)
        assert g.weights[0] > 0

    def test_features_hold_center_rows(self):
        logger.info("Checking that H0 row k is center k")
        record = TestGraphs.random_records([5], seed=4)[0]
        g = build_graph(record["centers"])
        assert np.array_equal(g.features, np.array(record["centers"]))

    def test_auto_bandwidth_is_median_distance(self):
        logger.info("Checking the median-distance bandwidth on a unit square")
        g = build_graph(TestGraphs.record([(0, 0), (1, 0), (1, 1), (0, 1)])["centers"], AUTO)
        # four sides of 1 and two diagonals of sqrt(2)
        assert g.sigma_d == pytest.approx(1.0)

    def test_auto_bandwidth_fallback(self):
        logger.info("Checking the bandwidth fallback when every position coincides")
        g = build_graph(TestGraphs.record([(2, 2), (2, 2), (2, 2)])["centers"], AUTO)
        assert g.sigma_d == 1.0
        assert np.all(g.weights == 1.0)

    def test_translation_invariance(self):
        logger.info("Checking that shifting every position leaves the weights unchanged")
        record = TestGraphs.random_records([9], seed=5)[0]
        shifted = [c[:5] + [c[5] + 13.0, c[6] - 4.0] for c in record["centers"]]
        a = build_graph(record["centers"])
        b = build_graph(shifted)
        assert np.allclose(a.weights, b.weights, rtol=0, atol=1e-12)
        assert a.sigma_d == pytest.approx(b.sigma_d)

    def test_too_few_centers(self):
        logger.info("Checking that a single center is rejected")
        with pytest.raises(DegenerateGraphException):
            build_graph([TestGraphs.center(0, 0)])
        with pytest.raises(DegenerateGraphException):
            build_graph([])

    def test_invalid_centers(self):
        logger.info("Checking validation of center fields")
        with pytest.raises(ValidationException):
            build_graph([TestGraphs.center(0, 0), [1.0, 0.0, 0.0, 0.0, 0.0, float("nan"), 0.0]])
        with pytest.raises(ValidationException):
            as_center([-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
        with pytest.raises(ValidationException):
            as_center([1.0, 0.0, -0.1, 0.0, 0.0, 0.0, 0.0])
        with pytest.raises(ValidationException):
            as_center([1.0, 0.0, 0.0])

    def test_invalid_bandwidth(self):
        logger.info("Checking that non-positive sigma_d is rejected")
        centers = TestGraphs.record([(0, 0), (1, 1)])["centers"]
        for bad in (0.0, -1.0, float("inf"), "median"):
            with pytest.raises(ValidationException):
                build_graph(centers, bad)


@pytest.mark.graph
class TestCodebook:

    def test_default_indices(self):
        logger.info("Checking alpha indices under the default codebook")
        assert alpha_to_index(-1.0) == 0
        assert alpha_to_index(-0.5) == 1
        assert alpha_to_index(0.0) == 2
        assert alpha_to_index(0.5) == 3
        assert alpha_to_index(1.0) == 4
        assert alpha_to_index(0.37) == 5

    def test_tolerance(self):
        logger.info("Checking the 1e-9 matching tolerance")
        assert alpha_to_index(0.5 + 5e-10) == 3
        assert alpha_to_index(0.5 + 1e-6) == 5

    def test_strict_mode(self):
        logger.info("Checking that a strict codebook rejects unknown alpha")
        strict = DiscreteCodebook(strict=True)
        assert alpha_to_index(1.0, strict) == 4
        with pytest.raises(UnknownAlphaException):
            alpha_to_index(0.37, strict)

    def test_custom_codebook(self):
        logger.info("Checking a custom codebook and its unknown bucket")
        codebook = DiscreteCodebook(values=(0.0, 1.0), unknown_index=2)
        assert codebook.size == 3
        features = np.array([TestGraphs.center(0, 0, a) for a in (1.0, 0.0, 0.5)])
        assert alpha_indices(features, codebook).tolist() == [1, 0, 2]

    def test_invalid_codebooks(self):
        logger.info("Checking codebook validation")
        with pytest.raises(ValidationException):
            DiscreteCodebook(values=(0.0, 0.0, 1.0), unknown_index=3)
        with pytest.raises(ValidationException):
            DiscreteCodebook(values=(1.0, 0.0), unknown_index=2)
        with pytest.raises(ValidationException):
            DiscreteCodebook(unknown_index=2)


@pytest.mark.graph
class TestPermuteGraph:

    def test_identity(self):
        logger.info("Checking that the identity permutation changes nothing")
        g = TestGraphs.random_graph(6, seed=1)
        p = permute_graph(g, np.arange(6))
        assert np.array_equal(p.features, g.features)
        assert np.array_equal(p.edges, g.edges)
        assert np.array_equal(p.weights, g.weights)

    def test_swap_two_nodes(self):
        logger.info("Checking a swap on K=2")
        g = TestGraphs.graph([(0, 0), (1, 0.5)])
        p = permute_graph(g, [1, 0])
        assert p.weights[0] == g.weights[0]
        assert np.array_equal(p.features[0], g.features[1])

    def test_weight_multiset_and_lookup(self):
        logger.info("Checking that relabeled edges keep their weights")
        g = TestGraphs.random_graph(10, seed=2)
        perm = np.random.default_rng(7).permutation(10)
        p = permute_graph(g, perm)
        assert np.array_equal(np.sort(p.weights), np.sort(g.weights))
        lookup = p.edge_lookup()
        for (i, j), w in zip(g.edges, g.weights):
            a, b = sorted((int(perm[i]), int(perm[j])))
            assert p.weights[lookup[(a, b)]] == w
        assert np.array_equal(p.features[perm], g.features)

    def test_inverse_restores(self):
        logger.info("Checking that the inverse permutation restores the graph")
        g = TestGraphs.random_graph(8, seed=9)
        perm = np.random.default_rng(1).permutation(8)
        back = permute_graph(permute_graph(g, perm), inverse_permutation(perm))
        assert np.array_equal(back.features, g.features)
        assert np.array_equal(back.edges, g.edges)
        assert np.array_equal(back.weights, g.weights)

    def test_rejects_non_bijection(self):
        logger.info("Checking that a non-bijective perm is rejected")
        g = TestGraphs.random_graph(4)
        for bad in ([0, 0, 1, 2], [0, 1, 2], [0, 1, 2, 4]):
            with pytest.raises(ValidationException):
                permute_graph(g, bad)


@pytest.mark.graph
class TestDatasetIO:

    def test_write_then_read(self, tmp_path):
        logger.info("Checking JSONL write and read of records")
        records = TestGraphs.random_records([2, 5, 9], seed=11)
        path = tmp_path / "data.jsonl"
        assert write_jsonl(records, path) == 3
        loaded = read_jsonl(path)
        assert [r["label"] for r in loaded] == [r["label"] for r in records]
        assert loaded[1]["centers"] == records[1]["centers"]

    def test_record_validation(self):
        logger.info("Checking record validation")
        centers = TestGraphs.record([(0, 0), (1, 0)])["centers"]
        assert validate_record({"label": 1, "centers": centers}, class_count=2)["label"] == 1
        with pytest.raises(ValidationException):
            validate_record({"label": 2, "centers": centers}, class_count=2)
        with pytest.raises(ValidationException):
            validate_record({"label": True, "centers": centers})
        with pytest.raises(ValidationException):
            validate_record({"centers": centers})

    def test_bad_line_names_line_number(self, tmp_path):
        logger.info("Checking that read errors carry the line number")
        path = tmp_path / "bad.jsonl"
        good = json.dumps(TestGraphs.record([(0, 0), (1, 0)]))
        path.write_text(good + "\n\n" + "{not json\n", encoding="utf-8")
        with pytest.raises(ValidationException) as e:
            read_jsonl(path)
        assert ":3:" in str(e.value)
