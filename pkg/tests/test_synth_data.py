import dataclasses
import json
import logging
from collections import Counter

import numpy as np
import pytest

from sargtr.asc_graph import build_graph, write_jsonl
from sargtr.exceptions import ValidationException
from sargtr.synth_data import (CROSS_ARMS, ClassTemplate, builtin_templates, generate, load_templates,
                               random_record, sample_record, template_to_dict)

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def still_templates():
    return [dataclasses.replace(t, position_jitter=0.0, amplitude_jitter=0.0, dropout=0.0)
            for t in builtin_templates()]


def distance_signature(record, width=15):
    positions = np.array([c[5:7] for c in record["centers"]])
    i, j = np.triu_indices(len(positions), k=1)
    distances = np.sort(np.linalg.norm(positions[i] - positions[j], axis=1))[::-1]
    return np.pad(distances, (0, width - len(distances)))


@pytest.mark.synth
class TestTemplates:

    def test_builtin_shapes(self):
        logger.info("Checking the layouts of the built-in classes")
        line, rectangle, cross = builtin_templates()
        assert [t.name for t in builtin_templates()] == ["line", "rectangle", "cross"]
        assert all(y == 0.0 for _, y in line.positions)
        assert rectangle.size == 6
        for arm in CROSS_ARMS:
            (x0, y0), (x1, y1), (x2, y2) = (cross.positions[k] for k in arm)
            assert (x1 - x0) * (y2 - y0) == (y1 - y0) * (x2 - x0)
        shared = Counter(k for arm in CROSS_ARMS for k in arm)
        assert shared[0] == 2
        assert all(count == 1 for k, count in shared.items() if k != 0)

    def test_json_round_trip(self, tmp_path):
        logger.info("Checking that templates survive a JSON file")
        path = tmp_path / "templates.json"
        path.write_text(json.dumps([template_to_dict(t) for t in builtin_templates()]), encoding="utf-8")
        assert load_templates(path) == builtin_templates()

    def test_invalid_templates(self, tmp_path):
        logger.info("Checking template validation")
        line = builtin_templates()[0]
        with pytest.raises(ValidationException):
            dataclasses.replace(line, amplitudes=(1.0, 1.0))
        with pytest.raises(ValidationException):
            dataclasses.replace(line, dropout=1.0)
        with pytest.raises(ValidationException):
            dataclasses.replace(line, k_min=1)
        with pytest.raises(ValidationException):
            dataclasses.replace(line, k_min=5, k_max=5, positions=line.positions[:4], amplitudes=line.amplitudes[:4],
                                alphas=line.alphas[:4], lengths=line.lengths[:4], gammas=line.gammas[:4],
                                phis=line.phis[:4])
        path = tmp_path / "bad.json"
        entry = template_to_dict(line)
        entry["colour"] = "red"
        path.write_text(json.dumps([entry]), encoding="utf-8")
        with pytest.raises(ValidationException):
            load_templates(path)
        path.write_text(json.dumps(entry), encoding="utf-8")
        with pytest.raises(ValidationException):
            load_templates(path)


@pytest.mark.synth
class TestGenerate:

    def test_canonical_layout_without_noise(self):
        logger.info("Checking that zero jitter, dropout and rotation reproduce the templates")
        templates = still_templates()
        records = generate(templates, 2, seed=3, rotation=0.0)
        assert [r["label"] for r in records] == [0, 0, 1, 1, 2, 2]
        for record in records:
            template = templates[record["label"]]
            assert [tuple(c[5:7]) for c in record["centers"]] == list(template.positions)
            assert [c[0] for c in record["centers"]] == list(template.amplitudes)
            assert [c[1] for c in record["centers"]] == list(template.alphas)

    def test_same_seed_same_bytes(self, tmp_path):
        logger.info("Checking byte-identical output for equal seeds")
        paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
        for path in paths:
            write_jsonl(generate(builtin_templates(), 5, seed=42), path)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        write_jsonl(generate(builtin_templates(), 5, seed=43), tmp_path / "c.jsonl")
        assert (tmp_path / "c.jsonl").read_bytes() != paths[0].read_bytes()

    def test_counts_stay_in_range(self):
        logger.info("Checking K against [k_min, k_max] over many draws")
        templates = builtin_templates()
        records = generate(templates, 3400, seed=0)
        assert len(records) == 3 * 3400
        for record in records:
            template = templates[record["label"]]
            assert template.k_min <= len(record["centers"]) <= template.k_max

    def test_rotation_keeps_weights(self):
        logger.info("Checking that a global rotation leaves the edge weights unchanged")
        for template in still_templates():
            a = sample_record(template, 0, np.random.default_rng(8), rotation=0.0)
            b = sample_record(template, 0, np.random.default_rng(8), rotation=1.1)
            wa = build_graph(a["centers"], 1.0).weights
            wb = build_graph(b["centers"], 1.0).weights
            assert np.allclose(wa, wb, rtol=0, atol=1e-12)
            assert all(-np.pi <= c[3] < np.pi for c in b["centers"])

    def test_no_rotate_flag(self):
        logger.info("Checking that rotate=False keeps the template orientation")
        records = generate(still_templates(), 1, rotate=False)
        assert [tuple(c[5:7]) for c in records[0]["centers"]] == list(builtin_templates()[0].positions)

    def test_nearest_centroid_baseline(self):
        logger.info("Checking that classes are separable by sorted pairwise distances")
        templates = builtin_templates()
        train = generate(templates, 60, seed=0)
        test = generate(templates, 60, seed=1)
        features = np.array([distance_signature(r) for r in train])
        labels = np.array([r["label"] for r in train])
        centroids = np.array([features[labels == c].mean(axis=0) for c in range(len(templates))])
        hits = 0
        for record in test:
            distance = np.linalg.norm(centroids - distance_signature(record), axis=1)
            hits += int(np.argmin(distance)) == record["label"]
        accuracy = hits / len(test)
        logger.info(f"Nearest-centroid accuracy {accuracy:.3f}")
        assert accuracy > 0.8

    def test_argument_validation(self):
        logger.info("Checking generate argument validation")
        with pytest.raises(ValidationException):
            generate(builtin_templates()[:1], 3)
        with pytest.raises(ValidationException):
            generate(builtin_templates(), 0)


@pytest.mark.synth
class TestRandomRecord:

    def test_size_and_fields(self):
        logger.info("Checking random records")
        rng = np.random.default_rng(5)
        for k in (2, 17, 40):
            record = random_record(k, rng, class_count=3)
            assert len(record["centers"]) == k
            assert 0 <= record["label"] < 3
            assert all(len(c) == 7 and c[0] > 0 for c in record["centers"])

    def test_size_range(self):
        logger.info("Checking the accepted scatterer counts")
        for k in (1, 41):
            with pytest.raises(ValidationException):
                random_record(k, np.random.default_rng(0))

    def test_template_field_names(self):
        logger.info("Checking that template dicts use the dataclass field names")
        names = {f.name for f in dataclasses.fields(ClassTemplate)}
        assert set(template_to_dict(builtin_templates()[2])) == names
