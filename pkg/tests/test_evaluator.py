import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opendg.data import LabeledExample
from opendg.encoders import Image
from opendg.errors import InputError
from opendg.evaluator import (
    EvalReport,
    Predictor,
    SWEEP_COLUMNS,
    compute_h_score,
    evaluate,
    evaluate_checkpoint,
    mean_report,
    openness_sweep,
    report_from_confusion,
    write_sweep_table,
)

from .conftest import random_image


class TestHScore:
    def test_equal_accuracies(self):
        assert compute_h_score(0.5, 0.5) == pytest.approx(0.5)

    def test_zero_component(self):
        assert compute_h_score(0.9, 0.0) == 0.0
        assert compute_h_score(0.0, 0.0) == 0.0

    def test_known_value(self):
        assert compute_h_score(0.8, 0.6) == pytest.approx(0.685714, abs=1e-6)

    def test_input_range_enforced(self):
        with pytest.raises(InputError):
            compute_h_score(1.2, 0.5)
        with pytest.raises(InputError):
            compute_h_score(0.5, -0.1)

    @given(st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=200)
    def test_properties(self, a, b):
        h = compute_h_score(a, b)
        assert h == pytest.approx(compute_h_score(b, a))
        assert h <= 2 * min(a, b) + 1e-12
        assert 0.0 <= h <= 1.0

    @given(st.floats(0, 1))
    def test_idempotent_on_diagonal(self, x):
        assert compute_h_score(x, x) == pytest.approx(x)


def planted_predictor(mapping):
    """Predict from a planted image-byte lookup table."""
    return lambda image: mapping[image.pixels.tobytes()]


def constant_items(labels, domain="target"):
    items, mapping = [], {}
    for i, (label, pred) in enumerate(labels):
        px = np.full((4, 4, 3), (i + 1) / 64.0)
        items.append(LabeledExample(image=Image(pixels=px, domain_tag=domain),
                                    label=label, domain=domain))
        mapping[px.tobytes()] = pred
    return items, mapping


class TestEvaluate:
    KNOWN = ["circle", "square"]

    def test_perfect_case(self):
        items, mapping = constant_items([("circle", "circle"), ("square", "square"),
                                         ("ring", "unknown")])
        report = evaluate(items, planted_predictor(mapping), self.KNOWN)
        assert (report.closed_acc, report.novel_acc, report.h_score) == (1.0, 1.0, 1.0)

    def test_counts_match_hand_counted_oracle(self):
        planted = [
            ("circle", "circle"), ("circle", "square"), ("circle", "unknown"),
            ("square", "square"), ("square", "square"),
            ("ring", "unknown"), ("ring", "circle"),
            ("stripes", "unknown"), ("stripes", "unknown"), ("stripes", "square"),
        ]
        items, mapping = constant_items(planted)
        report = evaluate(items, planted_predictor(mapping), self.KNOWN)
        # Hand count: known 5, correct 3; novel 5, rejected 3.
        assert report.n_known == 5 and report.n_novel == 5
        assert report.closed_acc == pytest.approx(3 / 5)
        assert report.novel_acc == pytest.approx(3 / 5)
        assert report.h_score == pytest.approx(compute_h_score(3 / 5, 3 / 5))

    def test_known_item_predicted_unknown_is_an_error(self):
        items, mapping = constant_items([("circle", "unknown"), ("ring", "unknown")])
        report = evaluate(items, planted_predictor(mapping), self.KNOWN)
        assert report.closed_acc == 0.0
        assert report.novel_acc == 1.0

    def test_confusion_recompute_identity(self):
        planted = [("circle", "circle"), ("circle", "square"), ("ring", "unknown")]
        items, mapping = constant_items(planted)
        report = evaluate(items, planted_predictor(mapping), self.KNOWN)
        recomputed = report_from_confusion(report.confusion, report.known_classes)
        assert recomputed.closed_acc == report.closed_acc
        assert recomputed.novel_acc == report.novel_acc
        assert recomputed.h_score == report.h_score

    def test_empty_target_rejected(self):
        with pytest.raises(InputError):
            evaluate([], lambda image: "circle", self.KNOWN)

    def test_report_serialization_roundtrip(self, tmp_path):
        items, mapping = constant_items([("circle", "circle"), ("ring", "unknown")])
        report = evaluate(items, planted_predictor(mapping), self.KNOWN)
        path = tmp_path / "report.json"
        report.save(path)
        loaded = EvalReport.load(path)
        assert loaded == report
        assert loaded.to_json() == report.to_json()

    def test_mean_report(self):
        a = EvalReport(0.8, 0.6, compute_h_score(0.8, 0.6), 10, 5, ["c"], [])
        b = EvalReport(0.6, 0.8, compute_h_score(0.6, 0.8), 10, 5, ["c"], [])
        mean = mean_report([a, b])
        assert mean.closed_acc == pytest.approx(0.7)
        assert mean.novel_acc == pytest.approx(0.7)


class TestPredictor:
    def _trained_predictor(self, tiny_backbone, tmp_path):
        from .test_trainer import make_config, make_setup
        from opendg.trainer import train

        setup = make_setup(tiny_backbone)
        result = train(make_config(epochs=1), setup, tmp_path)
        return Predictor.from_checkpoint(result.checkpoint_path, tiny_backbone), result

    def test_vocabulary_ends_with_unknown(self, tiny_backbone, tmp_path):
        predictor, _ = self._trained_predictor(tiny_backbone, tmp_path)
        assert predictor.vocabulary[-1] == "unknown"
        assert predictor.vocabulary[:-1] == sorted(predictor.vocabulary[:-1])

    def test_matches_scalar_loop_argmax_oracle(self, tiny_backbone, tmp_path, rng):
        predictor, _ = self._trained_predictor(tiny_backbone, tmp_path)
        for _ in range(25):
            image = random_image(rng)
            sims = predictor.similarities(image)
            best_i, best_v = 0, -math.inf
            for i, v in enumerate(sims.tolist()):
                if v > best_v:
                    best_i, best_v = i, v
            assert predictor.predict(image) == predictor.vocabulary[best_i]

    def test_deterministic_predictions(self, tiny_backbone, tmp_path, rng):
        predictor, result = self._trained_predictor(tiny_backbone, tmp_path)
        other = Predictor.from_checkpoint(result.checkpoint_path, tiny_backbone)
        image = random_image(rng)
        assert predictor.predict(image) == other.predict(image)

    def test_scale_invariance_of_similarity_ranking(self, tiny_backbone, tmp_path, rng):
        """Rescaling the image embedding cannot change the argmax."""
        predictor, _ = self._trained_predictor(tiny_backbone, tmp_path)
        image = random_image(rng)
        sims = predictor.similarities(image)
        import torch
        from opendg.losses import cosine

        with torch.no_grad():
            emb = tiny_backbone.encode_image(image, prompt=predictor.modules.visual_prompt)
            scaled = 7.3 * emb.vector
            rescored = np.array([float(cosine(p, scaled)) for p in predictor._prompt_embs])
        assert int(np.argmax(rescored)) == int(np.argmax(sims))

    def test_evaluate_checkpoint_end_to_end(self, tiny_backbone, tmp_path):
        from opendg.data import ShotConfig, build_splits
        from opendg.synthetic import SyntheticShapeDataset

        predictor, result = self._trained_predictor(tiny_backbone, tmp_path)
        split = build_splits("synthetic-shapes", "outline")
        data = SyntheticShapeDataset(seed=9, size=16, per_class=2)
        items = [LabeledExample(image=img, label=name, domain="outline")
                 for idx in sorted(split.target_classes)
                 for name in [split.class_name(idx)]
                 for img in data.images("outline", name)]
        report = evaluate_checkpoint(items, result.checkpoint_path, tiny_backbone)
        assert 0.0 <= report.h_score <= 1.0
        assert report.n_known == 8 and report.n_novel == 6


class TestOpennessSweep:
    KNOWN = ["a", "b", "c", "d"]

    def _items(self):
        planted = [(k, k) for k in self.KNOWN for _ in range(2)]
        planted += [(f"novel{i}", "unknown" if i % 2 == 0 else "a")
                    for i in range(4) for _ in range(2)]
        return constant_items(planted)

    def test_degenerate_sweep_matches_evaluate(self):
        items, mapping = self._items()
        fn = planted_predictor(mapping)
        full = evaluate(items, fn, self.KNOWN)
        points = openness_sweep(items, fn, self.KNOWN, ratios=[1.0])
        assert len(points) == 1
        assert points[0].report.h_score == pytest.approx(full.h_score)
        assert points[0].report.n_novel == full.n_novel

    def test_two_seeds_different_subsamples(self):
        items, mapping = self._items()
        fn = planted_predictor(mapping)
        a = openness_sweep(items, fn, self.KNOWN, ratios=[0.5], seed=1)
        b = openness_sweep(items, fn, self.KNOWN, ratios=[0.5], seed=2)
        assert a[0].novel_classes != b[0].novel_classes

    def test_infeasible_ratio_skipped_with_warning(self):
        items, mapping = self._items()
        fn = planted_predictor(mapping)
        with pytest.warns(UserWarning):
            points = openness_sweep(items, fn, self.KNOWN, ratios=[0.01, 5.0, 0.5])
        assert len(points) == 1

    def test_table_schema(self, tmp_path):
        items, mapping = self._items()
        fn = planted_predictor(mapping)
        points = openness_sweep(items, fn, self.KNOWN, ratios=[0.25, 0.5, 1.0], seed=3)
        path = tmp_path / "sweep.csv"
        write_sweep_table(points, path, seed=3)
        import csv

        with path.open() as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == SWEEP_COLUMNS
        assert len(rows) == 1 + len(points)
        for row, point in zip(rows[1:], points):
            assert float(row[0]) == point.ratio
            assert int(row[1]) == len(point.novel_classes)
            assert 0.0 <= float(row[4]) <= 1.0
