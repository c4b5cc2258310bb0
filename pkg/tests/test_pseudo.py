"""Tests for pseudo-label generation and the merged pseudo dataset"""
import json

import numpy as np
import pytest

from src.cosst.core import ClassCatalog, GridImage, LabelMap, Split, one_hot
from src.cosst.exceptions import InvalidInputError, ManifestError
from src.cosst.model import SegModel
from src.cosst.pseudo import (
    PseudoSample,
    argmax_labels,
    build_pseudo_dataset,
    load_pseudo_dataset,
    merge_with_gt,
    save_pseudo_dataset,
)
from src.cosst.synth import generate_corpus


class TestMergeWithGroundTruth:
    """Ground truth takes priority over pseudo labels"""

    def test_ground_truth_wins(self):
        pseudo = LabelMap(np.array([[2, 2, 1, 0]]))
        gt = LabelMap(np.array([[1, 0, 0, 0]]))
        merged = merge_with_gt(pseudo, gt, {1})
        assert merged.labels.tolist() == [[1, 2, 0, 0]]

    def test_pseudo_annotated_classes_discarded(self):
        pseudo = LabelMap(np.array([[1, 1]]))
        gt = LabelMap(np.array([[0, 0]]))
        assert merge_with_gt(pseudo, gt, {1}).labels.tolist() == [[0, 0]]

    def test_empty_ground_truth_keeps_unannotated_pseudo_labels(self):
        pseudo = LabelMap(np.array([[0, 1, 2, 3]]))
        merged = merge_with_gt(pseudo, LabelMap(np.zeros((1, 4), dtype=int)), {1})
        assert merged.labels.tolist() == [[0, 0, 2, 3]]

    def test_empty_pseudo_returns_ground_truth(self):
        gt = LabelMap(np.array([[1, 0, 3, 0]]))
        merged = merge_with_gt(LabelMap(np.zeros((1, 4), dtype=int)), gt, {1, 3})
        assert np.array_equal(merged.labels, gt.labels)

    @pytest.mark.parametrize("seed", range(10))
    def test_idempotent_and_preserves_ground_truth(self, seed):
        rng = np.random.default_rng(seed)
        annotated = {1, 3}
        pseudo = LabelMap(rng.integers(0, 4, size=(8, 8)))
        gt = LabelMap(rng.choice([0, 1, 3], size=(8, 8)))
        merged = merge_with_gt(pseudo, gt, annotated)
        assert np.array_equal(merge_with_gt(merged, gt, annotated).labels, merged.labels)
        restricted = np.where(np.isin(merged.labels, sorted(annotated)), merged.labels, 0)
        assert np.array_equal(restricted, gt.labels)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            merge_with_gt(LabelMap(np.zeros((2, 2))), LabelMap(np.zeros((2, 3))), {1})


class TestArgmax:
    def test_ties_resolve_to_lowest_class(self):
        probs = np.array([[[0.4]], [[0.4]], [[0.2]]])
        assert argmax_labels(probs).labels.tolist() == [[0]]
        assert (argmax_labels(np.full((4, 3, 3), 0.25)).labels == 0).all()

    def test_one_hot_round_trip_is_identity(self):
        labels = np.random.default_rng(0).integers(0, 5, size=(8, 8))
        assert np.array_equal(argmax_labels(one_hot(labels, 5)).labels, labels)

    def test_matches_per_pixel_maximum(self):
        rng = np.random.default_rng(1)
        probs = rng.dirichlet(np.ones(4), size=(8, 8)).transpose(2, 0, 1)
        labels = argmax_labels(probs).labels
        for row in range(8):
            for col in range(8):
                column = [probs[c, row, col] for c in range(4)]
                assert labels[row, col] == column.index(max(column))


class TestPseudoSample:
    """Invariants of merged samples"""

    def _sample(self, merged, gt, gt_classes=frozenset({1}), pseudo_classes=frozenset({2})):
        return PseudoSample("s", "d", GridImage(np.zeros((1, 1, 2))), LabelMap(np.array([merged])),
                            LabelMap(np.array([gt])), gt_classes, pseudo_classes, 1)

    def test_overlapping_class_sets_rejected(self):
        with pytest.raises(InvalidInputError, match="overlap"):
            self._sample([1, 2], [1, 0], frozenset({1, 2}), frozenset({2}))

    def test_overriding_ground_truth_rejected(self):
        with pytest.raises(InvalidInputError, match="overrides"):
            self._sample([2, 2], [1, 0])


class TestBuildPseudoDataset:
    """Pseudo-labeling every training sample"""

    def test_only_training_split_is_used(self, tiny_corpus):
        model = SegModel.initialize(1, 3, m=2, hidden=2, seed=0)
        samples = build_pseudo_dataset(model, tiny_corpus, t=2)
        train = [d for d in tiny_corpus if d.split == Split.TRAIN]
        assert len(samples) == sum(len(d) for d in train)
        for sample in samples:
            assert sample.source_iteration == 2
            assert sample.gt_classes | sample.pseudo_classes == frozenset({1, 2})
            labeled = sample.gt_label.labels != 0
            assert np.array_equal(sample.merged_label.labels[labeled], sample.gt_label.labels[labeled])

    def test_fully_annotated_dataset_needs_no_pseudo_labels(self, tiny_scene):
        corpus = generate_corpus(tiny_scene, 6, [[1, 2]])
        model = SegModel.initialize(1, 3, m=2, hidden=2, seed=2)
        for sample in build_pseudo_dataset(model, corpus, 1):
            assert sample.pseudo_classes == frozenset()
            assert np.array_equal(sample.merged_label.labels, sample.gt_label.labels)

    def test_disjoint_single_class_datasets(self, tiny_corpus):
        model = SegModel.initialize(1, 3, m=2, hidden=2, seed=3)
        for sample in build_pseudo_dataset(model, tiny_corpus, 1):
            assert len(sample.gt_classes) == 1
            assert len(sample.pseudo_classes) == 1

    def test_parallel_matches_serial(self, tiny_corpus):
        model = SegModel.initialize(1, 3, m=2, hidden=2, seed=1)
        serial = build_pseudo_dataset(model, tiny_corpus, 1, workers=1)
        threaded = build_pseudo_dataset(model, tiny_corpus, 1, workers=3)
        assert [s.sample_id for s in serial] == [s.sample_id for s in threaded]
        assert all(np.array_equal(a.merged_label.labels, b.merged_label.labels) for a, b in zip(serial, threaded))


class TestPersistence:
    """Pseudo manifests on disk"""

    def test_save_and_load(self, tmp_path, tiny_corpus):
        model = SegModel.initialize(1, 3, m=2, hidden=2, seed=0)
        samples = build_pseudo_dataset(model, tiny_corpus, 1)
        catalog = ClassCatalog(("left", "right"))
        path = save_pseudo_dataset(samples, tmp_path / "pseudo", catalog)
        loaded_catalog, loaded = load_pseudo_dataset(path)
        assert loaded_catalog == catalog
        assert [s.sample_id for s in loaded] == [s.sample_id for s in samples]
        assert np.array_equal(loaded[0].merged_label.labels, samples[0].merged_label.labels)
        assert loaded[0].oracle is not None

    def test_wrong_kind(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text('{"kind": "corpus", "catalog": ["a"], "samples": []}')
        with pytest.raises(ManifestError):
            load_pseudo_dataset(path)

    def test_missing_sample_field(self, tmp_path, tiny_corpus):
        model = SegModel.initialize(1, 3, m=2, hidden=2, seed=0)
        path = save_pseudo_dataset(build_pseudo_dataset(model, tiny_corpus, 1), tmp_path / "pseudo",
                                   ClassCatalog(("left", "right")))
        document = json.loads(path.read_text())
        del document["samples"][0]["gt"]
        path.write_text(json.dumps(document))
        with pytest.raises(ManifestError, match="gt"):
            load_pseudo_dataset(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text("{")
        with pytest.raises(ManifestError):
            load_pseudo_dataset(path)
