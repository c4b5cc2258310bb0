"""Tests for run configs and dataset manifests"""
import json
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from src.cosst.config import (
    FilterMode,
    FinetuneOrigin,
    GenerateSpec,
    RunConfig,
    load_datasets,
    load_json_model,
    load_manifest,
    load_run_config,
    write_manifests,
)
from src.cosst.core import ClassCatalog, Split
from src.cosst.exceptions import CatalogMismatchError, ManifestError


class TestRunConfig:
    """Validation and defaults"""

    def test_defaults(self):
        config = RunConfig(datasets=["a.json"])
        assert config.stage1.base_lr == 0.01
        assert config.stage1.momentum == 0.99
        assert config.stage1.max_epochs == 1000
        assert config.stage2.lr == 0.0001
        assert config.stage2.epochs == 200
        assert config.stage2.filtering == FilterMode.IMAGE
        assert config.stage2.finetune_origin == FinetuneOrigin.THETA0
        assert config.stage2.tau_quantile == 0.999

    @pytest.mark.parametrize("stage2", [{"tau_quantile": 1.0}, {"plateau_delta": -0.1}, {"max_iterations": -1}])
    def test_invalid_stage2(self, stage2):
        with pytest.raises(ValidationError):
            RunConfig(datasets=["a.json"], stage2=stage2)

    def test_needs_datasets(self):
        with pytest.raises(ValidationError):
            RunConfig(datasets=[])

    def test_even_kernel_rejected(self):
        with pytest.raises(ValidationError):
            RunConfig(datasets=["a.json"], model={"kernel_size": 4})

    def test_relative_manifest_paths_resolve_against_config(self, tmp_path):
        folder = tmp_path / "configs"
        folder.mkdir()
        path = folder / "run.json"
        path.write_text(json.dumps({"schema_version": 1, "datasets": ["../corpus/a.json"]}))
        config = load_run_config(path)
        assert config.datasets == [str((tmp_path / "corpus" / "a.json").resolve())]

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{not json")
        with pytest.raises(ManifestError):
            load_run_config(path)

    def test_wrong_schema_version(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"schema_version": 2, "datasets": ["a.json"]}))
        with pytest.raises(ValidationError):
            load_run_config(path)


class TestManifests:
    """Writing and loading corpora"""

    def test_roundtrip(self, tmp_path, tiny_scene, tiny_corpus):
        catalog = tiny_scene.catalog()
        paths = write_manifests(tiny_corpus, catalog, tmp_path)
        assert [p.name for p in paths] == ["ds_a_manifest.json", "ds_b_manifest.json"]
        loaded_catalog, datasets = load_datasets(paths)
        assert loaded_catalog == catalog
        assert len(datasets) == len(tiny_corpus)
        for original, loaded in zip(tiny_corpus, datasets):
            assert (loaded.name, loaded.split, loaded.annotated) == (original.name, original.split, original.annotated)
            assert np.array_equal(loaded.samples[0].image.values, original.samples[0].image.values)
            assert np.array_equal(loaded.samples[0].oracle.labels, original.samples[0].oracle.labels)

    def test_split_selection(self, tmp_path, tiny_scene, tiny_corpus):
        paths = write_manifests(tiny_corpus, tiny_scene.catalog(), tmp_path)
        _, datasets = load_datasets(paths, splits=[Split.TEST])
        assert {d.split for d in datasets} == {Split.TEST}

    def test_catalog_mismatch_between_manifests(self, tmp_path, tiny_corpus):
        first = write_manifests(tiny_corpus[:3], ClassCatalog(("left", "right")), tmp_path / "a")
        second = write_manifests(tiny_corpus[3:], ClassCatalog(("left", "other")), tmp_path / "b")
        with pytest.raises(CatalogMismatchError):
            load_datasets(first + second)

    def test_missing_raster(self, tmp_path, tiny_scene, tiny_corpus):
        paths = write_manifests(tiny_corpus[:1], tiny_scene.catalog(), tmp_path)
        next((tmp_path / "ds_a" / "train").glob("*_label.grid")).unlink()
        with pytest.raises(ManifestError):
            load_datasets(paths)

    def test_annotated_outside_catalog(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({
            "schema_version": 1,
            "catalog": ["a"],
            "datasets": [{"name": "d", "annotated": [2], "split": "train", "samples": []}],
        }))
        with pytest.raises(ManifestError):
            load_manifest(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_datasets([tmp_path / "none.json"])


class TestReferenceFiles:
    """The shipped corpus spec and run config"""

    def test_reference_spec_file_parses(self):
        spec = load_json_model(Path(__file__).parent.parent / "configs" / "mini_bowel_spec.json", GenerateSpec)
        assert spec.scene.catalog().total_classes == 4
        assert spec.partition == [[1, 2], [3, 4]]

    def test_reference_run_file_parses(self):
        config = load_run_config(Path(__file__).parent.parent / "configs" / "mini_bowel_run.json")
        assert config.stage1.max_epochs == 120
        assert config.stage1.exclusion_weight == 1.0
        assert config.stage2.filtering == FilterMode.IMAGE
