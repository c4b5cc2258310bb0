"""Tests for stage-1 training, the self-training loop and the Multi-Nets baseline"""
import json
from unittest.mock import patch

import numpy as np
import pytest

from src.cosst.config import Stage2Config
from src.cosst.core import ClassCatalog, GridImage, Split
from src.cosst.exceptions import EmptyFilteredDatasetError, ManifestError, TrainingDivergedError
from src.cosst.losses import LossReport, fulllabel_loss
from src.cosst.model import PARAM_NAMES, SegModel, Stage, TrainState, load_checkpoint
from src.cosst.selftrain import (
    STATUS_COMPLETED,
    STOP_EMPTY_FILTERED,
    STOP_MAX_ITERATIONS,
    STOP_PLATEAU,
    STATUS_SKIPPED,
    IterationRecord,
    MultiNetEnsemble,
    RunDirectory,
    TrainItem,
    initial_model,
    run_epochs,
    run_pipeline,
    selftrain_loop,
    train_multinets,
    train_stage1,
    validation_scores,
    model_predictor,
)
from src.cosst.synth import generate_corpus, oracle_pseudo_dataset

CATALOG = ClassCatalog(("left", "right"))


def _same_params(a, b):
    return all(np.array_equal(a.params[n], b.params[n]) for n in PARAM_NAMES)


def _close_params(a, b):
    return all(np.allclose(a.params[n], b.params[n], rtol=0.0, atol=1e-8) for n in PARAM_NAMES)


def _oracle_pseudo(model, datasets, t, workers=1):
    return oracle_pseudo_dataset(datasets, t)


def _stage2(config, **updates):
    stage2 = Stage2Config.model_validate({**config.stage2.model_dump(), **updates})
    return config.model_copy(update={"stage2": stage2})


class TestStage1:
    """Training the unified model on partial labels"""

    def test_zero_epochs_returns_initialization(self, tiny_config, tiny_corpus):
        config = tiny_config.model_copy(update={"stage1": tiny_config.stage1.model_copy(update={"max_epochs": 0})})
        result = train_stage1(config, CATALOG, tiny_corpus)
        assert _same_params(result.state.model, initial_model(config, CATALOG, 1))
        assert result.history == []

    def test_loss_csv_and_validation(self, tmp_path, tiny_config, tiny_corpus):
        result = train_stage1(tiny_config, CATALOG, tiny_corpus, tmp_path / "loss.csv")
        lines = (tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,stage,total,marginal,exclusion,saturated,val_dice"
        assert len(lines) == 3
        assert result.val_dice is not None and 0.0 <= result.val_dice <= 1.0

    def test_deterministic(self, tiny_config, tiny_corpus):
        a = train_stage1(tiny_config, CATALOG, tiny_corpus)
        b = train_stage1(tiny_config, CATALOG, tiny_corpus)
        assert _same_params(a.state.model, b.state.model)
        assert a.val_dice == b.val_dice

    def test_fully_labeled_dataset_matches_supervised_training(self, tiny_config, tiny_scene):
        datasets = generate_corpus(tiny_scene, 6, [[1, 2]])
        partial = train_stage1(tiny_config, CATALOG, datasets)

        def make_loss(labels):
            return lambda probs: fulllabel_loss(probs, labels)

        items = [TrainItem(s.sample_id, s.image, s.label.labels, make_loss)
                 for d in datasets if d.split == Split.TRAIN for s in d.samples]
        state = TrainState.fresh(initial_model(tiny_config, CATALOG, 1), tiny_config.stage1.base_lr,
                                 tiny_config.stage1.max_epochs, Stage.INITIAL, rng_seed=tiny_config.seed,
                                 momentum=tiny_config.stage1.momentum)
        evaluate = lambda m: validation_scores(model_predictor(m), datasets, 2)
        supervised = run_epochs(state, items, evaluate, tiny_config, tiny_config.stage1.batch_size,
                                tiny_config.stage1.eval_every)
        assert _close_params(partial.state.model, supervised.state.model)

    def test_divergence_carries_last_state(self, tiny_config, tiny_corpus):
        nan_report = (LossReport(float("nan"), 0.0, 0.0), {})
        with patch("src.cosst.selftrain.forward_backward", return_value=nan_report):
            with pytest.raises(TrainingDivergedError) as info:
                train_stage1(tiny_config, CATALOG, tiny_corpus)
        assert info.value.last_state is not None
        assert info.value.last_state.step == 0


class TestSelfTrainLoop:
    """Pseudo-label, assess, filter, fine-tune"""

    @pytest.fixture
    def theta0(self, tiny_config, tiny_corpus):
        return train_stage1(tiny_config, CATALOG, tiny_corpus)

    def test_no_iterations_returns_theta0(self, tiny_config, tiny_corpus, theta0):
        config = _stage2(tiny_config, max_iterations=0)
        result = selftrain_loop(theta0.state, config, CATALOG, tiny_corpus, theta0_val=theta0.val_dice)
        assert result.records == []
        assert result.best_iteration == 0
        assert result.state is theta0.state

    def test_iteration_lineage_and_best_checkpoint(self, tmp_path, tiny_config, tiny_corpus, theta0):
        config = _stage2(tiny_config, max_iterations=2, stop_on_plateau=False, filtering="none")
        run_dir = RunDirectory(tmp_path)
        result = selftrain_loop(theta0.state, config, CATALOG, tiny_corpus, run_dir, theta0.val_dice)
        assert [r.t for r in result.records] == [1, 2]
        for record in result.records:
            assert record.finetuned_from == "theta_0"
            assert record.kept_count <= record.total_count == 12
            state, _, meta = load_checkpoint(tmp_path / record.checkpoint_ref, CATALOG)
            assert meta["finetuned_from"] == "theta_0"
            assert state.origin == "theta_0"
            assert state.stage == Stage.FINETUNE
        assert not (tmp_path / "qa_iter1.csv").exists()
        assert (tmp_path / "pseudo_iter2" / "pseudo_manifest.json").exists()
        best = max([theta0.val_dice] + [r.val_dice_mean for r in result.records])
        assert result.best_val_dice == best

    def test_image_filtering_writes_qa_report(self, tmp_path, tiny_config, tiny_corpus, theta0):
        result = selftrain_loop(theta0.state, tiny_config, CATALOG, tiny_corpus, RunDirectory(tmp_path),
                                theta0.val_dice)
        header = (tmp_path / "qa_iter1.csv").read_text().splitlines()[0]
        assert header.startswith("sample_id")
        assert result.records[0].status in (STATUS_COMPLETED, STATUS_SKIPPED)

    def test_fine_tune_from_previous(self, tiny_config, tiny_corpus, theta0):
        config = _stage2(tiny_config, max_iterations=2, stop_on_plateau=False, finetune_origin="previous",
                         filtering="none")
        result = selftrain_loop(theta0.state, config, CATALOG, tiny_corpus, theta0_val=theta0.val_dice)
        assert [r.finetuned_from for r in result.records] == ["theta_0", "theta_1"]
        assert all(r.kept_count == r.total_count for r in result.records)

    def test_empty_filtered_dataset_stops_the_loop(self, tiny_config, tiny_corpus, theta0):
        error = EmptyFilteredDatasetError("all filtered", iteration=1, total_count=12)
        with patch("src.cosst.selftrain.filter_dataset", side_effect=error):
            result = selftrain_loop(theta0.state, tiny_config, CATALOG, tiny_corpus, theta0_val=theta0.val_dice)
        assert result.stop_reason == STOP_EMPTY_FILTERED
        assert result.records[-1].status == STATUS_SKIPPED
        assert result.state is theta0.state

    def test_corruption_is_injected(self, tiny_config, tiny_corpus, theta0):
        config = _stage2(tiny_config, corruption={"magnitude": 0.25, "fraction": 0.5}, filtering="none")
        with patch("src.cosst.selftrain.build_pseudo_dataset", side_effect=_oracle_pseudo):
            result = selftrain_loop(theta0.state, config, CATALOG, tiny_corpus, theta0_val=theta0.val_dice)
        assert result.records[0].corrupted_count == 6

    def test_determinism(self, tiny_config, tiny_corpus, theta0):
        a = selftrain_loop(theta0.state, tiny_config, CATALOG, tiny_corpus, theta0_val=theta0.val_dice)
        b = selftrain_loop(theta0.state, tiny_config, CATALOG, tiny_corpus, theta0_val=theta0.val_dice)
        assert [r.model_dump() for r in a.records] == [r.model_dump() for r in b.records]

    def test_record_invariant(self):
        with pytest.raises(ValueError):
            IterationRecord(t=1, kept_count=5, total_count=4)


class TestRunPipeline:
    """Run directory and resume"""

    def test_summary_and_resume(self, tmp_path, tiny_config, tiny_corpus):
        run_dir = RunDirectory(tmp_path / "run")
        _, first = run_pipeline(tiny_config, CATALOG, tiny_corpus, run_dir)
        summary = json.loads(run_dir.summary_path.read_text())
        assert summary["best_iteration"] == first.best_iteration
        assert "created_at" in summary
        assert (run_dir.root / "config.json").exists()
        assert run_dir.checkpoint(0).exists()

        with patch("src.cosst.selftrain.train_stage1", side_effect=AssertionError("stage 1 rerun")):
            _, resumed = run_pipeline(tiny_config, CATALOG, tiny_corpus, run_dir, resume=True)
        assert [r.model_dump() for r in resumed.records] == [r.model_dump() for r in first.records]
        assert resumed.best_val_dice == first.best_val_dice

    def test_resume_after_plateau_does_not_iterate(self, tmp_path, tiny_config, tiny_corpus):
        config = _stage2(tiny_config, max_iterations=3, plateau_delta=10.0, filtering="none")
        run_dir = RunDirectory(tmp_path / "run")
        _, first = run_pipeline(config, CATALOG, tiny_corpus, run_dir)
        assert first.stop_reason == STOP_PLATEAU
        assert len(first.records) == 1
        assert run_dir.read_log().stop_reason == STOP_PLATEAU

        with patch("src.cosst.selftrain.finetune", side_effect=AssertionError("fine-tuned after plateau")):
            _, resumed = run_pipeline(config, CATALOG, tiny_corpus, run_dir, resume=True)
        assert resumed.stop_reason == STOP_PLATEAU
        assert len(resumed.records) == 1
        assert resumed.best_val_dice == first.best_val_dice

    def test_resume_continues_an_unfinished_run(self, tmp_path, tiny_config, tiny_corpus):
        config = _stage2(tiny_config, max_iterations=2, stop_on_plateau=False, filtering="none")
        run_dir = RunDirectory(tmp_path / "run")
        _, first = run_pipeline(config, CATALOG, tiny_corpus, run_dir)
        run_dir.write_records(first.records[:1])

        _, resumed = run_pipeline(config, CATALOG, tiny_corpus, run_dir, resume=True)
        assert [r.t for r in resumed.records] == [1, 2]
        assert resumed.stop_reason == STOP_MAX_ITERATIONS
        assert run_dir.read_log().stop_reason == STOP_MAX_ITERATIONS

    def test_iteration_log_is_validated(self, tmp_path):
        run_dir = RunDirectory(tmp_path)
        assert run_dir.read_log().records == []
        run_dir.records_path.write_text(json.dumps({"records": [{"t": 1, "kept_count": 5, "total_count": 4}]}))
        with pytest.raises(ManifestError):
            run_dir.read_log()
        run_dir.records_path.write_text("[not json")
        with pytest.raises(ManifestError):
            run_dir.read_log()


class TestMultiNets:
    """Per-dataset baseline"""

    def _member(self, b3):
        model = SegModel.zeros(1, 2, m=2, hidden=2)
        model.params["b3"] = np.array(b3, dtype=float)
        return model

    def test_most_confident_owner_wins(self):
        image = GridImage(np.zeros((1, 2, 2)))
        ensemble = MultiNetEnsemble([((1,), self._member([0.0, 1.0])), ((2,), self._member([0.0, 2.0]))])
        assert (ensemble.predict(image).labels == 2).all()

    def test_background_when_no_owner_claims(self):
        image = GridImage(np.zeros((1, 2, 2)))
        ensemble = MultiNetEnsemble([((1,), self._member([1.0, 0.0])), ((2,), self._member([3.0, 0.0]))])
        assert (ensemble.predict(image).labels == 0).all()

    def test_only_claiming_owner_labels(self):
        image = GridImage(np.zeros((1, 2, 2)))
        ensemble = MultiNetEnsemble([((1,), self._member([0.0, 1.0])), ((2,), self._member([3.0, 0.0]))])
        assert (ensemble.predict(image).labels == 1).all()

    def test_train_one_network_per_dataset(self, tiny_config, tiny_corpus):
        ensemble = train_multinets(tiny_config, CATALOG, tiny_corpus)
        assert [classes for classes, _ in ensemble.members] == [(1,), (2,)]
        assert all(model.num_classes == 2 for _, model in ensemble.members)
        dice, _ = validation_scores(ensemble.predict, tiny_corpus, 2)
        assert dice is not None
