import dataclasses
import logging

import numpy as np
import pytest

import sargtr.training
from sargtr.exceptions import CheckpointException, TrainingDivergedException, ValidationException
from sargtr.layers import ModelConfig, count_parameters, fit_standardization, init_params, make_batch, prepare_graph
from sargtr.recognizer import Recognizer
from sargtr.synth_data import builtin_templates, generate
from sargtr.training import (ABLATION_SETTINGS, Adam, AblationFlags, TrainConfig, ablate, batch_loss,
                             check_model_gradients, evaluate, predict, prepare_dataset,
                             run_ablation, split_dataset, train)
from test_util import TestGraphs

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def labeled_records(count=6, seed=0):
    records = TestGraphs.random_records([3 + i % 4 for i in range(count)], seed=seed)
    for index, record in enumerate(records):
        record["label"] = index % 2
    return records


@pytest.mark.training
class TestConfigAndAblation:

    def test_train_config_validation(self):
        logger.info("Checking TrainConfig validation")
        TrainConfig(learning_rate=0.0)
        for bad in ({"learning_rate": -1e-3}, {"beta1": 1.0}, {"epochs": 0}, {"batch_size": 0},
                    {"adam_eps": 0.0}, {"learning_rate": float("nan")}):
            with pytest.raises(ValidationException):
                TrainConfig(**bad)

    def test_no_flags_is_identity(self):
        logger.info("Checking that an empty ablation returns the config itself")
        config = TestGraphs.small_config()
        assert ablate(config, AblationFlags()) is config

    def test_flags_map_to_switches(self):
        logger.info("Checking each single-module ablation")
        config = TestGraphs.small_config()
        assert not ablate(config, AblationFlags(disable_dvm=True)).use_dvm
        assert not ablate(config, AblationFlags(disable_edge_enhance=True)).edge_enhance
        assert not ablate(config, AblationFlags(disable_gne=True)).use_gne
        assert not ablate(config, AblationFlags(disable_epe=True)).use_epe
        assert list(ABLATION_SETTINGS) == ["DVM", "Edge-Enhanced", "GNE", "EPE", "None"]
        assert AblationFlags.only(None) == AblationFlags()
        assert AblationFlags.only("disable_gne") == AblationFlags(disable_gne=True)

    def test_dvm_ablation_resets_statistics(self):
        logger.info("Checking that removing DVM drops the six-column statistics")
        config = TestGraphs.small_config(feature_mean=(0.0,) * 6, feature_std=(1.0,) * 6)
        ablated = ablate(config, AblationFlags(disable_dvm=True))
        assert not ablated.has_stats
        assert ablated.continuous_width == 7
        assert ablate(config, AblationFlags(disable_gne=True)).has_stats

    def test_disable_gne_zeroes_block(self):
        logger.info("Checking that the GNE ablation feeds zeros")
        config = ablate(TestGraphs.small_config(), AblationFlags(disable_gne=True))
        graph = prepare_graph(TestGraphs.random_records([5])[0], config)
        assert np.all(graph.gne == 0)

    def test_all_flags_shrink_the_model(self):
        logger.info("Checking that removing every module removes parameters")
        config = TestGraphs.small_config()
        everything = ablate(config, AblationFlags(True, True, True, True))
        assert count_parameters(everything) < count_parameters(config)


@pytest.mark.training
class TestTraining:

    def test_zero_learning_rate(self):
        logger.info("Checking that lr 0 leaves parameters unchanged")
        result = train(labeled_records(), TestGraphs.small_config(),
                       TrainConfig(learning_rate=0.0, epochs=3, batch_size=2, seed=4))
        initial = init_params(result.config, 4)
        for name in initial:
            assert np.array_equal(result.params[name], initial[name])
        assert len(result.history) == 3

    def test_same_seed_same_checkpoint(self, tmp_path):
        logger.info("Checking bit-identical checkpoints from two equal runs")
        paths = []
        for run in range(2):
            recognizer = Recognizer(TestGraphs.small_config(), checkpoint="")
            recognizer.fit(labeled_records(), TrainConfig(epochs=2, batch_size=4, learning_rate=1e-2, seed=1))
            paths.append(tmp_path / f"run{run}.ckpt")
            recognizer.save(paths[-1])
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_overfit_single_graph(self):
        logger.info("Checking that a single graph is memorized")
        record = labeled_records(1, seed=3)[0]
        result = train([record], TestGraphs.small_config(), TrainConfig(learning_rate=1e-2, epochs=500, batch_size=1))
        assert result.history[-1]["loss"] < 0.01
        assert evaluate([record] * 4, result.config, result.params).pcc == 1.0

    def test_batch_gradient_is_mean(self):
        logger.info("Checking that the batch gradient is the mean of per-graph gradients")
        config = TestGraphs.small_config()
        graphs = prepare_dataset(labeled_records(3, seed=5), config)
        config = fit_standardization(graphs, config)
        params = init_params(config, 2)
        _, _, together = batch_loss(make_batch(graphs), config, params)
        single = [batch_loss(make_batch([g]), config, params)[2] for g in graphs]
        for name in together:
            mean = sum(grads[name] for grads in single) / len(single)
            assert np.allclose(together[name], mean, atol=1e-12, rtol=0)

    def test_small_steps_decrease_loss(self):
        logger.info("Checking loss decrease over ten small Adam steps for ten seeds")
        monotone = 0
        for seed in range(10):
            config = TestGraphs.small_config()
            graphs = prepare_dataset(labeled_records(4, seed=seed), config)
            config = fit_standardization(graphs, config)
            params = init_params(config, seed)
            batch = make_batch(graphs)
            optimizer = Adam(params, learning_rate=1e-4)
            losses = []
            for _ in range(10):
                loss, _, grads = batch_loss(batch, config, params)
                losses.append(loss)
                optimizer.step(params, grads)
            monotone += all(b <= a for a, b in zip(losses, losses[1:]))
        assert monotone >= 9

    def test_label_out_of_range(self):
        logger.info("Checking that labels beyond class_count are rejected")
        records = labeled_records(2)
        records[1]["label"] = 2
        with pytest.raises(ValidationException):
            train(records, TestGraphs.small_config(), TrainConfig(epochs=1))

    def test_empty_dataset(self):
        logger.info("Checking that an empty training set is rejected")
        with pytest.raises(ValidationException):
            train([], TestGraphs.small_config(), TrainConfig(epochs=1))

    def test_divergence_names_epoch_and_batch(self, monkeypatch):
        logger.info("Checking the diagnostic on a non-finite loss")
        monkeypatch.setattr(sargtr.training, "batch_loss", lambda batch, config, params: (float("nan"), None, None))
        with pytest.raises(TrainingDivergedException) as e:
            train(labeled_records(), TestGraphs.small_config(), TrainConfig(epochs=1))
        assert "epoch 1" in str(e.value) and "batch 0" in str(e.value)

    def test_validation_metrics(self):
        logger.info("Checking per-epoch validation accuracy and the callback")
        seen = []
        result = train(labeled_records(4), TestGraphs.small_config(), TrainConfig(epochs=2, batch_size=2),
                       val_dataset=labeled_records(3, seed=9), on_epoch=seen.append)
        assert [m["epoch"] for m in seen] == [1, 2]
        assert all(0.0 <= m["val_acc"] <= 1.0 for m in result.history)


@pytest.mark.training
class TestEvaluation:

    @pytest.fixture(scope="class")
    def trained(self):
        records = labeled_records(8, seed=1)
        result = train(records, TestGraphs.small_config(), TrainConfig(epochs=3, batch_size=4, learning_rate=1e-2))
        return records, result

    def test_confusion_counts(self, trained):
        logger.info("Checking that confusion rows count the true labels")
        records, result = trained
        outcome = evaluate(records, result.config, result.params)
        assert outcome.total == 8
        assert outcome.confusion.sum(axis=1).tolist() == [4, 4]
        assert outcome.pcc == pytest.approx(np.trace(outcome.confusion) / 8)

    def test_order_does_not_matter(self, trained):
        logger.info("Checking that shuffling records keeps the PCC")
        records, result = trained
        shuffled = [records[i] for i in np.random.default_rng(0).permutation(len(records))]
        assert evaluate(shuffled, result.config, result.params).pcc == evaluate(records, result.config,
                                                                                result.params).pcc

    def test_probabilities(self, trained):
        logger.info("Checking predicted probabilities and labels")
        records, result = trained
        prediction = predict(records, result.config, result.params, batch_size=3)
        assert prediction.probabilities.shape == (8, 2)
        assert np.allclose(prediction.probabilities.sum(axis=1), 1.0)
        assert np.array_equal(prediction.labels, prediction.probabilities.argmax(axis=1))

    def test_config_mismatch(self, trained):
        logger.info("Checking that evaluation refuses mismatched parameters")
        records, result = trained
        with pytest.raises(CheckpointException):
            evaluate(records, dataclasses.replace(result.config, d_e=5), result.params)

    def test_empty_evaluation(self, trained):
        logger.info("Checking that an empty evaluation set is rejected")
        _, result = trained
        with pytest.raises(ValidationException):
            evaluate([], result.config, result.params)

    def test_simulated_walks_ignore_dataset_position(self):
        logger.info("Checking that simulated EPE inputs depend on the record, not its position")
        records = labeled_records(6, seed=4)
        config = TestGraphs.small_config(epe_mode="simulate", epe_walks=50, epe_walk_length=10)
        config = fit_standardization(prepare_dataset(records, config), config)
        params = init_params(config, 0)
        forward = predict(records, config, params).probabilities
        backward = predict(list(reversed(records)), config, params).probabilities
        assert np.allclose(forward, backward[::-1], rtol=0, atol=1e-12)
        first = prepare_dataset(records, config)[0]
        last = prepare_dataset(list(reversed(records)), config)[-1]
        assert np.array_equal(first.edge_attr, last.edge_attr)


@pytest.mark.training
class TestHarness:

    def test_ablation_table(self):
        logger.info("Checking the shape of the ablation table")
        table = run_ablation(labeled_records(6), labeled_records(4, seed=2), TestGraphs.small_config(),
                             TrainConfig(epochs=1, batch_size=3), seeds=(0, 1))
        assert table["setting"].tolist() == ["DVM", "Edge-Enhanced", "GNE", "EPE", "None"]
        assert list(table.columns) == ["setting", "seed_0", "seed_1", "mean"]
        assert np.allclose(table["mean"], (table["seed_0"] + table["seed_1"]) / 2)
        assert table[["seed_0", "seed_1"]].apply(lambda c: c.between(0, 1).all()).all()

    def test_split(self):
        logger.info("Checking the seeded train/test split")
        items = list(range(10))
        train_part, test_part = split_dataset(items, 0.2, seed=3)
        assert len(test_part) == 2 and sorted(train_part + test_part) == items
        assert split_dataset(items, 0.2, seed=3) == (train_part, test_part)
        with pytest.raises(ValidationException):
            split_dataset([1], 0.5)

    def test_model_gradient_check(self):
        logger.info("Checking the full-model gradient check helper")
        report = check_model_gradients(TestGraphs.random_records([5, 2]), TestGraphs.small_config(), tol=1e-4)
        assert report.passed
        assert len(report.params) == len(init_params(TestGraphs.small_config()))


@pytest.mark.training
class TestRecognizer:

    def test_untrained(self):
        logger.info("Checking that an untrained recognizer refuses to predict")
        recognizer = Recognizer(TestGraphs.small_config(), checkpoint="")
        assert not recognizer.is_trained()
        assert recognizer.parameter_count() is None
        with pytest.raises(CheckpointException):
            recognizer.predict(labeled_records(2))

    def test_fit_save_load(self, tmp_path):
        logger.info("Checking fit, save and load through the facade")
        records = labeled_records(4)
        recognizer = Recognizer(TestGraphs.small_config(), checkpoint="")
        history = recognizer.fit(records, TrainConfig(epochs=2, batch_size=2))
        assert len(history) == 2 and recognizer.is_trained()
        path = tmp_path / "model.ckpt"
        recognizer.save(path)
        loaded = Recognizer.load(path)
        assert loaded.model_config == recognizer.model_config
        assert np.array_equal(loaded.predict(records).probabilities, recognizer.predict(records).probabilities)

    def test_checkpoint_from_environment(self, tmp_path, monkeypatch):
        logger.info("Checking that SARGTR_CHECKPOINT is picked up")
        recognizer = Recognizer(TestGraphs.small_config(), checkpoint="")
        recognizer.fit(labeled_records(4), TrainConfig(epochs=1))
        path = tmp_path / "env.ckpt"
        recognizer.save(path)
        monkeypatch.setenv("SARGTR_CHECKPOINT", str(path))
        assert Recognizer().is_trained()
        monkeypatch.setenv("SARGTR_CHECKPOINT", str(tmp_path / "missing.ckpt"))
        assert not Recognizer().is_trained()

    def test_encode(self):
        logger.info("Checking the encodings report of one record")
        recognizer = Recognizer(TestGraphs.small_config(gne_n=4), checkpoint="")
        output = recognizer.encode(TestGraphs.record([(0, 0), (1, 0)]))
        assert output["epe"] == [1.0]
        assert output["edges"] == [[0, 1]]
        assert len(output["gne"]) == 2 and all(row[2:] == [0.0, 0.0] for row in output["gne"])
        assert output["eigenvalues"] == pytest.approx([0.0, 2.0], abs=1e-12)


@pytest.mark.training
@pytest.mark.slow
class TestTemplateExperiment:

    def test_default_model_recognizes_templates(self):
        logger.info("Checking test PCC of the default model on 200/100 graphs per template class")
        templates = builtin_templates()
        result = train(generate(templates, 200, seed=0), ModelConfig(), TrainConfig(epochs=200))
        outcome = evaluate(generate(templates, 100, seed=1), result.config, result.params)
        logger.info(f"Template PCC {outcome.pcc:.3f}")
        assert outcome.pcc >= 0.9

    def test_full_model_against_ablations(self):
        logger.info("Checking the full model against each single-module ablation over five seeds")
        templates = builtin_templates()
        table = run_ablation(generate(templates, 40, seed=2), generate(templates, 20, seed=3),
                             TestGraphs.small_config(class_count=3),
                             TrainConfig(epochs=40, batch_size=16, learning_rate=3e-3), seeds=range(5))
        means = table.set_index("setting")["mean"]
        logger.info(f"Ablation means {means.to_dict()}")
        for setting in ("DVM", "Edge-Enhanced", "GNE", "EPE"):
            assert means["None"] >= means[setting] - 0.05
