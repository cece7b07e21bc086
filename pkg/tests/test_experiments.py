import numpy as np
import pytest
from numpy.testing import assert_array_equal

import sparsekit.experiments as experiments
from sparsekit.config import ExperimentConfig, parse_config
from sparsekit.errors import SparseKitError
from sparsekit.experiments import (RUN_COLUMNS, make_split, make_task, model_config, recovery_schedule,
                                   run_recovery_experiment, train_teacher)
from sparsekit.model import TinyModel
from sparsekit.tensor import make_rng
from sparsekit.training import evaluate

TINY = dict(seeds=[0], vocab=8, d_model=8, blocks=1, seq=6, train_size=96, val_size=32, test_size=32,
            finetune_size=32, teacher_epochs=3, teacher_lr=0.1, epochs=1, warmup_steps=2, batch_size=16)


@pytest.fixture(scope="module")
def tiny():
    config = ExperimentConfig(**TINY)
    task = make_task(config.task_seed, config.vocab, config.seq, config.train_size, config.val_size,
                     config.test_size)
    teacher, _ = train_teacher(config, task)
    return config, task, teacher


class TestSyntheticTask:
    def test_targets(self):
        split = make_split(make_rng(0), 50, 7, 9)
        keep = ~split.padding
        prev = np.zeros_like(split.inputs)
        prev[:, 1:] = split.inputs[:, :-1]
        assert_array_equal(split.targets[keep], ((split.inputs + prev) % 7)[keep])

    def test_padding_is_a_tail(self):
        split = make_split(make_rng(1), 200, 5, 12)
        lengths = (~split.padding).sum(axis=1)
        assert lengths.min() >= 6 and lengths.max() <= 12
        for row, n in zip(split.padding, lengths):
            assert not row[:n].any() and row[n:].all()
        assert_array_equal(split.inputs[split.padding], 0)

    def test_deterministic(self):
        a, b = make_task(3, 8, 6, 10, 5, 5), make_task(3, 8, 6, 10, 5, 5)
        for name in ("train", "val", "test"):
            assert_array_equal(a.splits()[name].inputs, b.splits()[name].inputs)
            assert_array_equal(a.splits()[name].padding, b.splits()[name].padding)


class TestSchedules:
    def test_oneshot(self):
        schedule = recovery_schedule(ExperimentConfig(epochs=6), 0.9)
        assert schedule.levels == (0.9,) and schedule.finetune_epochs_per_level == 6

    def test_gradual(self):
        config = parse_config("schedule = gradual\nsparsity_levels = 0.5, 0.75\nepochs = 6\n")
        schedule = recovery_schedule(config, 0.9)
        assert schedule.levels == (0.5, 0.75, 0.9) and schedule.finetune_epochs_per_level == 2
        assert recovery_schedule(config, 0.6).levels == (0.5, 0.6)


class TestRecoveryExperiment:
    def test_row_count_and_columns(self, tiny):
        config, task, teacher = tiny
        runs, quant, losses = run_recovery_experiment(teacher, task, config, sparsities=[0.0, 0.5],
                                                      variants=["ce", "kd", "squarehead"], seeds=[0, 1])
        assert len(runs) == 2 * 3 * 2
        assert list(runs.columns) == RUN_COLUMNS
        assert (runs["error"] == "").all()
        assert len(quant) == len(runs)
        assert len(losses) == len(runs)

    def test_teacher_is_not_modified(self, tiny):
        config, task, teacher = tiny
        snapshot = teacher.copy()
        run_recovery_experiment(teacher, task, config, sparsities=[0.75], variants=["squarehead"])
        for name in teacher.params:
            assert_array_equal(teacher.params[name], snapshot.params[name])
        assert teacher.masks == {}

    def test_nm_patterns(self, tiny):
        config, task, teacher = tiny
        runs, _, losses = run_recovery_experiment(teacher, task, config, sparsities=[], variants=["ce"],
                                                  nm_patterns=["2:4"])
        assert runs["pattern"].tolist() == ["2:4"]
        assert runs["sparsity"].tolist() == [0.5]
        assert all(":" not in name for name in losses)

    def test_gradual_schedule(self, tiny):
        config, task, teacher = tiny
        config = config.replace(schedule="gradual", sparsity_levels=[0.5], epochs=2, restart_lr=False)
        runs, _, losses = run_recovery_experiment(teacher, task, config, sparsities=[0.75], variants=["kd"])
        assert len(runs) == 1
        (frame,) = losses.values()
        assert len(frame) == 2 * 2

    def test_failures_are_recorded(self, tiny, monkeypatch):
        config, task, teacher = tiny

        def broken(*args, **kwargs):
            raise SparseKitError("boom")

        monkeypatch.setattr(experiments, "_student_run", broken)
        runs, quant, _ = run_recovery_experiment(teacher, task, config, sparsities=[0.5], variants=["ce", "kd"])
        assert runs["error"].tolist() == ["boom", "boom"]
        assert runs["accuracy"].isna().all()
        assert quant.empty

    def test_student_sparsity_is_exact(self, tiny, monkeypatch):
        config, task, teacher = tiny
        students = []
        original = experiments._student_run

        def keep(*args, **kwargs):
            row, runs, student = original(*args, **kwargs)
            students.append(student)
            return row, runs, student

        monkeypatch.setattr(experiments, "_student_run", keep)
        run_recovery_experiment(teacher, task, config, sparsities=[0.75], variants=["squarehead"])
        assert students[0].sparsity() == 0.75


    def test_feature_weight_reaches_trainer(self, tiny, monkeypatch):
        config, task, teacher = tiny
        seen = []
        original = experiments.train

        def spy(*args, **kwargs):
            seen.append((kwargs["lam"], kwargs["feat_lam"]))
            return original(*args, **kwargs)

        monkeypatch.setattr(experiments, "train", spy)
        run_recovery_experiment(teacher, task, config.replace(lam=0.5, feat_lam=3.0), sparsities=[0.5],
                                variants=["squarehead"])
        assert seen == [(0.5, 3.0)]


@pytest.mark.slow
class TestDeskScale:
    """ Desk-scale acceptance runs with the default configuration. """

    @pytest.fixture(scope="class")
    def default(self):
        config = ExperimentConfig()
        task = make_task(config.task_seed, config.vocab, config.seq, config.train_size, config.val_size,
                         config.test_size)
        teacher, run = train_teacher(config, task)
        return config, task, teacher, run

    @pytest.fixture(scope="class")
    def sweep(self, default):
        config, task, teacher, _ = default
        runs, _, _ = run_recovery_experiment(teacher, task, config, sparsities=[0.75, 0.9],
                                             variants=["ce", "squarehead"])
        return runs.groupby(["sparsity", "variant"])[["accuracy", "entropy"]].mean(), runs

    def test_teacher_accuracy(self, default):
        _, _, _, run = default
        assert run.evals[-1]["accuracy"] >= 0.95

    def test_unpruned_ce_keeps_teacher_accuracy(self, default):
        config, task, teacher, _ = default
        teacher_accuracy, _ = evaluate(teacher, task.test)
        runs, _, _ = run_recovery_experiment(teacher, task, config, sparsities=[0.0], variants=["ce"], seeds=[0])
        assert abs(runs["accuracy"].iloc[0] - teacher_accuracy) <= 0.01

    @pytest.mark.parametrize("sparsity", [0.75, 0.9])
    def test_squarehead_at_least_ce(self, sweep, sparsity):
        means, _ = sweep
        assert means.loc[(sparsity, "squarehead"), "accuracy"] >= means.loc[(sparsity, "ce"), "accuracy"]

    def test_squarehead_never_diverges(self, sweep):
        _, runs = sweep
        squarehead = runs[runs["variant"] == "squarehead"]
        assert len(squarehead) == 2 * 3
        assert not squarehead["diverged"].any()
        assert squarehead["accuracy"].notna().all()

    def test_squarehead_recovers_teacher_at_75(self, default, sweep):
        _, task, teacher, _ = default
        means, _ = sweep
        teacher_accuracy, _ = evaluate(teacher, task.test)
        assert means.loc[(0.75, "squarehead"), "accuracy"] >= 0.9 * teacher_accuracy

    def test_ce_is_more_confident_at_90(self, sweep):
        means, _ = sweep
        assert means.loc[(0.9, "ce"), "entropy"] <= means.loc[(0.9, "squarehead"), "entropy"]


def test_model_config_mapping():
    config = ExperimentConfig(vocab=16, d_model=12, blocks=3, seq=5, prune_head=True)
    mc = model_config(config)
    assert (mc.vocab, mc.d_model, mc.blocks, mc.seq, mc.prune_head) == (16, 12, 3, 5, True)
    assert TinyModel.init(mc, seed=0).prunable_names()[-1] == "head.w"
