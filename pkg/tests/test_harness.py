"""Tests for the gold task, preference generation and pipeline stages."""

import math

import numpy as np
import pytest

from aligndistil_lab import harness
from aligndistil_lab.errors import (
    CheckFailure,
    ConfigError,
    DependencyError,
    DivergenceError,
    StageError,
)
from aligndistil_lab.harness import (
    ExperimentSpec,
    GoldTask,
    auc,
    convergence_summary,
    extrapolation_rows,
    gen_preferences,
    label_pairs,
    run_experiment,
    seed_sweep,
    steps_to_reach,
    warm_up_reference,
)
from aligndistil_lab.persistence import read_csv, read_pairs
from aligndistil_lab.policy import Sequence, init_policy
from aligndistil_lab.teacher import (
    ADAPTIVE_EXTRAPOLATE,
    CONSTANT_EXTRAPOLATE,
    TeacherConfig,
)
from aligndistil_lab.training import ALIGN_OFF, RunRecord, TrainConfig
from tests.conftest import tiny_doc


def small_task(**changes):
    base = dict(seed=0, vocab_size=3, max_context=3, prompt_len=1)
    base.update(changes)
    return GoldTask(**base)


class TestGoldTask:
    """Tests for GoldTask."""

    def test_reward_is_sum_of_token_rewards(self):
        task = small_task()
        response = (1, 0, 2)
        expected = sum(
            task.gold_token_reward((0,), response[:t], token)
            for t, token in enumerate(response)
        )
        assert task.gold_reward((0,), response) == expected

    def test_table_is_seeded(self):
        a = small_task(seed=3).gold_table
        b = small_task(seed=3).gold_table
        assert np.array_equal(a, b)
        assert not np.array_equal(a, small_task(seed=4).gold_table)

    def test_bucket_in_range(self):
        task = small_task(n_buckets=5)
        for prefix in [(), (0,), (1, 0)]:
            assert 0 <= task.bucket((2,), prefix) < 5

    def test_score_matches_call(self):
        task = small_task()
        seqs = [Sequence((0,), (2,)), Sequence((1,), (0, 1, 2))]
        scores = task.score(seqs)
        for score, seq in zip(scores, seqs):
            assert score == task(seq.prompt, seq.response)

    def test_probe_prompts_fixed(self):
        task = small_task(prompt_len=2)
        assert task.probe_prompts(4) == task.probe_prompts(4)
        assert all(len(p) == 2 for p in task.probe_prompts(4))

    def test_label_noise_range(self):
        with pytest.raises(ConfigError):
            small_task(label_noise=0.5)

    def test_unknown_label_mode(self):
        with pytest.raises(ConfigError):
            small_task(label_mode="vote")


class TestPreferences:
    """Tests for label_pairs() and gen_preferences()."""

    def test_gold_labels_follow_gold_reward(self, rng):
        task = small_task(label_mode="gold", label_noise=0.0)
        firsts = [Sequence((0,), (2,)), Sequence((1,), (1, 2))]
        seconds = [Sequence((0,), (0, 2)), Sequence((1,), (0, 1, 2))]
        for pair in label_pairs(task, firsts, seconds, rng):
            assert task(pair.prompt, pair.chosen) >= task(
                pair.prompt, pair.rejected
            )

    def test_noise_flips_labels(self):
        task = small_task(label_mode="gold", label_noise=0.4)
        firsts = [Sequence((0,), (2,))] * 2000
        seconds = [Sequence((0,), (0, 2))] * 2000
        pairs = label_pairs(task, firsts, seconds, np.random.default_rng(1))
        better = (2,) if task((0,), (2,)) >= task((0,), (0, 2)) else (0, 2)
        flipped = sum(pair.chosen != better for pair in pairs) / len(pairs)
        assert abs(flipped - 0.4) < 0.04

    def test_pairs_are_distinct_and_valid(self, rng):
        task = small_task()
        pairs = gen_preferences(task, 50, rng)
        assert len(pairs) == 50
        for pair in pairs:
            assert pair.chosen != pair.rejected
            assert pair.chosen[-1] == 2
            assert pair.rejected[-1] == 2

    def test_same_seed_same_pairs(self):
        task = small_task()
        a = gen_preferences(task, 20, np.random.default_rng(7))
        b = gen_preferences(task, 20, np.random.default_rng(7))
        assert a == b

    def test_degenerate_reference_falls_back(self, rng):
        # a tabular policy that always emits EOS first
        task = small_task(max_context=2)
        reference = init_policy("tabular", 3, 2)
        params = reference.params.clone().view(-1, 3)
        params[:, 2] = 50.0
        reference = reference.with_params(params.view(-1))
        pairs = gen_preferences(task, 5, rng, reference)
        for pair in pairs:
            assert {pair.chosen, pair.rejected} == {(2,), (0, 2)}

    def test_zero_pairs(self, rng):
        with pytest.raises(ConfigError):
            gen_preferences(small_task(), 0, rng)


class TestWarmUp:
    """Tests for warm_up_reference()."""

    def test_zero_steps_is_identity(self, rng):
        task = small_task()
        policy = init_policy("tiny_neural", 3, 3, embed_dim=2, hidden=3)
        warmed = warm_up_reference(task, policy, rng, 0)
        assert warmed is policy

    def test_moves_parameters(self, rng):
        task = small_task()
        policy = init_policy("tiny_neural", 3, 3, embed_dim=2, hidden=3)
        warmed = warm_up_reference(task, policy, rng, 2, k=2, batch=4)
        assert not np.array_equal(
            warmed.params.numpy(), policy.params.numpy()
        )


class TestCurves:
    """Tests for auc() and steps_to_reach()."""

    def test_auc(self):
        assert auc([0.5, 1.0, 1.5]) == 3.0

    def test_auc_empty(self):
        assert auc([]) == 0.0

    def test_steps_to_reach(self):
        assert steps_to_reach([0.1, 0.4, 0.9, 1.2], 0.9) == 3

    def test_never_reached(self):
        assert steps_to_reach([0.1, 0.2], 1.0) is None


class TestStages:
    """Tests for stage dependencies and failure handling."""

    def test_missing_dependency(self, tmp_path):
        spec = ExperimentSpec.from_doc(
            tiny_doc(tmp_path / "run", stages=["train-dpo"])
        )
        with pytest.raises(DependencyError) as exc_info:
            run_experiment(spec)
        assert exc_info.value.stage == "train-dpo"
        assert exc_info.value.missing_stage == "gen-data"

    def test_gen_data_outputs(self, tmp_path):
        spec = ExperimentSpec.from_doc(
            tiny_doc(tmp_path / "run", stages=["gen-data"])
        )
        manifest = run_experiment(spec)
        out = spec.output_dir
        assert manifest == out / "manifest.json"
        assert len(read_pairs(out / "data" / "train.jsonl")) == 24
        assert len(read_pairs(out / "data" / "test.jsonl")) == 12
        assert (out / "checkpoints" / "reference.json").exists()

    def test_stage_error_wraps_failures(self, tmp_path, mocker):
        spec = ExperimentSpec.from_doc(
            tiny_doc(tmp_path / "run", stages=["gen-data"])
        )
        mocker.patch.object(
            harness, "gen_preferences", side_effect=RuntimeError("boom")
        )
        with pytest.raises(StageError) as exc_info:
            run_experiment(spec)
        assert exc_info.value.stage == "gen-data"

    def test_gold_margin_read_is_caught(self, tmp_path, mocker):
        spec = ExperimentSpec.from_doc(
            tiny_doc(tmp_path / "run", stages=["gen-data", "train-rm"])
        )
        original = harness.stage_train_rm

        def peeking(ctx):
            ctx.pairs("train")[0].gold_margin
            original(ctx)

        mocker.patch.dict(
            harness.STAGES,
            {"train-rm": harness.Stage(peeking, ())},
        )
        with pytest.raises(CheckFailure):
            run_experiment(spec)

    def test_verify_stage_writes_report(self, tmp_path):
        spec = ExperimentSpec.from_doc(
            tiny_doc(tmp_path / "run", stages=["verify"])
        )
        run_experiment(spec)
        rows = read_csv(spec.output_dir / "verify.csv")
        assert len(rows) == 3
        assert all(row["passed"] == "true" for row in rows)

    def test_verify_failure_still_writes_csv(self, tmp_path, mocker):
        spec = ExperimentSpec.from_doc(
            tiny_doc(tmp_path / "run", stages=["verify"])
        )
        mocker.patch(
            "aligndistil_lab.verify.residual_exact", return_value=5.0
        )
        with pytest.raises(CheckFailure):
            run_experiment(spec)
        rows = read_csv(spec.output_dir / "verify.csv")
        assert all(row["passed"] == "false" for row in rows)

    def test_convergence_zero_steps_writes_headers(self, tmp_path):
        doc = tiny_doc(
            tmp_path / "run",
            stages=[
                "gen-data",
                "train-dpo",
                "train-reverse-dpo",
                "convergence-bench",
            ],
            convergence={"steps": 0},
        )
        spec = ExperimentSpec.from_doc(doc)
        run_experiment(spec)
        summary = convergence_summary(spec.output_dir)
        assert set(summary) == {"sentence", "token", "aligndistil"}
        assert all(s["auc"] == 0.0 for s in summary.values())
        assert all(math.isnan(s["final"]) for s in summary.values())

    def test_progress_messages(self, tmp_path, mocker):
        spec = ExperimentSpec.from_doc(
            tiny_doc(tmp_path / "run", stages=["gen-data"])
        )
        on_progress = mocker.Mock()
        run_experiment(spec, on_progress=on_progress)
        on_progress.assert_any_call("Running gen-data...")

    def test_divergence_writes_partial_curve(self, tmp_path, mocker):
        spec = ExperimentSpec.from_doc(
            tiny_doc(tmp_path / "run", stages=["gen-data", "train-dpo"])
        )
        records = [
            RunRecord(1, 0.5, 0.0, 0.0, 2.0),
            RunRecord(2, float("nan"), 0.0, 0.0, 2.0),
        ]
        mocker.patch.object(
            harness, "train", side_effect=DivergenceError(2, records)
        )
        with pytest.raises(StageError) as exc_info:
            run_experiment(spec)
        assert exc_info.value.stage == "train-dpo"
        rows = read_csv(spec.output_dir / "curves" / "dpo.csv")
        assert [row["step"] for row in rows] == ["1", "2"]
        assert rows[-1]["loss"] == "nan"
        assert not (spec.output_dir / "checkpoints" / "dpo.json").exists()


class TestSeedSweep:
    """Tests for seed_sweep()."""

    def test_one_directory_per_seed(self, tmp_path):
        spec = ExperimentSpec.from_doc(tiny_doc(tmp_path / "run"))
        dirs = seed_sweep(spec, [0, 1], workers=2, stages=["gen-data"])
        assert [d.name for d in dirs] == ["seed-0", "seed-1"]
        for d in dirs:
            assert (d / "manifest.json").exists()
        train0 = read_pairs(dirs[0] / "data" / "train.jsonl")
        train1 = read_pairs(dirs[1] / "data" / "train.jsonl")
        assert train0 != train1


class TestExtrapolationRows:
    """Tests for extrapolation_rows()."""

    def _rows(self, small_data, mocker):
        spy = mocker.spy(harness, "train")
        config = TrainConfig(
            steps=2, batch_size=4, lr=1.0, probe_prompts=3, probe_samples=2
        )
        rows = extrapolation_rows(
            config, small_data, [1.0, 2.0], TeacherConfig()
        )
        return rows, spy.call_args_list

    def test_every_row_trains_off_policy(self, small_data, mocker):
        _, calls = self._rows(small_data, mocker)
        assert [call.args[1] for call in calls] == [ALIGN_OFF] * 3

    def test_teachers_in_order(self, small_data, mocker):
        rows, calls = self._rows(small_data, mocker)
        assert [row[0] for row in rows] == ["constant", "constant", "adaptive"]
        assert [row[1] for row in rows] == [1.0, 2.0, ""]
        teachers = [call.args[0].teacher for call in calls]
        assert [t.mode for t in teachers] == [
            CONSTANT_EXTRAPOLATE,
            CONSTANT_EXTRAPOLATE,
            ADAPTIVE_EXTRAPOLATE,
        ]
        assert [t.weight for t in teachers[:2]] == [1.0, 2.0]
        assert all(row[2] >= 0.0 for row in rows)

