import json
import math
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, tag

from fewshot.config import load_run_config
from fewshot.errors import ConfigError, DivergenceError, PipelineStageError
from fewshot.data_gen import ClassSet
from fewshot.nn_engine import embed
from fewshot.services import (
    CORE_METHODS,
    SEED_STREAMS,
    Method,
    SessionMetrics,
    embedding_scatter,
    embedding_separation,
    emit_outputs,
    evaluate,
    format_ablation_table,
    load_classset,
    run_ablation,
    run_baseline,
    run_pipeline,
    stream_seeds,
    write_ablation_csv,
)

from .factories import corner_classset, linear_model, tiny_config


class SeedTests(SimpleTestCase):
    def test_streams_are_stable_and_distinct(self):
        seeds = stream_seeds(3)
        self.assertEqual(tuple(seeds), SEED_STREAMS)
        self.assertEqual(seeds, stream_seeds(3))
        self.assertEqual(len(set(seeds.values())), len(SEED_STREAMS))
        self.assertNotEqual(seeds, stream_seeds(4))


class EvaluateTests(SimpleTestCase):
    def setUp(self):
        self.classset, centers = corner_classset()
        self.model = linear_model(centers)

    def test_perfect_classifier(self):
        metrics = evaluate(self.model, self.classset, [0, 1, 2], base_class_ids=[0, 1])
        self.assertEqual(metrics.acc_all, 1.0)
        self.assertEqual(metrics.acc_base, 1.0)
        self.assertEqual(metrics.acc_novel, 1.0)
        self.assertEqual(metrics.forgetting, 0.0)
        self.assertEqual(metrics.class_counts, {0: 10, 1: 10, 2: 10})

    def test_no_novel_classes_reports_nan(self):
        metrics = evaluate(self.model, self.classset, [0, 1])
        self.assertTrue(math.isnan(metrics.acc_novel))

    def test_forgetting_measures_the_drop_from_the_best_session(self):
        best = evaluate(self.model, self.classset, [0, 1], base_class_ids=[0, 1])
        swapped = evaluate(
            self.model, self.classset, [0, 1], head_classes=[1, 0, 2], base_class_ids=[0, 1], session=1, history=[best]
        )
        self.assertEqual(swapped.acc_base, 0.0)
        self.assertEqual(swapped.forgetting, 1.0)

    def test_forgetting_is_never_negative(self):
        worse = SessionMetrics(0, 0.2, 0.2, math.nan, {}, {}, 0.0, 0.0)
        metrics = evaluate(self.model, self.classset, [0, 1], session=1, history=[worse])
        self.assertEqual(metrics.forgetting, 0.0)

    def test_seen_class_without_head_row(self):
        with self.assertRaises(ConfigError):
            evaluate(linear_model(np.eye(2)), self.classset, [0, 1, 2])

    def test_separation_and_scatter(self):
        ratio = embedding_separation(self.model, self.classset, [0, 1, 2])
        self.assertLess(ratio, 0.01)
        scatter = embedding_scatter(self.model, self.classset, [0, 1, 2])
        self.assertEqual(len(scatter), 30)
        self.assertEqual({row[0] for row in scatter}, {0, 1, 2})
        with self.assertRaises(ConfigError):
            embedding_separation(self.model, self.classset, [0])

    def test_non_finite_logits_are_rejected(self):
        broken = linear_model([[np.nan, 0.0], [0.0, 1.0]])
        with self.assertRaises(DivergenceError):
            evaluate(broken, self.classset, [0, 1])

    def test_random_head_scores_at_chance(self):
        rng = np.random.default_rng(11)
        classes = {class_id: rng.normal(size=(1000, 3)) for class_id in range(4)}
        classset = ClassSet(classes, test_fraction=0.5, seed=11)
        metrics = evaluate(linear_model(rng.normal(size=(4, 3))), classset, [0, 1, 2, 3])
        total = sum(metrics.class_counts.values())
        sigma = math.sqrt(0.25 * 0.75 / total)
        self.assertEqual(total, 2000)
        self.assertLess(abs(metrics.acc_all - 0.25), 3 * sigma)

    def test_accuracy_weights_classes_by_test_count(self):
        classset = ClassSet({0: np.ones((200, 2)), 1: -np.ones((100, 2))}, test_fraction=0.5)
        always_zero = linear_model(np.zeros((2, 2)), np.array([1.0, 0.0]))
        metrics = evaluate(always_zero, classset, [0, 1])
        self.assertEqual(metrics.per_class, {0: 1.0, 1: 0.0})
        self.assertEqual(metrics.class_counts, {0: 100, 1: 50})
        self.assertAlmostEqual(metrics.acc_all, 2 / 3)


class PipelineTests(SimpleTestCase):
    def test_imco_run(self):
        result = run_pipeline(tiny_config())
        self.assertEqual([entry.session for entry in result.metrics], [0, 1, 2])
        self.assertEqual(result.model.output_dim, 6)
        self.assertEqual(len(result.head_classes), 6)
        for entry in result.metrics:
            self.assertTrue(0.0 <= entry.acc_all <= 1.0)
            self.assertGreaterEqual(entry.forgetting, 0.0)
        self.assertEqual(result.metrics[0].forgetting, 0.0)
        self.assertTrue(all(report.within_bound() for report in result.reports.values()))
        self.assertEqual(result.importance.task_counter, 3)
        self.assertTrue(result.importance.in_range())
        self.assertEqual(len(result.pretrain_log), 5)
        self.assertEqual(sorted(result.session_logs), [1, 2])

    def test_sessions_read_only_their_own_training_samples(self):
        config = tiny_config()
        result = run_pipeline(config)
        stages = {}
        for (stage, class_id), count in result.access_counts.items():
            if count:
                stages.setdefault(stage, set()).add(class_id)
        self.assertEqual(stages["pretrain"], set(result.schedule.base_classes))
        for session in (1, 2):
            self.assertEqual(stages[f"session {session}"], set(result.schedule.classes_for(session)))
            self.assertNotIn(f"importance {session}", stages)

    def test_identical_configs_write_identical_metrics(self):
        config = tiny_config(method="constant_alpha", seed=5)
        with tempfile.TemporaryDirectory() as tmp:
            first = emit_outputs(run_pipeline(config), Path(tmp) / "a")
            second = emit_outputs(run_pipeline(config), Path(tmp) / "b")
            self.assertEqual(first["metrics"].read_bytes(), second["metrics"].read_bytes())
            self.assertEqual(first["importance"].read_bytes(), second["importance"].read_bytes())

    def test_every_method_runs(self):
        for method in Method:
            with self.subTest(method=method.value):
                result = run_pipeline(tiny_config(method=method.value))
                self.assertEqual(len(result.metrics), 3)
                frozen = method in (Method.FROZEN_PROTOTYPE, Method.IMPLANT_FROZEN)
                self.assertEqual(all(not log for log in result.session_logs.values()), frozen)

    def test_naive_finetune_is_unbounded(self):
        result = run_pipeline(tiny_config(method="naive_finetune"))
        self.assertIsNone(result.importance)
        self.assertTrue(all(entry.max_disp_ratio == 0.0 for entry in result.metrics))
        self.assertTrue(all(report.bounded_count == 0 for report in result.reports.values()))

    def test_closed_set_models_get_a_base_head_from_prototypes(self):
        config = tiny_config(method="frozen_prototype", head_epochs=0)
        result = run_pipeline(config)
        classset = load_classset(config.dataset, stream_seeds(config.seed)["data"])
        head = result.pretrained.head
        for row, class_id in enumerate(result.schedule.base_classes):
            expected = embed(result.pretrained, classset.train(class_id)).mean(axis=0)
            np.testing.assert_allclose(head.weight[row], expected)
        np.testing.assert_array_equal(head.bias, 0.0)
        self.assertEqual(len(run_pipeline(tiny_config(method="frozen_prototype")).head_log), 2)

    def test_naive_finetune_stays_finite_at_a_large_learning_rate(self):
        result = run_pipeline(tiny_config(method="naive_finetune", finetune_lr=50.0, iterations=20))
        self.assertTrue(result.model.is_finite())
        self.assertTrue(all(math.isfinite(entry.acc_all) for entry in result.metrics))
        self.assertTrue(all(math.isfinite(record.loss) for log in result.session_logs.values() for record in log))

    def test_stage_failures_name_the_stage(self):
        config = replace(tiny_config(method="frozen_prototype"), shots=30)
        with self.assertLogs("fewshot.services", level="ERROR"):
            with self.assertRaises(PipelineStageError) as caught:
                run_pipeline(config)
        self.assertEqual(caught.exception.stage, "session 1")

    def test_baselines(self):
        result = run_baseline("frozen_prototype", tiny_config())
        self.assertEqual(result.config.method, Method.FROZEN_PROTOTYPE)
        with self.assertRaises(ConfigError):
            run_baseline("imco", tiny_config())
        with self.assertRaises(ConfigError):
            run_baseline("bogus", tiny_config())


class OutputTests(SimpleTestCase):
    def test_run_files(self):
        result = run_pipeline(tiny_config())
        with tempfile.TemporaryDirectory() as tmp:
            paths = emit_outputs(result, Path(tmp) / "run")
            names = sorted(path.name for path in paths.values())
            self.assertEqual(
                names,
                [
                    "head_log.csv",
                    "importance.csv",
                    "metrics.csv",
                    "pretrain_log.csv",
                    "scatter.csv",
                    "session_1_log.csv",
                    "session_2_log.csv",
                    "summary.json",
                ],
            )
            lines = paths["metrics"].read_text().splitlines()
            self.assertEqual(lines[0], "session,acc_all,acc_base,acc_novel,forgetting,max_disp_ratio")
            self.assertEqual(len(lines), 4)
            self.assertIn(",nan,", lines[1])
            session_header = paths["session_1_log"].read_text().splitlines()[0]
            self.assertEqual(session_header, "iter,e,alpha,loss,max_displacement_ratio")
            summary = json.loads(paths["summary"].read_text())
        self.assertEqual(summary["method"], "imco")
        self.assertEqual(summary["sessions"], 3)
        low, high = summary["alpha_range"]
        self.assertTrue(0.01 <= low <= high <= 0.3)


class AblationTests(SimpleTestCase):
    def test_rows_and_table(self):
        rows = run_ablation(tiny_config(), 2, [Method.FROZEN_PROTOTYPE, Method.IMCO])
        self.assertEqual([row.method for row in rows], [Method.FROZEN_PROTOTYPE, Method.IMCO])
        self.assertTrue(all(row.seeds == 2 and len(row.session_acc_all) == 3 for row in rows))
        table = format_ablation_table(rows)
        self.assertIn("frozen_prototype", table)
        with tempfile.TemporaryDirectory() as tmp:
            path = write_ablation_csv(rows, Path(tmp) / "ablation.csv")
            header = path.read_text().splitlines()[0]
        self.assertEqual(
            header, "method,seeds,final_acc_all,final_acc_base,final_acc_novel,final_forgetting,s0,s1,s2"
        )

    def test_needs_a_seed(self):
        with self.assertRaises(ConfigError):
            run_ablation(tiny_config(), 0)


@tag("slow")
class DirectionalTests(SimpleTestCase):
    """Multi-seed comparisons on the default 14-class benchmark."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        methods = (*CORE_METHODS, Method.IMPLANT_FROZEN)
        cls.rows = {row.method: row for row in run_ablation(load_run_config(), 5, methods)}

    def test_naive_finetuning_forgets_the_base_classes(self):
        naive = self.rows[Method.NAIVE_FINETUNE]
        self.assertLess(naive.final_acc_base, 0.5 * naive.session_acc_all[0])

    def test_methods_beat_naive_finetuning(self):
        naive = self.rows[Method.NAIVE_FINETUNE]
        self.assertLess(naive.final_acc_all, self.rows[Method.FROZEN_PROTOTYPE].final_acc_all)
        self.assertLess(naive.final_acc_all, self.rows[Method.IMCO].final_acc_all)
        self.assertLess(self.rows[Method.IMCO].final_forgetting, naive.final_forgetting)

    def test_closed_set_baselines_keep_their_base_accuracy_longer(self):
        naive = self.rows[Method.NAIVE_FINETUNE]
        self.assertLess(self.rows[Method.FROZEN_PROTOTYPE].final_forgetting, naive.final_forgetting)
        self.assertLess(self.rows[Method.IMCO_NO_IMPLANT].final_forgetting, naive.final_forgetting)

    def test_adaptation_lifts_novel_accuracy_over_the_frozen_backbone(self):
        adapted = self.rows[Method.IMCO].final_acc_novel
        self.assertGreater(adapted, self.rows[Method.IMPLANT_FROZEN].final_acc_novel)
