import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal
from sklearn.neighbors import NearestCentroid

from fewshot.data_gen import (
    ClassSet,
    SessionSchedule,
    build_schedule,
    load_dataset_csv,
    make_blob_classes,
    sample_episode,
    sample_support,
    write_dataset_csv,
)
from fewshot.errors import ConfigError, DatasetParseError, SamplingError


class BlobClassTests(SimpleTestCase):
    def test_sizes_and_split(self):
        classset = make_blob_classes(5, 3, 40, 5.0, 1.0, seed=1)
        self.assertEqual(classset.class_ids, [0, 1, 2, 3, 4])
        self.assertEqual(classset.feature_dim, 3)
        for class_id in classset.class_ids:
            self.assertEqual(classset.samples(class_id).shape, (40, 3))
            self.assertEqual(classset.train_count(class_id), 32)
            self.assertEqual(classset.test(class_id).shape[0], 8)

    def test_train_and_test_rows_are_disjoint(self):
        classset = make_blob_classes(3, 2, 25, 5.0, 1.0, seed=2)
        for class_id in classset.class_ids:
            train = {tuple(row) for row in classset.train(class_id)}
            test = {tuple(row) for row in classset.test(class_id)}
            self.assertFalse(train & test)
            self.assertEqual(len(train) + len(test), 25)

    def test_same_seed_same_data(self):
        first = make_blob_classes(4, 3, 10, 5.0, 1.0, seed=9)
        second = make_blob_classes(4, 3, 10, 5.0, 1.0, seed=9)
        for class_id in first.class_ids:
            assert_array_equal(first.train(class_id), second.train(class_id))

    def test_rejects_bad_arguments(self):
        with self.assertRaises(ConfigError):
            make_blob_classes(1, 3, 10, 5.0, 1.0, seed=0)
        with self.assertRaises(ConfigError):
            make_blob_classes(3, 3, 10, 5.0, 0.0, seed=0)

    def test_class_set_invariants(self):
        with self.assertRaises(ConfigError):
            ClassSet({})
        with self.assertRaises(ConfigError):
            ClassSet({0: np.ones((3, 2)), 1: np.ones((3, 4))})

    def test_single_sample_class_keeps_its_train_row(self):
        classset = ClassSet({0: np.ones((1, 2)), 1: np.zeros((5, 2))}, test_fraction=0.5)
        self.assertEqual(classset.train_count(0), 1)

    def test_tight_blobs_are_separable_by_their_centroids(self):
        classset = make_blob_classes(5, 4, 40, 5.0, 0.01, seed=3)
        train = np.vstack([classset.train(c) for c in classset.class_ids])
        train_labels = np.concatenate([np.full(classset.train_count(c), c) for c in classset.class_ids])
        test = np.vstack([classset.test(c) for c in classset.class_ids])
        test_labels = np.concatenate([np.full(classset.test(c).shape[0], c) for c in classset.class_ids])
        oracle = NearestCentroid().fit(train, train_labels)
        self.assertGreaterEqual(oracle.score(test, test_labels), 0.99)

    def test_ledger_counts_train_reads_per_stage(self):
        classset = make_blob_classes(3, 2, 10, 5.0, 1.0, seed=0)
        classset.ledger.enter("session 1")
        classset.subset([2]).train(2)
        classset.test(1)
        self.assertEqual(classset.ledger.classes_read("session 1"), {2})
        self.assertEqual(classset.ledger.reads[("session 1", 2)], 8)


class CsvTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def test_written_dataset_loads_back(self):
        original = make_blob_classes(3, 2, 6, 5.0, 1.0, seed=0)
        path = write_dataset_csv(original, self.dir / "blobs.csv")
        loaded = load_dataset_csv(path)
        self.assertEqual(loaded.class_ids, original.class_ids)
        for class_id in original.class_ids:
            assert_array_equal(loaded.samples(class_id), original.samples(class_id))

    def test_bad_row_names_its_line(self):
        path = self.dir / "bad.csv"
        path.write_text("label,f0,f1\n0,1.0,2.0\n1,abc,2.0\n", encoding="utf-8")
        with self.assertRaises(DatasetParseError) as caught:
            load_dataset_csv(path)
        self.assertEqual(caught.exception.line_number, 3)
        self.assertIn("line 3", str(caught.exception))

    def test_wrong_width(self):
        path = self.dir / "short.csv"
        path.write_text("label,f0,f1\n0,1.0\n", encoding="utf-8")
        with self.assertRaises(DatasetParseError):
            load_dataset_csv(path)

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            load_dataset_csv(self.dir / "missing.csv")


class ScheduleTests(SimpleTestCase):
    def test_partition(self):
        schedule = build_schedule(range(14), 6, 2, 5, seed=3)
        self.assertEqual(len(schedule.base_classes), 6)
        self.assertEqual(schedule.session_count, 4)
        flat = list(schedule.base_classes) + [c for group in schedule.sessions for c in group]
        self.assertEqual(sorted(flat), list(range(14)))
        self.assertEqual(list(schedule.base_classes), sorted(schedule.base_classes))
        self.assertEqual(schedule.seen_through(2)[:6], list(schedule.base_classes))
        self.assertEqual(len(schedule.seen_through(2)), 10)

    def test_large_universe(self):
        schedule = build_schedule(range(100), 60, 5, 5, seed=0)
        self.assertEqual(schedule.session_count, 8)
        self.assertTrue(all(len(group) == 5 for group in schedule.sessions))

    def test_seeded(self):
        self.assertEqual(build_schedule(range(10), 4, 3, 1, seed=5), build_schedule(range(10), 4, 3, 1, seed=5))

    def test_rejects_uneven_split(self):
        with self.assertRaises(ConfigError):
            build_schedule(range(13), 6, 2, 5, seed=0)
        with self.assertRaises(ConfigError):
            build_schedule(range(6), 6, 2, 5, seed=0)

    def test_rejects_overlapping_sessions(self):
        with self.assertRaises(ConfigError):
            SessionSchedule((0, 1), ((1, 2),), 5)


class EpisodeTests(SimpleTestCase):
    def setUp(self):
        self.classset = make_blob_classes(6, 3, 30, 5.0, 1.0, seed=0)

    def test_episode_layout(self):
        episode = sample_episode(self.classset, 4, 2, 3, np.random.default_rng(0))
        self.assertEqual(episode.support_inputs.shape, (8, 3))
        self.assertEqual(episode.query_inputs.shape, (12, 3))
        assert_array_equal(np.bincount(episode.support_labels), [2, 2, 2, 2])
        assert_array_equal(np.bincount(episode.query_labels), [3, 3, 3, 3])
        self.assertEqual(len(set(episode.class_ids)), 4)
        support = {tuple(row) for row in episode.support_inputs}
        query = {tuple(row) for row in episode.query_inputs}
        self.assertFalse(support & query)

    def test_rows_come_from_the_train_split(self):
        episode = sample_episode(self.classset, 2, 3, 3, np.random.default_rng(1))
        for local, class_id in enumerate(episode.class_ids):
            train = {tuple(row) for row in self.classset.train(class_id)}
            for row in episode.support_inputs[episode.support_labels == local]:
                self.assertIn(tuple(row), train)

    def test_every_class_eventually_appears(self):
        classset = make_blob_classes(10, 2, 10, 5.0, 1.0, seed=0)
        rng = np.random.default_rng(7)
        seen = set()
        for _ in range(1000):
            seen.update(sample_episode(classset, 5, 1, 1, rng).class_ids)
        self.assertEqual(seen, set(range(10)))

    def test_not_enough_classes_or_samples(self):
        with self.assertRaises(SamplingError):
            sample_episode(self.classset, 7, 1, 1, np.random.default_rng(0))
        with self.assertRaises(SamplingError):
            sample_episode(self.classset, 2, 20, 10, np.random.default_rng(0))

    def test_support_labels_start_at_offset(self):
        batch = sample_support(self.classset, [4, 1], 3, np.random.default_rng(0), label_offset=6)
        assert_array_equal(batch.labels, [6, 6, 6, 7, 7, 7])
        with self.assertRaises(SamplingError):
            sample_support(self.classset, [4], 25, np.random.default_rng(0))
