import dataclasses
import json
import os
import tempfile
import unittest
from parameterized import parameterized

import numpy as np

from flying_patch import (
    errors, eval_lib, paths, saving, strategies, synth, train_lib, utils)
from flying_patch.strategies import Strategy

import fixtures

def small_config(out_dir: str, **kwargs) -> train_lib.Config:
  """Two trials of a few iterations on the small benchmark."""
  config = train_lib.load_config(overrides=dict(
      dataset=dict(
          data_dir=fixtures.benchmark_images_dir(), train_fraction=0.75),
      model_path=fixtures.benchmark_model_path(),
      optimization=dict(iterations=2, batch_size=4, restarts=2),
      patch=dict(height=8, width=8),
      trials=2,
      expt_dir=out_dir,
  ))
  return dataclasses.replace(config, **kwargs)


class ConfigTest(unittest.TestCase):

  def test_defaults(self):
    config = train_lib.load_config()
    self.assertEqual(config.targets, train_lib.DEFAULT_TARGETS)
    self.assertEqual(config.strategy_list(), [Strategy.JOINT])
    self.assertEqual(config.validate(), [])

  def test_bundled_config(self):
    config = train_lib.load_config(paths.CONFIGS_PATH / 'two_targets.json')
    self.assertEqual(
        config.strategy_list(),
        [Strategy.FIXED, Strategy.JOINT, Strategy.SPLIT, Strategy.HYBRID])
    self.assertEqual(config.optimization.restarts, 5)
    self.assertEqual(config.patch.init, train_lib.PatchInit.RANDOM)
    notes = config.validate()
    self.assertEqual(len(notes), 2)  # fixed and joint ignore restarts

  def test_overrides_win(self):
    config = train_lib.load_config(
        paths.CONFIGS_PATH / 'two_targets.json',
        dict(trials=3, optimization=dict(learning_rate=0.5)))
    self.assertEqual(config.trials, 3)
    self.assertEqual(config.optimization.learning_rate, 0.5)
    self.assertEqual(config.optimization.restarts, 5)

  def test_unknown_field(self):
    with self.assertRaises(errors.ConfigError):
      train_lib.load_config(overrides=dict(optimization=dict(momentum=0.9)))

  def test_bad_enum(self):
    with self.assertRaises(errors.ConfigError):
      train_lib.load_config(overrides=dict(optimization=dict(strategy='greedy')))

  def test_bad_strategy_list(self):
    config = train_lib.load_config(overrides=dict(strategies='joint,greedy'))
    with self.assertRaises(errors.ConfigError):
      config.strategy_list()

  def test_newer_version(self):
    with self.assertRaises(errors.ConfigError):
      train_lib.load_config(overrides=dict(version=train_lib.VERSION + 1))

  def test_not_json(self):
    path = os.path.join(tempfile.mkdtemp(), 'config.json')
    utils.write_text(path, '{not json')
    with self.assertRaises(errors.ConfigError):
      train_lib.load_config(path)

  @parameterized.expand([
      ('trials', dict(trials=0)),
      ('workers', dict(workers=0)),
      ('targets', dict(targets=[])),
      ('restarts', dict(strategies='split')),
      ('noise', dict(noise=dict(pixel_std=-1.))),
      ('target_shape', dict(targets=[[1., 0.]])),
  ])
  def test_invalid(self, _, overrides):
    config = train_lib.load_config(overrides=overrides)
    with self.assertRaises(errors.ConfigError):
      config.validate()


class InitialPatchTest(unittest.TestCase):

  def test_white(self):
    patch = train_lib.make_initial_patch(
        train_lib.PatchConfig(init=train_lib.PatchInit.WHITE, height=3, width=5))
    np.testing.assert_array_equal(patch, np.full((3, 5), 255.))

  def test_random_is_seeded(self):
    config = train_lib.PatchConfig(height=6, width=4, seed=2)
    a = train_lib.make_initial_patch(config)
    np.testing.assert_array_equal(a, train_lib.make_initial_patch(config))
    self.assertEqual(a.shape, (6, 4))
    self.assertTrue(0 <= a.min() and a.max() <= 255)

  def test_face(self):
    patch = train_lib.make_initial_patch(
        train_lib.PatchConfig(init=train_lib.PatchInit.FACE, face_index=2))
    np.testing.assert_array_equal(patch, synth.render_face(2, (40, 40)))

  def test_file(self):
    path = os.path.join(tempfile.mkdtemp(), 'patch.pgm')
    patch = np.random.default_rng(0).uniform(0, 255, (4, 4))
    saving.save_patch(path, patch)
    loaded = train_lib.make_initial_patch(train_lib.PatchConfig(
        init=train_lib.PatchInit.FILE, path=path[:-4] + '.npy'))
    np.testing.assert_array_equal(loaded, patch)

  def test_file_needs_path(self):
    with self.assertRaises(errors.ConfigError):
      train_lib.make_initial_patch(
          train_lib.PatchConfig(init=train_lib.PatchInit.FILE))


def fake_report(strategy, test_loss, wall_seconds=1.):
  return strategies.TrialReport(
      strategy=strategy, seed=0, config={}, image_shape=(2, 2),
      patch_shape=(1, 1), test_loss=list(test_loss),
      train_loss_final=[2 * l for l in test_loss],
      timings=dict(total=wall_seconds))


class SummaryTest(unittest.TestCase):

  def setUp(self):
    self.results = {
        'joint': [fake_report('joint', [1., 3.]), fake_report('joint', [3., 5.])],
        'fixed': [fake_report('fixed', [4., 4.]), fake_report('fixed', [6., 6.])],
    }

  def test_frame(self):
    frame = train_lib.summary_frame(self.results)
    self.assertEqual(list(frame.columns), train_lib.SUMMARY_COLUMNS)
    self.assertEqual(len(frame), 8)
    first = frame.iloc[1]
    self.assertEqual(
        (first['strategy'], first['trial'], first['target_index']), ('joint', 0, 1))
    self.assertEqual(first['test_loss'], 3.)
    self.assertEqual(first['train_loss_final'], 6.)

  def test_summarize(self):
    stats = train_lib.summarize_trials(self.results['joint'])
    self.assertEqual(stats['trials'], 2)
    self.assertEqual(stats['per_target_mean'], [2., 4.])
    self.assertEqual(stats['per_target_std'], [1., 1.])
    self.assertEqual(stats['mean'], 3.)
    self.assertEqual(stats['std'], 1.)

  def test_ordering(self):
    frame = train_lib.summary_frame(self.results)
    self.assertEqual(train_lib.strategy_ordering(frame), ['joint', 'fixed'])

  def test_round_trip_is_exact(self):
    results = {'joint': [fake_report('joint', [0.1, 1 / 3])]}
    frame = train_lib.summary_frame(results)
    path = os.path.join(tempfile.mkdtemp(), 'summary.csv')
    train_lib.write_summary(frame, path)
    self.assertEqual(
        train_lib.read_summary(path)['test_loss'].tolist(), [0.1, 1 / 3])

  def test_missing_column(self):
    path = os.path.join(tempfile.mkdtemp(), 'summary.csv')
    utils.write_text(path, 'strategy,trial\njoint,0\n')
    with self.assertRaises(errors.FormatError):
      train_lib.read_summary(path)


class TrainTest(unittest.TestCase):

  @classmethod
  def setUpClass(cls):
    cls.expt_dir = os.path.join(tempfile.mkdtemp(), 'expt')
    cls.config = small_config(cls.expt_dir, strategies='joint,split')
    train_lib.train(cls.config)

  def test_layout(self):
    for strategy in ['joint', 'split']:
      for trial in range(2):
        directory = train_lib.trial_dir(self.expt_dir, strategy, trial)
        for name in ['report.json', 'patch.pgm', 'patch.npy',
                     'initial_patch.pgm', 'transforms.json']:
          self.assertTrue(os.path.exists(os.path.join(directory, name)), name)
    self.assertTrue(os.path.exists(os.path.join(self.expt_dir, 'summary.json')))

  def test_summary_csv(self):
    frame = train_lib.read_summary(os.path.join(self.expt_dir, 'summary.csv'))
    self.assertEqual(len(frame), 2 * 2 * 2)
    report = strategies.load_report(train_lib.trial_dir(self.expt_dir, 'split', 1))
    rows = frame[(frame['strategy'] == 'split') & (frame['trial'] == 1)]
    self.assertEqual(rows['test_loss'].tolist(), report.test_loss)
    self.assertEqual(report.seed, 1)

  def test_summary_json(self):
    with open(os.path.join(self.expt_dir, 'summary.json')) as f:
      summary = json.load(f)
    self.assertEqual(sorted(summary['ordering']), ['joint', 'split'])
    self.assertEqual(summary['strategies']['joint']['trials'], 2)
    self.assertEqual(summary['config']['strategies'], 'joint,split')

  def test_eval_replay_matches_report(self):
    directory = train_lib.trial_dir(self.expt_dir, 'joint', 0)
    report = strategies.load_report(directory)
    out = os.path.join(tempfile.mkdtemp(), 'eval.csv')
    frame = eval_lib.evaluate(eval_lib.EvalConfig(trial_dir=directory), out=out)
    self.assertEqual(list(frame.columns), eval_lib.EVAL_COLUMNS)
    self.assertEqual(
        list(dict.fromkeys(frame['row'])),
        [eval_lib.BASE_IMAGE, eval_lib.WHITE_PATCH, eval_lib.INITIAL_PATCH,
         eval_lib.TRAINED_PATCH])
    trained = frame[frame['row'] == eval_lib.TRAINED_PATCH]['loss'].to_numpy()
    np.testing.assert_allclose(trained, report.test_loss, rtol=0, atol=1e-9)
    initial = frame[frame['row'] == eval_lib.INITIAL_PATCH]['loss'].to_numpy()
    self.assertTrue(np.all(np.isfinite(initial)))
    self.assertTrue(os.path.exists(out))

  def test_eval_from_paths(self):
    directory = train_lib.trial_dir(self.expt_dir, 'split', 0)
    report = strategies.load_report(directory)
    config = eval_lib.EvalConfig(
        patch_path=os.path.join(directory, 'patch.npy'),
        transforms_path=os.path.join(directory, strategies.TRANSFORMS_FILE),
        model_path=fixtures.benchmark_model_path(),
        dataset=self.config.dataset,
    )
    frame = eval_lib.evaluate(config)
    self.assertNotIn(eval_lib.INITIAL_PATCH, set(frame['row']))
    trained = frame[frame['row'] == eval_lib.TRAINED_PATCH]['loss'].to_numpy()
    np.testing.assert_allclose(trained, report.test_loss, rtol=0, atol=1e-9)

  def test_eval_needs_artifacts(self):
    with self.assertRaises(errors.ConfigError):
      eval_lib.evaluate(eval_lib.EvalConfig())

  def test_report_reruns_the_trial(self):
    directory = train_lib.trial_dir(self.expt_dir, 'split', 1)
    report = strategies.load_report(directory)
    config = train_lib.load_config(os.path.join(directory, strategies.REPORT_FILE))
    self.assertEqual(config.strategy_list(), [Strategy.SPLIT])
    self.assertEqual((config.trials, config.base_seed), (1, 1))
    (rerun,) = train_lib.run_experiment(config)['split']
    self.assertEqual(rerun.deterministic_dict(), report.deterministic_dict())

  def test_parallel_trials_match(self):
    serial = train_lib.run_experiment(self.config)
    parallel = train_lib.run_experiment(dataclasses.replace(self.config, workers=2))
    for strategy in ['joint', 'split']:
      for a, b in zip(serial[strategy], parallel[strategy]):
        self.assertEqual(a.test_loss, b.test_loss)
        self.assertEqual(a.transform_history, b.transform_history)
        self.assertEqual(a.patch_checksums, b.patch_checksums)

if __name__ == '__main__':
  unittest.main(failfast=True)
