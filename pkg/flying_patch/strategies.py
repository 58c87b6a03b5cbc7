"""Optimization strategies for a patch and its per-target transforms.

  fixed   transforms drawn once and frozen, only the patch is trained
  joint   patch and transforms updated together every batch
  split   alternates a patch epoch with a per-target restart search over
          transforms, keeping the candidate with the lowest loss
  hybrid  joint epochs first, then restart search with the patch frozen

An iteration is one pass over the training set in shuffled batches. All
randomness comes from utils.rng streams keyed by (seed, phase, indices), so
results do not depend on how many workers run candidates or trials.
"""

import concurrent.futures
import dataclasses
import enum
import json
import math
import os
import typing as tp

from absl import logging
import numpy as np
import tqdm

from flying_patch import (
    attack_loss,
    errors,
    optimizer,
    placement,
    saving,
    types,
    utils,
)
from flying_patch.data import NoiseConfig, batches
from flying_patch.networks import VictimModel

REPORT_KIND = 'trial_report'


class Strategy(enum.Enum):
  FIXED = 'fixed'
  JOINT = 'joint'
  SPLIT = 'split'
  HYBRID = 'hybrid'

RESTART_STRATEGIES = (Strategy.SPLIT, Strategy.HYBRID)


@dataclasses.dataclass
class OptimizationConfig:
  strategy: Strategy = Strategy.JOINT
  iterations: int = 100
  # Candidates per target and iteration; split and hybrid only.
  restarts: tp.Optional[int] = None
  batch_size: int = 32
  learning_rate: float = 1e-3
  # Share of iterations trained jointly by the hybrid strategy.
  joint_fraction: float = 0.5
  # Select restart candidates by a full pass over the training set after
  # their update instead of the losses seen during the update pass.
  full_eval: bool = False
  lock_rotation: bool = True
  restart_workers: int = 1
  # Noise-free training loss is evaluated every this many iterations and
  # always before the first and after the last one.
  eval_every: int = 1
  scale_min: float = 0.3
  scale_max: float = 0.5
  # Adam runs on patch pixels divided by this, i.e. on [0, 1] intensities.
  patch_units: float = 255.

  def constraints(self) -> placement.Constraints:
    return placement.Constraints(
        scale_min=self.scale_min,
        scale_max=self.scale_max,
        lock_rotation=self.lock_rotation,
    )

  def validate(self) -> tp.List[str]:
    """Raises ConfigError for invalid settings; returns notes on ignored ones."""
    notes = []
    strategy = Strategy(self.strategy)
    if self.iterations < 0:
      raise errors.ConfigError(f'optimization.iterations must be >= 0, got {self.iterations}')
    if self.batch_size < 1:
      raise errors.ConfigError(f'optimization.batch_size must be >= 1, got {self.batch_size}')
    if not self.learning_rate > 0:
      raise errors.ConfigError(
          f'optimization.learning_rate must be > 0, got {self.learning_rate}')
    if not 0 < self.scale_min <= self.scale_max:
      raise errors.ConfigError(
          f'optimization.scale_min/scale_max must satisfy 0 < min <= max, '
          f'got {self.scale_min}, {self.scale_max}')
    if self.restart_workers < 1:
      raise errors.ConfigError('optimization.restart_workers must be >= 1')
    if self.eval_every < 1:
      raise errors.ConfigError(
          f'optimization.eval_every must be >= 1, got {self.eval_every}')
    if not self.patch_units > 0:
      raise errors.ConfigError('optimization.patch_units must be > 0')

    if strategy in RESTART_STRATEGIES:
      if self.restarts is None:
        raise errors.ConfigError(
            f'optimization.restarts is required for the {strategy.value} strategy')
      if self.restarts < 1:
        raise errors.ConfigError(
            f'optimization.restarts must be >= 1, got {self.restarts}')
    elif self.restarts is not None:
      notes.append(
          f'optimization.restarts={self.restarts} ignored by the '
          f'{strategy.value} strategy')

    if strategy is Strategy.HYBRID and not 0 < self.joint_fraction < 1:
      raise errors.ConfigError(
          f'optimization.joint_fraction must be in (0, 1), got {self.joint_fraction}')
    return notes


@dataclasses.dataclass
class AttackProblem:
  model: VictimModel
  patch: np.ndarray  # initial patch [h, w]
  targets: np.ndarray  # [K, 3]
  train_images: np.ndarray
  test_images: np.ndarray
  optimization: OptimizationConfig = dataclasses.field(
      default_factory=OptimizationConfig)
  noise: NoiseConfig = dataclasses.field(default_factory=NoiseConfig)
  seed: int = 0
  # Initial transforms [K, 4]; drawn with random_transform when None.
  transforms: tp.Optional[np.ndarray] = None
  # Fully resolved run config, embedded in reports.
  config: tp.Optional[dict] = None
  # Receives per-iteration stats, e.g. for wandb.
  log_fn: tp.Optional[tp.Callable[[dict], None]] = dataclasses.field(
      default=None, compare=False, repr=False)

  def validate(self) -> tp.List[str]:
    self.targets = types.targets_array(self.targets)
    if len(self.targets) < 1:
      raise errors.ConfigError('at least one target is required')
    if self.transforms is not None:
      self.transforms = np.asarray(self.transforms, dtype=np.float64)
      if self.transforms.shape != (len(self.targets), 4):
        raise errors.ConfigError(
            f'{len(self.transforms)} transforms for {len(self.targets)} targets')
    patch = np.asarray(self.patch, dtype=np.float64)
    if patch.ndim != 2:
      raise errors.DimensionError('patch must be 2D', actual=patch.shape)
    if patch.min() < 0 or patch.max() > 255:
      raise errors.ParameterError('patch pixels must be in [0, 255]')
    for name, images in [('train', self.train_images), ('test', self.test_images)]:
      if len(images) == 0:
        raise errors.ConfigError(f'the {name} set is empty')
      if tuple(np.shape(images)[1:]) != self.model.image_shape:
        raise errors.DimensionError(
            f'{name} images do not match the model input',
            expected=self.model.image_shape, actual=np.shape(images)[1:])
    self.noise.validate()
    return self.optimization.validate()


def initial_transforms(problem: AttackProblem) -> np.ndarray:
  constraints = problem.optimization.constraints()
  if problem.transforms is not None:
    return placement.project_array(problem.transforms, constraints)
  return np.stack([
      placement.random_transform(
          utils.rng(problem.seed, 'init', k), constraints).to_array()
      for k in range(len(problem.targets))
  ])


@dataclasses.dataclass
class TrialReport:
  strategy: str
  seed: int
  config: dict
  image_shape: tp.Tuple[int, int]
  patch_shape: tp.Tuple[int, int]
  # Noise-free loss on the training set, before training and after every
  # iteration; None where optimization.eval_every skipped it.
  train_loss: tp.List[tp.Optional[float]] = dataclasses.field(default_factory=list)
  # Mean noisy batch loss of the patch (or joint) updates of each iteration;
  # None for iterations without patch updates.
  train_loss_noisy: tp.List[tp.Optional[float]] = dataclasses.field(default_factory=list)
  # Noise-free per-target training loss after the last iteration.
  train_loss_final: tp.List[float] = dataclasses.field(default_factory=list)
  test_loss: tp.List[float] = dataclasses.field(default_factory=list)
  test_loss_initial: tp.List[float] = dataclasses.field(default_factory=list)
  initial_transforms: tp.List[tp.List[float]] = dataclasses.field(default_factory=list)
  final_transforms: tp.List[tp.List[float]] = dataclasses.field(default_factory=list)
  transform_history: tp.List[tp.List[tp.List[float]]] = dataclasses.field(default_factory=list)
  patch_range_history: tp.List[tp.Tuple[float, float]] = dataclasses.field(default_factory=list)
  patch_checksums: tp.List[str] = dataclasses.field(default_factory=list)
  # One entry per (iteration, target) restart selection.
  candidates: tp.List[dict] = dataclasses.field(default_factory=list)
  timings: tp.Dict[str, float] = dataclasses.field(default_factory=dict)
  notes: tp.List[str] = dataclasses.field(default_factory=list)

  patch: tp.Optional[np.ndarray] = dataclasses.field(default=None, repr=False)
  initial_patch: tp.Optional[np.ndarray] = dataclasses.field(default=None, repr=False)

  ARRAY_FIELDS = ('patch', 'initial_patch')
  # Wall-clock dependent; everything else is reproducible from the seed.
  TIMING_FIELDS = ('timings',)

  @property
  def wall_seconds(self) -> float:
    return self.timings.get('total', 0.)

  def to_dict(self) -> dict:
    d = {
        f.name: getattr(self, f.name) for f in dataclasses.fields(self)
        if f.name not in self.ARRAY_FIELDS
    }
    d['kind'] = REPORT_KIND
    return json.loads(json.dumps(d))

  def deterministic_dict(self) -> dict:
    d = self.to_dict()
    for name in self.TIMING_FIELDS:
      d.pop(name)
    d['patch_checksum'] = utils.array_checksum(self.patch)
    return d

  @classmethod
  def from_dict(cls, d: dict) -> 'TrialReport':
    d = dict(d)
    if d.pop('kind', REPORT_KIND) != REPORT_KIND:
      raise errors.FormatError('not a trial report')
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
      raise errors.FormatError(f'unknown trial report fields {sorted(unknown)}')
    d['image_shape'] = tuple(d['image_shape'])
    d['patch_shape'] = tuple(d['patch_shape'])
    d['patch_range_history'] = [tuple(r) for r in d.get('patch_range_history', [])]
    return cls(**d)


REPORT_FILE = 'report.json'
PATCH_FILE = 'patch.pgm'
INITIAL_PATCH_FILE = 'initial_patch.pgm'
TRANSFORMS_FILE = 'transforms.json'


def save_report(report: TrialReport, directory: tp.Union[str, os.PathLike]):
  """Writes the report, its patches (PGM + npy) and the transforms file."""
  directory = os.fspath(directory)
  utils.write_text(
      os.path.join(directory, REPORT_FILE),
      json.dumps(report.to_dict(), indent=2))
  saving.save_patch(os.path.join(directory, PATCH_FILE), report.patch)
  saving.save_patch(os.path.join(directory, INITIAL_PATCH_FILE), report.initial_patch)
  saving.save_transforms(
      os.path.join(directory, TRANSFORMS_FILE),
      np.array(report.final_transforms), np.array(report.config['targets']))


def load_report(directory: tp.Union[str, os.PathLike]) -> TrialReport:
  directory = os.fspath(directory)
  with open(os.path.join(directory, REPORT_FILE)) as f:
    try:
      d = json.load(f)
    except json.JSONDecodeError as e:
      raise errors.FormatError(f'{directory}/{REPORT_FILE}: {e}') from None
  report = TrialReport.from_dict(d)
  stem = lambda name: os.path.join(directory, os.path.splitext(name)[0] + '.npy')
  report.patch = saving.load_patch(stem(PATCH_FILE))
  report.initial_patch = saving.load_patch(stem(INITIAL_PATCH_FILE))
  return report


class Candidate(tp.NamedTuple):
  transform: np.ndarray  # [4]
  optimizer: optimizer.BlockOptimizer
  loss: float


class _Trial:
  """Mutable state of one run; only touched from the thread that owns it."""

  def __init__(self, problem: AttackProblem, strategy: Strategy):
    problem = dataclasses.replace(
        problem, optimization=dataclasses.replace(
            problem.optimization, strategy=strategy))
    notes = problem.validate()
    for note in notes:
      logging.warning(note)

    self.problem = problem
    self.strategy = strategy
    self.config = problem.optimization
    self.seed = problem.seed
    self.constraints = self.config.constraints()
    self.targets = problem.targets
    self.train_images = np.asarray(problem.train_images, dtype=np.float64)
    self.test_images = np.asarray(problem.test_images, dtype=np.float64)
    self.noise = problem.noise
    self.noise_off = NoiseConfig(enabled=False)

    self.objective = attack_loss.get_objective(
        problem.model, self.targets, self.constraints)
    self.target_objectives = [
        attack_loss.get_objective(problem.model, self.targets[k:k + 1], self.constraints)
        for k in range(len(self.targets))
    ]

    self.patch = np.array(problem.patch, dtype=np.float64)
    self.transforms = initial_transforms(problem)
    lr = self.config.learning_rate
    self.patch_optimizer = optimizer.BlockOptimizer(self.patch.shape, lr)
    self.transform_optimizers = [
        optimizer.BlockOptimizer((4,), lr) for _ in self.targets]

    self.timer = utils.PhaseTimer()

    self.report = TrialReport(
        strategy=strategy.value,
        seed=self.seed,
        config=_trial_config(problem.config, self.seed, strategy, self.targets),
        image_shape=tuple(self.train_images.shape[1:]),
        patch_shape=tuple(self.patch.shape),
        initial_transforms=self.transforms.tolist(),
        notes=list(notes),
        initial_patch=self.patch.copy(),
    )

  def batches(self, epoch: int) -> tp.List[np.ndarray]:
    return list(batches(
        self.train_images, self.config.batch_size, self.seed, epoch))

  def step_patch(self, gradient: np.ndarray):
    units = self.config.patch_units
    params = self.patch_optimizer.apply(self.patch / units, gradient * units)
    self.patch = np.clip(params * units, 0., 255.)

  def step_transform(self, k: int, gradient: np.ndarray):
    params = self.transform_optimizers[k].apply(self.transforms[k], gradient)
    self.transforms[k] = placement.project_array(params, self.constraints)

  def train_epoch(self, epoch: int, update_transforms: bool) -> float:
    """Patch updates (and transform updates if asked) over one epoch."""
    total = 0.
    count = 0
    for b, batch in enumerate(self.batches(epoch)):
      rng = utils.rng(self.seed, 'train', epoch, b)
      grads = self.objective.loss_and_grad(
          batch, self.patch, self.transforms, self.noise, rng)
      self.step_patch(grads.patch)
      if update_transforms:
        for k in range(len(self.targets)):
          self.step_transform(k, grads.transforms[k])
      total += grads.breakdown.total * len(batch)
      count += len(batch)
    return total / count

  def run_candidate(self, iteration: int, k: int, r: int) -> Candidate:
    """One update pass over the training set for restart candidate r of T_k."""
    if r == 1:
      transform = self.transforms[k].copy()
      opt = self.transform_optimizers[k].copy()
    else:
      rng = utils.rng(self.seed, 'restart', iteration, k, r)
      transform = placement.random_transform(rng, self.constraints).to_array()
      opt = optimizer.BlockOptimizer((4,), self.config.learning_rate)

    objective = self.target_objectives[k]
    loss_sum = 0.
    count = 0
    for b, batch in enumerate(self.batches(iteration)):
      value = objective.loss(batch, self.patch, transform[np.newaxis], self.noise_off)
      loss_sum += value.total * len(batch)
      count += len(batch)

      rng = utils.rng(self.seed, 'candidate', iteration, k, r, b)
      grads = objective.loss_and_grad(
          batch, self.patch, transform[np.newaxis], self.noise, rng)
      transform = placement.project_array(
          opt.apply(transform, grads.transforms[0]), self.constraints)

    if self.config.full_eval:
      loss = objective.evaluate(self.train_images, self.patch, transform[np.newaxis]).total
    else:
      loss = loss_sum / count
    return Candidate(transform, opt, loss)

  def restart_search(self, iteration: int, phase: str):
    """Replaces every T_k by the best of R candidates."""
    restarts = self.config.restarts
    workers = min(self.config.restart_workers, restarts)
    for k in range(len(self.targets)):
      rs = range(1, restarts + 1)
      if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(workers) as pool:
          candidates = list(pool.map(
              lambda r: self.run_candidate(iteration, k, r), rs))
      else:
        candidates = [self.run_candidate(iteration, k, r) for r in rs]

      losses = [c.loss for c in candidates]
      best = int(np.argmin(losses))
      self.transforms[k] = candidates[best].transform
      self.transform_optimizers[k] = candidates[best].optimizer
      self.report.candidates.append(dict(
          iteration=iteration, k=k, losses=losses, selected=best, phase=phase))

  def should_evaluate(self, iteration: int) -> bool:
    return (
        iteration % self.config.eval_every == 0
        or iteration == self.config.iterations)

  def record(self, iteration: int, noisy_loss: tp.Optional[float]):
    report = self.report
    train = None
    if self.should_evaluate(iteration):
      with self.timer('evaluation'):
        train = self.objective.evaluate(
            self.train_images, self.patch, self.transforms)
      self.train_per_target = train.per_target.tolist()
    report.train_loss.append(None if train is None else train.total)
    if iteration > 0:
      report.train_loss_noisy.append(noisy_loss)
    report.transform_history.append(self.transforms.tolist())
    report.patch_range_history.append(
        (float(self.patch.min()), float(self.patch.max())))
    report.patch_checksums.append(utils.array_checksum(self.patch))

    stats = dict(iteration=iteration, strategy=self.strategy.value, seed=self.seed)
    if train is not None:
      stats['train_loss'] = train.total
      stats.update(
          {f'train_loss_{k}': v for k, v in enumerate(train.per_target)})
      logging.log_every_n(
          logging.INFO, f'[{self.strategy.value} seed={self.seed}] '
          f'iteration {iteration} train loss {train.total:.4f}', 10)
    if noisy_loss is not None:
      stats['train_loss_noisy'] = noisy_loss
    if self.problem.log_fn is not None:
      self.problem.log_fn(stats)

  def evaluate_test(self, transforms: np.ndarray, patch: np.ndarray) -> tp.List[float]:
    with self.timer('evaluation'):
      return self.objective.evaluate(
          self.test_images, patch, transforms).per_target.tolist()

  def finish(self) -> TrialReport:
    report = self.report
    report.test_loss = self.evaluate_test(self.transforms, self.patch)
    report.train_loss_final = self.train_per_target
    report.final_transforms = self.transforms.tolist()
    report.patch = self.patch.copy()
    report.timings = self.timer.totals()
    return report

  def start(self):
    report = self.report
    report.test_loss_initial = self.evaluate_test(self.transforms, self.patch)
    self.record(0, None)


def _trial_config(
    config: tp.Optional[dict],
    seed: int,
    strategy: Strategy,
    targets: np.ndarray,
) -> dict:
  """The run config that reproduces exactly this trial."""
  config = json.loads(json.dumps(config)) if config else {}
  config['trials'] = 1
  config['base_seed'] = seed
  config.setdefault('optimization', {})['strategy'] = strategy.value
  if 'strategies' in config:
    config['strategies'] = None
  config['targets'] = np.asarray(targets).tolist()
  return config


def _run(problem: AttackProblem, strategy: Strategy, body: tp.Callable[[_Trial], None]) -> TrialReport:
  timer = utils.PhaseTimer()
  with timer('total'):
    trial = _Trial(problem, strategy)
    trial.start()
    body(trial)
    report = trial.finish()
  report.timings['total'] = timer.seconds['total']
  return report


def run_fixed(problem: AttackProblem) -> TrialReport:
  def body(trial: _Trial):
    for n in range(trial.config.iterations):
      with trial.timer('patch'):
        noisy = trial.train_epoch(n, update_transforms=False)
      trial.record(n + 1, noisy)
  return _run(problem, Strategy.FIXED, body)


def run_joint(problem: AttackProblem) -> TrialReport:
  def body(trial: _Trial):
    for n in range(trial.config.iterations):
      with trial.timer('joint'):
        noisy = trial.train_epoch(n, update_transforms=True)
      trial.record(n + 1, noisy)
  return _run(problem, Strategy.JOINT, body)


def run_split(problem: AttackProblem) -> TrialReport:
  def body(trial: _Trial):
    for n in range(trial.config.iterations):
      with trial.timer('patch'):
        noisy = trial.train_epoch(n, update_transforms=False)
      with trial.timer('restart'):
        trial.restart_search(n, phase='split')
      trial.record(n + 1, noisy)
  return _run(problem, Strategy.SPLIT, body)


def joint_iterations(config: OptimizationConfig) -> int:
  return math.ceil(config.joint_fraction * config.iterations)


def run_hybrid(problem: AttackProblem) -> TrialReport:
  def body(trial: _Trial):
    num_joint = joint_iterations(trial.config)
    for n in range(trial.config.iterations):
      if n < num_joint:
        with trial.timer('joint'):
          noisy = trial.train_epoch(n, update_transforms=True)
      else:
        noisy = None
        with trial.timer('restart'):
          trial.restart_search(n, phase='hybrid')
      trial.record(n + 1, noisy)
  return _run(problem, Strategy.HYBRID, body)


RUNNERS: tp.Dict[Strategy, tp.Callable[[AttackProblem], TrialReport]] = {
    Strategy.FIXED: run_fixed,
    Strategy.JOINT: run_joint,
    Strategy.SPLIT: run_split,
    Strategy.HYBRID: run_hybrid,
}


def run_strategy(problem: AttackProblem, strategy: tp.Union[Strategy, str]) -> TrialReport:
  return RUNNERS[Strategy(strategy)](problem)


def run_trials(
    problem: AttackProblem,
    strategy: tp.Union[Strategy, str],
    trial_count: int,
    base_seed: tp.Optional[int] = None,
    workers: int = 1,
) -> tp.List[TrialReport]:
  """Trial i runs with seed base_seed + i; reports come back in trial order."""
  if trial_count < 1:
    raise errors.ConfigError(f'trial count must be >= 1, got {trial_count}')
  strategy = Strategy(strategy)
  if base_seed is None:
    base_seed = problem.seed
  problems = [
      dataclasses.replace(problem, seed=base_seed + i) for i in range(trial_count)]
  run = lambda p: run_strategy(p, strategy)

  desc = f'{strategy.value} trials'
  if workers > 1 and trial_count > 1:
    with concurrent.futures.ThreadPoolExecutor(min(workers, trial_count)) as pool:
      futures = [pool.submit(run, p) for p in problems]
      for _ in tqdm.tqdm(
          concurrent.futures.as_completed(futures), total=trial_count, desc=desc):
        pass
      return [f.result() for f in futures]
  return [run(p) for p in tqdm.tqdm(problems, desc=desc, disable=trial_count == 1)]


def check_argmin(report: TrialReport) -> bool:
  """Every recorded selection picked a minimal-loss candidate."""
  return all(
      c['losses'][c['selected']] == min(c['losses']) for c in report.candidates)
