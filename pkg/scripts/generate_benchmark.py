"""Writes a synthetic benchmark: PGM images, manifest and victim model."""

from absl import app
from absl import flags
from absl import logging

from flying_patch import cli_lib
from flying_patch import synth

IMAGE_COUNT = flags.DEFINE_integer('image_count', 400, 'Number of images.')
HEIGHT = flags.DEFINE_integer('height', 96, 'Image height.')
WIDTH = flags.DEFINE_integer('width', 160, 'Image width.')
CALIBRATION_COUNT = flags.DEFINE_integer(
    'calibration_count', synth.CALIBRATION_COUNT,
    'Scenes used to fit the pose head.')


def main(_):
  seed = cli_lib.SEED.value or 0
  shape = (HEIGHT.value, WIDTH.value)
  out_dir = cli_lib.OUT.value or synth.benchmark_dir(seed, IMAGE_COUNT.value, shape)
  dataset, _ = synth.generate_benchmark(
      seed=seed,
      image_count=IMAGE_COUNT.value,
      shape=shape,
      out_dir=out_dir,
      calibration_count=CALIBRATION_COUNT.value,
  )
  logging.info(f'wrote {len(dataset.images)} images to {out_dir}')

if __name__ == '__main__':
  app.run(cli_lib.run_main(main))
