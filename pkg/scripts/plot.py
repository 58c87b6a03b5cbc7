"""Renders summary.csv files as SVG bar charts.

  python scripts/plot.py --out=plots experiments/*/summary.csv
"""

from absl import app
from absl import logging

from flying_patch import cli_lib
from flying_patch import errors
from flying_patch import plotting


def main(argv):
  paths = argv[1:]
  if not paths:
    raise errors.ConfigError('no summary CSVs given')
  for out in plotting.plot_summaries(paths, cli_lib.OUT.value or '.'):
    logging.info('wrote %s', out)

if __name__ == '__main__':
  app.run(cli_lib.run_main(main))
