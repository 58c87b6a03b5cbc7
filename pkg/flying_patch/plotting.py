"""SVG charts of summary and ablation tables.

Output is byte-stable for a fixed input: the SVG id salt is pinned, text is
kept as text and the date metadata is dropped.
"""

import io
import os
import typing as tp

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from flying_patch import errors, train_lib, utils

SVG_RC = {
    'svg.hashsalt': 'flying-patch',
    'svg.fonttype': 'none',
    'font.size': 8,
}


def check_columns(frame: pd.DataFrame, columns: tp.Sequence[str], name: str = 'table'):
  for column in columns:
    if column not in frame.columns:
      raise errors.FormatError(f'{name}: missing column {column!r}')


def read_csv(path, columns: tp.Sequence[str]) -> pd.DataFrame:
  try:
    frame = pd.read_csv(path)
  except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
    raise errors.FormatError(f'{path}: {e}') from None
  check_columns(frame, columns, name=os.fspath(path))
  return frame


def figure_to_svg(fig) -> bytes:
  buffer = io.BytesIO()
  with matplotlib.rc_context(SVG_RC):
    fig.savefig(buffer, format='svg', metadata={'Date': None})
  plt.close(fig)
  return buffer.getvalue()


def grouped_bars(
    frame: pd.DataFrame,
    group: str,
    series: str,
    value: str,
    ylabel: str = 'loss',
) -> bytes:
  """Bars of the mean `value` per (group, series) with std whiskers."""
  check_columns(frame, [group, series, value])
  stats = frame.groupby([group, series], sort=False)[value].agg(
      mean='mean', std=lambda x: float(np.std(x)))
  groups = list(dict.fromkeys(frame[group]))
  names = list(dict.fromkeys(frame[series]))

  with matplotlib.rc_context(SVG_RC):
    fig, ax = plt.subplots(1, 1, figsize=(1.2 + 0.6 * len(groups) * len(names), 2.5))
    width = 0.8 / len(names)
    x = np.arange(len(groups))
    for i, name in enumerate(names):
      means = [stats['mean'].get((g, name), np.nan) for g in groups]
      stds = [stats['std'].get((g, name), 0.) for g in groups]
      ax.bar(x + (i - (len(names) - 1) / 2) * width, means, width,
             yerr=stds, capsize=2, label=str(name))
    ax.set_xticks(x)
    ax.set_xticklabels([f'{group} {g}' for g in groups])
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False)
    fig.tight_layout()
  return figure_to_svg(fig)


def line_with_band(
    frame: pd.DataFrame,
    x: str,
    mean: str,
    std: str,
    xlabel: str,
    ylabel: str = 'loss',
) -> bytes:
  check_columns(frame, [x, mean, std])
  frame = frame.sort_values(x)
  xs = frame[x].to_numpy(dtype=np.float64)
  means = frame[mean].to_numpy(dtype=np.float64)
  stds = frame[std].to_numpy(dtype=np.float64)

  with matplotlib.rc_context(SVG_RC):
    fig, ax = plt.subplots(1, 1, figsize=(4, 2.5))
    ax.plot(xs, means, marker='o')
    ax.fill_between(xs, means - stds, means + stds, alpha=0.3)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
  return figure_to_svg(fig)


def plot_summary(frame: pd.DataFrame) -> bytes:
  """Test loss per target and strategy, averaged over trials."""
  check_columns(frame, train_lib.SUMMARY_COLUMNS, name='summary')
  return grouped_bars(frame, 'target_index', 'strategy', 'test_loss')


def plot_summaries(paths: tp.Sequence[str], out_dir: str) -> tp.List[str]:
  """One SVG per summary CSV, named after the CSV."""
  outputs = []
  for path in paths:
    frame = read_csv(path, train_lib.SUMMARY_COLUMNS)
    name = os.path.splitext(os.path.basename(path))[0] + '.svg'
    out = os.path.join(out_dir, name)
    if out in outputs:
      parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
      out = os.path.join(out_dir, f'{parent}_{name}')
    utils.write_bytes(out, plot_summary(frame))
    outputs.append(out)
  return outputs
