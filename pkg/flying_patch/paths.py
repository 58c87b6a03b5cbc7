import pathlib

_FILE_PATH = pathlib.Path(__file__)
PROJECT_PATH = _FILE_PATH.parent.parent
DATA_PATH = PROJECT_PATH / 'data'
CONFIGS_PATH = PROJECT_PATH / 'configs'

# Generated on demand by synth.ensure_benchmark.
BENCHMARK_PATH = DATA_PATH / 'benchmark'
BENCHMARK_MODEL = BENCHMARK_PATH / 'tiny_frontnet.pfnet'
