"""Leave-one-site-out benchmark for one seed (pass more seeds for the full table)."""

import sys

from diversify.bench import records_to_csv, run_bench, summary_line
from diversify.config import ExperimentConfig

seeds = tuple(range(1, 1 + int(sys.argv[1]))) if len(sys.argv) > 1 else (1,)
records = run_bench(ExperimentConfig(), seeds=seeds)
print(records_to_csv(records))
print(summary_line(records))
