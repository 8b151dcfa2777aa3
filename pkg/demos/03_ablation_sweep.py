"""
Running an ablation sweep through the command line
==================================================

The ``ablate`` subcommand trains one run per manifest cell and collects a
CSV row for each. Here it compares the gated model against the variants
that drop the gate, the auxiliary losses or the speech branch, on the
imbalanced corpus from the previous demo.

Equivalent shell command::

    moe-erc ablate demos/configs/imbalanced.json demos/configs/sweep.json --out sweep.csv

Nine cells of about 25 seconds each.
"""

import csv
import sys
from pathlib import Path

from moe_erc.cli import main

here = Path(__file__).parent
out = Path("demo-runs") / "sweep.csv"

code = main(["ablate", str(here / "configs" / "imbalanced.json"), str(here / "configs" / "sweep.json"),
             "--out", str(out), f"--output_dir={Path('demo-runs')}"])
if code != 0:
    sys.exit(code)

with open(out) as fh:
    rows = list(csv.DictReader(fh))

# average the per-seed rows for each variant
by_variant = {}
for r in rows:
    by_variant.setdefault(r["variant"], []).append(float(r["test_weighted_f1"]))
for variant, f1s in by_variant.items():
    print(f"{variant:12s} mean test F1 {sum(f1s) / len(f1s):.3f} over {len(f1s)} seed(s)")
