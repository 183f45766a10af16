"""Simulate one clustered SMART, write it to CSV and analyze it.

Run with ``python3 demos/analyze_simulated_trial.py``. The same CSV can be
passed to ``csmart analyze``.
"""

import tempfile
from pathlib import Path

import numpy as np

from csmart import FitConfig, PRESETS, fit, generate_trial, report, write_csv
from csmart.sandwich import sandwich
from csmart.simgen import DesignPoint, spec_from_design

point = DesignPoint(n=30, m=5, delta=0.5, icc=0.1, kappa=(0.5, 0.5), cor=0.5)
spec = spec_from_design(point)
ds = generate_trial(spec, np.random.default_rng(7))

out = Path(tempfile.mkdtemp()) / "trial.csv"
write_csv(ds, out)
print(f"wrote {ds.n} clusters ({ds.N} members) to {out}\n")

f = fit(ds, FitConfig())
for name in ("minimal", "proposed"):
    fsa = PRESETS[name]
    print(f"[{name}]")
    print(report(f, sandwich(f, fsa), fsa=fsa).format())
    print()
