"""Small Monte Carlo coverage study at n = 10 and n = 30.

Run with ``python3 demos/small_coverage_study.py``. Uses 200 replications
per point so it finishes in seconds; the acceptance suite uses 2000.
"""

from csmart.harness import emit_table, run_experiment
from csmart.simgen import SimulationDesign

design = SimulationDesign(n=(10, 30), m=(5,), delta=(0.5,), icc=(0.1,),
                          replications=200, base_seed=1)
result = run_experiment(design, workers=2)
print(emit_table(result, format="text"))
