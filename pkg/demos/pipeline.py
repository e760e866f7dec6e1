"""Generate data, train Mpc-mode models, then compare MPC with a thermostat.

Run from the repository root:  python3 demos/pipeline.py [out_dir]
Takes a few minutes on one core.
"""

import sys
from pathlib import Path

import pandas as pd

from icnn_mpc.cli import main

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")

steps = [
    ["gen-data", "--out", str(out)],
    ["train", "--out", str(out), "--family", "ficnn_mpc"],
    ["audit", "--out", str(out), "--strict"],
    ["mpc-run", "--out", str(out / "mpc")],
    ["mpc-run", "--out", str(out / "thermostat"), "--set", "controller=thermostat"],
    ["report", "--out", str(out / "mpc")],
]
for argv in steps:
    if argv[0] == "mpc-run" and "controller=thermostat" not in argv:
        argv += ["--set", f"fine_model={out / 'model_20.icnn'}",
                 "--set", f"coarse_model={out / 'model_180.icnn'}"]
    print("$ icnn-mpc", " ".join(argv))
    code = main(argv)
    if code:
        sys.exit(code)

table = pd.concat([pd.read_csv(out / d / "summary.csv") for d in ("mpc", "thermostat")])
print(table[["controller", "energy_kwh", "violation_Kh", "mean_solve_ms"]].to_string(index=False))
