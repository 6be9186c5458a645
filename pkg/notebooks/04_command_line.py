# %% [markdown]
# # Command line
#
# The same experiments run from the shell. Settings resolve from built-in
# defaults, then a preset, a TOML file, `PDLEARN_*` environment variables
# and finally flags.
#
# ```sh
# pdlearn baseline --out runs/baseline --monte-carlo 1000000
# pdlearn train --preset quick --mode model-based --out runs/mb
# pdlearn train --preset quick --mode model-free-det --out runs/mf
# pdlearn eval --checkpoint runs/mb/checkpoint --out runs/mb-eval
# pdlearn check
# ```
#
# Below, a tiny run through `main` with a config file.

# %%
import csv
import tempfile
from pathlib import Path

from pdlearn.cli import main

out = Path(tempfile.mkdtemp())
(out / "tiny.toml").write_text("rounds = 2\niters = 2000\nwindow = 500\nworkers = 1\n")
code = main(["train", "--config", str(out / "tiny.toml"), "--out", str(out / "run")])
print("exit code", code)

# %%
with open(out / "run" / "metrics_windowed.csv", newline="") as fh:
    rows = list(csv.DictReader(fh))
for r in rows:
    print(r["iter_end"], r["rate_mean"], r["rate_se"])
print(sorted(p.name for p in (out / "run").iterdir()))
