"""
Paths behind two slits
======================

Equilibrium-sampled starts are carried through the twin-slit velocity field.
Their endpoint histogram reproduces |psi|^2, and no path crosses the symmetry
axis between the slits.

Run with ``python notebooks/02_twin_slit_paths.py`` (well under a minute).
"""
# %%
import numpy as np
import yaml

from weakbohm.config import parse_config
from weakbohm.pipeline import path_study
from weakbohm.scenarios import Scenario, bundled_path
from weakbohm.wavefield import position_density

data = yaml.safe_load(bundled_path("twin_slit").read_text())
data["trajectories"]["n_paths"] = 20000
data.pop("protocol", None)
data["trajectories"].pop("estimated", None)
scn = Scenario(parse_config(yaml.safe_dump(data), "twin_slit (reduced)"))

study = path_study(scn, workers=1, estimated=False)
print(study.summary())

# %% [markdown]
# Endpoint histogram against the Born density on the same bins.

# %%
ends = study.trajectories.paths[:, -1, 0]
grid = scn.grid
P = position_density(study.final_state).values
edges = np.linspace(-30.0, 30.0, 31)
counts, _ = np.histogram(ends, edges)
x = grid.axes[0]
born = np.array([P[(x >= a) & (x < b)].sum() * grid.spacing[0] for a, b in zip(edges[:-1], edges[1:])])
for a, n, b in zip(edges[:-1], counts / len(ends), born):
    print(f"  [{a:6.1f}, {a + 2:6.1f})  paths {n:.4f}  born {b:.4f}  " + "#" * int(200 * n))

# %% [markdown]
# Paths that start on one side of the axis stay there.

# %%
starts = study.trajectories.paths[:, 0, 0]
print("sign flips:", int(np.sum(np.sign(starts) != np.sign(ends))))
