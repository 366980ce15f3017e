"""
Velocity field and weak measurements on a free Gaussian packet
==============================================================

The guidance field is built two ways, from the weak value of velocity and
from j/P, and the two agree to round-off. A reduced Monte Carlo run of the
weak-then-strong protocol then recovers the same field from simulated
pointer readings.

Run with ``python notebooks/01_free_packet_field.py`` (about a minute).
"""
# %%
import numpy as np
import yaml

from weakbohm.config import parse_config
from weakbohm.pipeline import field_equivalence, weak_study
from weakbohm.scenarios import Scenario, bundled, bundled_path
from weakbohm.weakvalue import current, velocity_field
from weakbohm.wavefield import position_density

scn = bundled("free_gaussian")
psi = scn.states_at(2.0)
print(f"grid {scn.grid.points}, dt {scn.dt}, t = {psi.time:.3f}")

# %% [markdown]
# Weak-value field against j/P, at every snapshot of the run.

# %%
eq = field_equivalence(scn)
print(eq.summary())

v = velocity_field(psi, scn.hamiltonian)
j = current(psi)
P = position_density(psi).values
x = scn.grid.axes[0]
i = np.argmax(P)
print(f"at the peak x = {x[i]:.3f}: v = {v.components[0][i]:.6f}, j/P = {j.components[0][i] / P[i]:.6f}")

# %% [markdown]
# For a free packet of initial spread s the field is affine,
# v = k + (x - x_c) t / (4 s^4 + t^2) in units hbar = m = 1.

# %%
s, k, x0, t = 1.0, 1.0, -4.0, psi.time
xc = x0 + k * t
v_exact = k + (x - xc) * t / (4 * s**4 + t**2)
near = np.abs(x - xc) < 3 * s * np.sqrt(1 + (t / (2 * s**2)) ** 2)
print("max |v - exact| within three spreads:", np.abs(v.components[0][near] - v_exact[near]).max())

# %% [markdown]
# One weak-measurement run at the bundled settings, without bias extrapolation.
# The wide pointer keeps the disturbance small, so per-bin errors are large
# and shrink only as one over the square root of the number of runs.

# %%
data = yaml.safe_load(bundled_path("free_gaussian").read_text())
data["protocol"].pop("extrapolation")
small = Scenario(parse_config(yaml.safe_dump(data), "free_gaussian (single run)"))
study, _ = weak_study(small, workers=1, extrapolate=False)
est = study.estimates[0]
print(f"{study.within_fraction:.0%} of {study.reported_bins} bins within 3 standard errors")
for c, vh, se, va in zip(est.bin_centers, est.v_hat, est.std_error, study.analytic):
    if np.isfinite(vh):
        print(f"  x = {c:6.2f}  estimate {vh:7.3f} +- {se:.3f}   field {va:7.3f}")
