"""
Priors, covariance and relaxation
=================================

Only the |psi|^2 prior is carried along by the guidance flow; other powers of
the density are not. Starting far from equilibrium in a box, the coarse-grained
H-function of an ensemble falls as the particles spread over the mode pattern.

Run with ``python notebooks/03_relaxation_and_priors.py`` (a couple of minutes).
"""
# %%
import yaml

from weakbohm.config import parse_config
from weakbohm.pipeline import covariance_study, continuity_study, relaxation_study
from weakbohm.scenarios import Scenario, bundled, bundled_path

quartic = bundled("quartic_superposition")
cov = covariance_study(quartic)
for label, r in cov.residuals.items():
    print(f"{label:>12}: " + "  ".join(f"{v:.2e}" for v in r), "(resolution-limited)" if cov.resolution_limited(label) else "")

# %% [markdown]
# Continuity in momentum space fails for an anharmonic well, while the
# harmonic well keeps both representations consistent.

# %%
for name in ("harmonic_coherent", "quartic_superposition"):
    study = continuity_study(bundled(name))
    print(f"{name}: score {study.score:.3g}, verdict {study.verdict}")

# %% [markdown]
# Relaxation with a reduced ensemble.

# %%
data = yaml.safe_load(bundled_path("relaxation_box").read_text())
data["equilibrium"]["relaxation"]["n_particles"] = 10000
box = Scenario(parse_config(yaml.safe_dump(data), "relaxation_box (reduced)"))
series = relaxation_study(box, workers=1)
for t, h in zip(series.times, series.H_values):
    print(f"  t = {t:4.1f}  H = {h:.4f}")
print(f"relative decrease {series.relative_decrease:.0%}, max ratio {series.max_ratio:.3f}")
