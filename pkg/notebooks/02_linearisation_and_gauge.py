# %% [markdown]
# # How far the small-angle model goes
#
# Corrections are linear in the rotation parameters.  Two questions: how
# does the error grow with the true rotation, and what does the ridge term
# buy us when the problem has a free global motion?

# %%
import numpy as np

from texalign.align import GaugeDeficiencyError, assemble_system, solve_corrections
from texalign.features import MatchSet
from texalign.synth import rigid_recovery_error

# %% [markdown]
# Exact correspondences related by a rigid motion of growing size.  The
# solved corrections are applied as proper rotations; what is left is the
# linearisation error.

# %%
angles = np.array([0.01, 0.02, 0.04, 0.08, 0.15])
for lam in (1e-6, 1e-2):
    errs = np.array([rigid_recovery_error(a, lambda2=lam) for a in angles])
    slope = np.polyfit(np.log(angles[:4]), np.log(errs[:4]), 1)[0]
    print(f"lambda2 {lam:g}: " + "  ".join(f"{a:.2f}:{e:.2e}" for a, e in zip(angles, errs))
          + f"   slope {slope:.2f}")

# %% [markdown]
# With a vanishing ridge the error is third order: the linear model can
# represent the relative rotation exactly by splitting it between the two
# fragments, so only the mismatch between that split and true rotations
# remains.  A heavier ridge shrinks the corrections and adds a first-order
# bias.  It dominates at the smallest angles and flattens the fitted slope.
#
# Next, the gauge.  Two fragments whose matches differ by a pure offset d.

# %%
d = 0.05
rng = np.random.default_rng(0)
P = rng.uniform(-1, 1, (30, 3))
m = MatchSet(P, P + [d, 0, 0], np.ones(30), np.tile([0, 1], (30, 1)))
system = assemble_system(m, [0, 1])
try:
    solve_corrections(system, 0.0)
except GaugeDeficiencyError as e:
    print("lambda2 = 0:", e)

for lam in (1e-8, 1e-6, 1e-2, 1.0, 100.0):
    w = solve_corrections(system, lam).omega
    print(f"lambda2 {lam:>6g}: t_x = {w[0, 3]:+.6f}, {w[1, 3]:+.6f}   (d/2 = {d / 2})")

# %% [markdown]
# Small ridges give the minimum-norm split, half the offset each way.  Large
# ones stop closing the gap at all, which is why the default scales the
# ridge with the match weights instead of fixing it.
