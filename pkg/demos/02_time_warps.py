"""
Time warps and the warp operator
================================

A warp is a monotone map of [0, 1] onto itself built from a few sine
coefficients.  Applied to a sampled atom it is a fixed L x L matrix, so the
warped atom is linear in the atom.
"""

import numpy as np

from percdl.synth import default_atoms
from percdl.warp import WarpConfig, build_warp_matrix, project_theta, psi_eval

rng = np.random.default_rng(1)
cfg = WarpConfig(D=3, W=10)

# %%
# Random coefficients are projected onto the feasible set, which guarantees
# a strictly increasing map with pinned endpoints.
a = project_theta(rng.uniform(-1, 1, (cfg.D, cfg.W)))
t = np.linspace(0, 1, 11)
print("row l1 norms:", np.round(np.abs(a).sum(axis=1), 4))
print("psi(t):", np.round(psi_eval(a, t), 3))

# %%
# The operator preserves constants and moves the bump of the atom.
phi = default_atoms(1, 50)[0, :, 0]
M = build_warp_matrix(a, cfg, 50)
print("constant preserved:", np.allclose(M @ np.ones(50), 1.0))
print("peak before / after:", int(np.argmax(phi)), int(np.argmax(M @ phi)))
