"""
Federated fitting
=================

Each series stays on its own local server.  Only activation counts, warp
coefficients and L-sample atom statistics travel to the central server, so
the message size does not grow with the series length.
"""

from percdl import FitConfig, SynthSpec, fit, gen_dataset, run_federated

cfg = FitConfig(n_init=3, n_perso=3, cdu_mode="barycenter", perso_order="csc_first")

# %%
# With one atom and the same update order, the protocol reproduces the
# centralized solver.
data, truth = gen_dataset(SynthSpec(S=4, K=1, r=3, seed=0))
fed = run_federated(data, 1, 50, truth.transform, cfg)
ref = fit(data, 1, 50, truth.transform, cfg)
print("max atom difference:", abs(fed.fit.dictionary.atoms - ref.dictionary.atoms).max())

# %%
# Message sizes for growing series length.
for N in (500, 5000, 50000):
    data, truth = gen_dataset(SynthSpec(S=2, N=N, seed=1))
    res = run_federated(data, 2, 50, truth.transform, FitConfig(n_init=1, n_perso=1))
    print(f"N={N:>6}: largest message {res.comm.max_message_scalars} scalars")
