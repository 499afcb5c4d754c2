"""
Rate of the common-atom estimator
=================================

With warps and activations known, the common atom has a closed-form
estimate.  Its error shrinks like one over the square root of the number of
individuals.
"""

from percdl.experiments import experiment_mle_rate

report = experiment_mle_rate(S_grid=(8, 32, 128, 512), replicates=10)
for cell in sorted(report.cells("error"), key=lambda c: c["S"]):
    print(f"S={cell['S']:>4}: mean error {cell['mean']:.4f} +/- {cell['ci95']:.4f}")
print(f"log-log slope {report.extra['slope']:.3f} (theory -0.5)")
