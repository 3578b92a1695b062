"""Train a style projector on the synthetic corpus with and without the descriptor loss.

The backbone stays frozen.  With gamma > 0 the projector is also rewarded
when a one-step reconstruction carries the reference's style descriptor;
with gamma = 0 it only sees the denoising objective.  The printout compares
held-out descriptor losses against the untrained (zero-output) projector.
"""

import sys

from latentctl.benchmark import projector_ablation

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
runs = projector_ablation("style", seeds=[0], gammas=(0.3, 0.0), steps=steps)
print(f"zero-initialised projector: {runs[0].zero_init:.4f}")
for r in runs:
    print(f"gamma={r.gamma:<4} after {steps} steps: {r.heldout:.4f}  (ratio {r.heldout / r.zero_init:.3f})")
