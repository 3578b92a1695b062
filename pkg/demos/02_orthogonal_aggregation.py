"""How subject features are merged into the text features.

Subject features are first stripped of their component along the text
features, so the subject branch cannot overwrite what the prompt says.  The
style weight then grows across steps whenever style is far from its
reference and the subject is already close to its own.
"""

import numpy as np

from latentctl.autodiff import Tensor
from latentctl.denoiser import AggregationState, aggregate_ota, orthogonal_reject, update_style_weight
from latentctl.rng import Rng

rng = Rng(0)
f_text, f_sub, f_style = (Tensor(rng.normal((4, 8))) for _ in range(3))
f_hat = orthogonal_reject(f_sub, f_text)
print("per-token cosine with text before rejection:",
      np.round(np.sum(f_sub.data * f_text.data, -1)
               / np.linalg.norm(f_sub.data, axis=-1) / np.linalg.norm(f_text.data, axis=-1), 3))
print("per-token cosine with text after rejection: ",
      np.round(np.sum(f_hat.data * f_text.data, -1)
               / np.linalg.norm(f_hat.data, axis=-1) / np.linalg.norm(f_text.data, axis=-1), 12))

state = AggregationState.initial()
print("\nstep  L_s   L_nc  mu_s")
for step, (L_s, L_nc) in enumerate([(0.8, 0.1), (0.7, 0.2), (0.6, 0.6), (0.5, 0.9), (0.9, 0.0), (0.9, 0.0)]):
    merged = aggregate_ota(f_text, f_style, f_hat, state)
    print(f"{step:>4}  {L_s:.1f}   {L_nc:.1f}   {state.mu_s:.3f}   |merged|={np.linalg.norm(merged.data):.2f}")
    state = update_style_weight(state, L_s, L_nc)
print(f"final mu_s {state.mu_s:.3f} (cap {state.mu_cap})")
