"""Proxy divergence between groups of segments.

A probe is trained to tell two groups apart; held-out error e gives
2 * (1 - 2e). Random halves of one pool score near 0, separable groups near 2.
"""

import numpy as np

from diversify.analysis import (ProbeConfig, best_threshold_error, pairwise_divergence_matrix,
                                proxy_h_divergence, random_groups)
from diversify.dataio import SynthConfig, generate_synthetic

rng = np.random.default_rng(0)
a, b = rng.normal(0, 1, 400), rng.normal(1.5, 1, 400)
print(f"1-d gaussians: probe {proxy_h_divergence(a, b):.3f}, "
      f"best threshold {2 * (1 - 2 * best_threshold_error(a, b)):.3f}")

data = generate_synthetic(SynthConfig(series_per_cell=4, seed=1))
for label, groups in (("true sites", data.true_domain), ("random", random_groups(len(data), 3, 0))):
    rep = pairwise_divergence_matrix(data, groups, probe=ProbeConfig("mlp"))
    print(f"{label:10s} mean off-diagonal {rep.mean_off_diagonal:.3f}")
    print(np.round(np.array(rep.matrix), 2))
