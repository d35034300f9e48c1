"""Soft centroids, nearest-centroid labels and one Lloyd refinement pass."""

import numpy as np

from diversify.pseudolabel import (assignment_cost, domain_class_label, refresh_pseudo_labels,
                                   split_domain_class)

rng = np.random.default_rng(0)
centers = np.array([[4.0, 0.0], [0.0, 4.0], [-3.0, -3.0]])
truth = rng.integers(0, 3, 300)
F = centers[truth] + rng.normal(size=(300, 2))

# a poorly calibrated classifier: weights only weakly favour the true cluster
W = rng.dirichlet(np.ones(3), size=300) + 0.5 * np.eye(3)[truth]
W /= W.sum(axis=1, keepdims=True)

soft, provisional, refined, res = refresh_pseudo_labels(F, W, "euclidean")
print("soft centroids:\n", np.round(soft, 2))
print("refined centroids:\n", np.round(res.centroids, 2))
print(f"cost before {assignment_cost(F, soft, provisional, 'euclidean'):.1f} "
      f"after {assignment_cost(F, res.centroids, refined, 'euclidean'):.1f}, "
      f"{res.n_changed} labels moved")

# (latent domain, class) pairs become one label for the supervised step
s = domain_class_label(np.array([0, 1, 2]), np.array([3, 3, 0]), 4)
print("joint labels", s.tolist(), "->", [a.tolist() for a in split_domain_class(s, 4)])
