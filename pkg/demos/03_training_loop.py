"""One DIVERSIFY run next to ERM, trained on two sites and tested on the third.

Single runs swing a lot with the seed (held-out accuracy anywhere from chance
upward, latent-domain ARI from ~0 to 1); 06_benchmark.py averages over seeds.
"""

import numpy as np

from diversify.analysis import accuracy, adjusted_rand_index
from diversify.config import ExperimentConfig
from diversify.dataio import generate_synthetic, split_train_val
from diversify.training import predict, train, train_erm

cfg = ExperimentConfig()
data = generate_synthetic(cfg.data)
held = data.true_domain == 2
tr, va = split_train_val(data.subset(np.flatnonzero(~held)), 0.8, 0)
test = data.subset(np.flatnonzero(held))

for name, fn in (("erm", train_erm), ("diversify", train)):
    res = fn(tr, va, cfg.train, cfg.model)
    pred, _ = predict(res.bundle, test.X)
    print(f"{name:10s} val={max(res.val_accs):.3f} held-out site acc={accuracy(pred, test.y):.3f}")

print("last rounds of the history:")
for row in res.history[-4:]:
    print(" ", row)
print(f"pseudo-domain vs site on train: ARI={adjusted_rand_index(tr.true_domain, res.pseudo_domain):.3f}")
