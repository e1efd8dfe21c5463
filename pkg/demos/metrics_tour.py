"""
Score distributions and the metrics on them
===========================================

Ten bins, ratings 1..10. Everything below is plain numpy arrays.
"""
import numpy as np
from scoredist import distcore

np.set_printoptions(precision=3, suppress=True)

# a vote histogram and its normalized form
counts = [0, 1, 5, 17, 38, 36, 15, 6, 5, 1]
g = distcore.normalize_histogram(counts)
print("gt", g, "mean", round(distcore.mean_score(g), 3))

# a prediction one bin too optimistic
p = np.r_[0, g[:-1]]
p[-1] += g[-1]
print("cd loss", distcore.cd_loss(p, g))       # cumulative gap, squared
print("kl", distcore.kl_div(p, g))
print("high quality?", distcore.binarize(distcore.mean_score(p)))

# huber grows linearly past the knee, euclidean keeps growing quadratically
spike = np.eye(10)[9]
for name, loss in [("huber", distcore.huber_loss), ("euclidean", distcore.euclidean_loss)]:
    val, grad = loss(g, spike)
    print(name, round(val, 4), "largest grad", round(np.abs(grad).max(), 4))

# a dataset-level report
rng = np.random.default_rng(0)
gts = rng.dirichlet(np.ones(10), 50)
preds = gts + rng.normal(0, 0.02, gts.shape).clip(-gts, None)
print(distcore.dataset_metrics(preds, gts).to_json())
