"""
Gradient-boosted trees, baselines and cross-validation
======================================================

"""

import numpy as np

from emeralds.learners import (
    GbdtConfig,
    cross_validate,
    feature_importance,
    train_gbdt,
    train_knn,
    train_logistic,
)
from emeralds.metrics import auc

# A planted problem: only the first two of six columns matter.
rng = np.random.default_rng(1)
X = rng.normal(size=(400, 6))
y = (X[:, 0] + 0.5 * X[:, 1] ** 2 > 0.5).astype(int)
columns = ("signal", "curved", "noise1", "noise2", "noise3", "noise4")

model = train_gbdt(X, y, GbdtConfig(n_trees=100), columns=columns)
print("training loss, every 20 rounds:", np.round(model.train_loss_trace[::20], 4))
print("importance ranking:", feature_importance(model))

# Out-of-fold comparison against the two baselines.
for name, trainer in [
    ("gbdt", lambda Xt, yt: train_gbdt(Xt, yt, GbdtConfig(n_trees=100))),
    ("knn", lambda Xt, yt: train_knn(Xt, yt, k=15)),
    ("logistic", lambda Xt, yt: train_logistic(Xt, yt)),
]:
    cv = cross_validate(X, y, trainer, folds=5, seed=0)
    print(f"{name:9s} AUC {auc(cv.roc):.3f}  pooled {cv.pooled}")
