"""
Segmentation losses and evaluation metrics
==========================================

"""

import numpy as np

from emeralds.metrics import (
    SceConfig,
    auc,
    bce_loss,
    confusion,
    dice_loss,
    dice_score,
    f1,
    iou,
    precision,
    recall,
    roc_curve,
    sce_loss,
    seg_loss,
    specificity,
)

# Losses on a tiny soft mask.
g = np.array([1, 1, 0, 0])
s = np.array([1.0, 0.0, 0.0, 0.0])
print("BCE  :", bce_loss(s, g))
print("Dice :", dice_loss(s, g), "(1/3 by hand)")
print("BCE + Dice:", seg_loss(s, g))
print("SCE of two uniform distributions:", sce_loss([0.5, 0.5], [0.5, 0.5], SceConfig(1, 1)))

# Overlap metrics on two 3D masks.
rng = np.random.default_rng(0)
a = rng.random((8, 8, 8)) < 0.3
b = a ^ (rng.random((8, 8, 8)) < 0.1)
j = iou(a, b)
print(f"dice {dice_score(a, b):.4f}  iou {j:.4f}  2j/(1+j) {2 * j / (1 + j):.4f}")

# Classification metrics from a confusion table.
labels = rng.integers(0, 2, 200)
scores = labels * 0.8 + rng.normal(0, 0.4, 200)
c = confusion(labels, (scores >= 0.5).astype(int))
print(c)
print(f"precision {precision(c):.3f}  recall {recall(c):.3f}  "
      f"specificity {specificity(c):.3f}  f1 {f1(c):.3f}")

# ROC with tied scores grouped into single steps; trapezoidal AUC.
roc = roc_curve(np.round(scores, 1), labels)
print("ROC points:", len(roc.points()), " AUC:", round(auc(roc), 4))
