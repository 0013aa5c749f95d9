"""
From phantom scans to a malignancy classifier
=============================================

The same stages the ``emeralds`` command runs, called from Python on a
small phantom dataset.
"""

import tempfile
from pathlib import Path

from emeralds.pipeline import (
    assemble_dataset,
    cmd_ablate,
    cmd_cade_eval,
    cmd_cadx_train,
    cmd_emr_gen,
    cmd_plot_roc,
    load_config,
)
from emeralds.synthetic import write_phantom_dataset

root = Path(tempfile.mkdtemp())
print(write_phantom_dataset(root / "data", n_scans=20, annotation_only=3000))

cfg = load_config(None, scans_dir=root / "data" / "scans", masks_dir=root / "data" / "masks",
                  annotations=root / "data" / "annotations.csv", out_dir=root / "out")

# Detection: the built-in blob detector stands in for an external segmenter.
cade = cmd_cade_eval(cfg)
print({k: round(v, 3) for k, v in cade.metrics.items()})

# Synthetic records for every consensus nodule, with a bias check.
emr, ok = cmd_emr_gen(cfg)
print(emr.metrics["status"])

# Classifier: top-k radiomics + prototype similarity + EMR, grouped 5-fold CV.
ds = assemble_dataset(cfg)
with_emr = cmd_cadx_train(cfg, ds)
without = cmd_cadx_train(load_config(None, **{**cfg.__dict__, "use_emr": False}), ds)
print("AUC with EMR", round(with_emr.metrics["auc"], 3),
      "without", round(without.metrics["auc"], 3))
print("selected radiomics:", with_emr.extra["selected"])

# Ablation over the number of radiomic features.
for row in cmd_ablate(cfg, [1, 3, 5, 7], ds=ds).rows:
    print(row["k"], round(row["auc"], 3), row["features"])

svg = cmd_plot_roc([("with EMR", with_emr), ("radiomics only", without)], root / "out" / "roc.svg")
print("ROC plot written to", root / "out" / "roc.svg")
