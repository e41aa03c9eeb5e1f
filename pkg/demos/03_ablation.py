"""Why train on mixed patches: a small version of the A / A* / B comparison.

    python3 demos/03_ablation.py

Model A trains on single- and multi-cell patches, Model B on single cells only.
Both are tested on every patch of the held-out folds; A* reuses A's heads on
single-cell test patches. Expect A* >= A > B on exact-match accuracy.
"""

from rbcscope import evalharness as ev
from rbcscope import heads as hd
from rbcscope.synthgen import DatasetConfig

config = ev.ExperimentConfig(dataset=DatasetConfig(n_scenes=60, seed=2), heads=hd.HeadConfig(epochs=15), k=3)
data = ev.prepare_dataset(config)
print(f"{len(data.patches)} patches, {int(data.single.sum())} single-cell")

reports = ev.run_experiments(ev.EXPERIMENTS, data, config)
for eid, rep in reports.items():
    m = rep.mean
    aucs = " ".join(f"{v:.2f}" if v is not None else " n/a" for v in m["auc"].values())
    empty = sum(f["n_empty_predictions"] for f in rep.per_fold)
    print(f"{eid:13s} exact={m['exact_match']:.3f}  auc=[{aucs}]  unlabelled={empty}")
print(f"gbm accuracy {reports['model_a'].mean['gbm_accuracy']:.3f} "
      f"(majority baseline {reports['model_a'].mean['gbm_majority_baseline']:.3f})")
