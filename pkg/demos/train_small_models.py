"""
Histogram baseline versus multi-column CNN
==========================================

A small corpus at reduced resolution, split by patient and date, with
both model families trained for a few epochs. Runs in well under a minute.
"""

import numpy as np

from densitynet import cli
from densitynet import cnn
from densitynet import corpus as cp
from densitynet import evalkit as ek
from densitynet import synthgen as sg

config = sg.PhantomConfig(seed=5, height=64, width=48)
exams, manifest = sg.generate_corpus(n_exams=800, config=config)

# labels come from the report text; exams without a density phrase are dropped
manifest.extract_labels()
retained, excluded = cp.apply_exclusion(manifest)
split = cp.temporal_split(retained)
data = cli.data_from_exams(exams, retained, split)
print("excluded", excluded, {k: len(v) for k, v in data.items()})

# the baseline searches bin counts and both variants on validation accuracy
baseline, search = cli.fit_best_baseline(data["train"], data["validation"], epochs=50)
base_report = ek.evaluate(cli.baseline_probs(baseline, data["test"]), data["test"].density)
print(f"baseline {baseline.variant}, {baseline.bins} bins: test top-1 {base_report.top1:.3f}")

# shared-weight columns, one per view, feeding a common head
net_config = cli.cnn_config_for(data["train"])
result = cli.train_cnn_on(data, net_config, epochs=4, seed=0, policy=cnn.AugmentationPolicy(), log=print)
probs = cnn.predict_stack(result.params, net_config, data["test"].stack)
net_report = ek.evaluate(probs, data["test"].density)
print(f"cnn (best epoch {result.best_epoch}): test top-1 {net_report.top1:.3f}, macAUC {net_report.mac_auc:.3f}")
print("confusion (rows = truth)")
print(np.array(net_report.confusion))
