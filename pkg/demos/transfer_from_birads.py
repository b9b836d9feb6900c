"""
Starting density training from a BI-RADS model
==============================================

Pretrain the network on the three-way screening assessment, copy every
layer except the output layer, and compare learning curves with a run
from random weights. Takes about a minute and a half at reduced resolution.
"""

import numpy as np

from densitynet import cli
from densitynet import cnn
from densitynet import corpus as cp
from densitynet import synthgen as sg

config = sg.PhantomConfig(seed=6, height=64, width=48)
exams, manifest = sg.generate_corpus(n_exams=1000, config=config)
manifest.extract_labels()
retained, _ = cp.apply_exclusion(manifest)
data = cli.data_from_exams(exams, retained, cp.temporal_split(retained))

net_config = cli.cnn_config_for(data["train"])
pretrained = cli.pretrain_birads(data, net_config, epochs=4, seed=100)
print("BI-RADS validation accuracy per epoch", np.round(pretrained.val_accuracy, 3))

# only the output layer is redrawn; everything else is a bit-exact copy
init = cnn.transfer_init(pretrained.params, net_config, np.random.default_rng(1))
print("tensors not copied:", cli.bit_copied(init, pretrained.params))

report = cli.transfer_study(data, pretrained.params, net_config, seeds=(0,), epochs=4)
run = report["runs"][0]
for variant in ("scratch", "transfer"):
    curve = [round(h["val_accuracy"], 3) for h in run[variant]["history"]]
    print(f"{variant:8s} {curve} -> reaches {report['threshold']:.3f} at epoch {run[variant]['epochs_to_threshold']}")
