"""
Ranking metrics and reader agreement
====================================

Accuracy at several ranks, one-vs-rest AUC, and Cohen's kappa between
synthetic readers who only confuse neighbouring classes.
"""

import numpy as np

from densitynet import evalkit as ek

rng = np.random.default_rng(0)
truths = rng.integers(0, 4, size=300)

# a model that is right most of the time, with noise on the other classes
logits = rng.normal(size=(300, 4))
logits[np.arange(300), truths] += 2.0
probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)

report = ek.evaluate(probs, truths)
print("top-1 %.3f  top-2 %.3f  top-3 %.3f" % (report.top1, report.top2, report.top3))
print("dense vs not dense %.3f" % report.superclass)
print("per-class AUC", np.round(report.class_auc, 3), "macAUC %.3f" % report.mac_auc)

# the trapezoid AUC equals the pair-counting statistic
scores, positives = probs[:, 2], truths == 2
print("AUC class 2: %.6f vs pair count %.6f" % (ek.roc_and_auc(scores, positives).auc,
                                                 ek.auc_pair_count(scores, positives)))

# readers who swap 0<->1 and 2<->3 agree fully once classes are collapsed
raters = {"labels": truths}
for name in ("A", "B"):
    raters[name] = ek.within_superclass_reader(truths, 0.25, rng)
four = ek.kappa_matrix(raters)
two = ek.kappa_matrix({k: ek.collapse_superclass(v) for k, v in raters.items()}, 2)
print("4-class kappas", {k: round(v, 3) for k, v in four.to_dict()["kappa"].items()})
print("2-class kappas", {k: round(v, 3) for k, v in two.to_dict()["kappa"].items()})
