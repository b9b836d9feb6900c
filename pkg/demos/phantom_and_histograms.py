"""
Synthetic four-view exams and their intensity histograms
=========================================================

Render one exam per density class and look at what the histogram
baseline sees: denser breasts move mass into the upper bins.
"""

import numpy as np

from densitynet import baseline as bl
from densitynet import synthgen as sg
from densitynet.common import DENSITY_PHRASES, VIEWS

config = sg.PhantomConfig(seed=3)
rng = np.random.default_rng(3)

# one view per class, with the ground-truth masks behind it; exposure varies
# per view, so single views need not be ordered by brightness
for density in range(4):
    image, truth = sg.render_view_with_truth(density, "L-CC", config, rng)
    inside = image.pixels[truth.breast]
    print(f"class {density} ({DENSITY_PHRASES[density]}): tissue fraction {truth.fraction:.2f}, "
          f"mean breast intensity {inside.mean():7.0f}")

# a whole exam: four views rendered lazily from the exam's own seed
exams, manifest = sg.generate_corpus(n_exams=8, config=config)
exam = exams[0]
print("\nexam", exam.exam_id, "density", exam.density, "BI-RADS", exam.birads)
print("report:", exam.report)
stack = exam.pixel_stack()
print("pixel stack", stack.shape, stack.dtype)

# 10-bin histograms per view, concatenated in view order
features = bl.extract_features(exam.views, 10)
for v, view in enumerate(VIEWS):
    print(f"{view:6s}", np.round(features[v * 10 : (v + 1) * 10], 3))
