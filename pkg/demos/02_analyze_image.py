"""Train small models, then detect, classify and flag cells in an unseen image.

    python3 demos/02_analyze_image.py

Runs in about a minute; the full-size pipeline lives behind the ``rbcscope`` CLI.
"""

import numpy as np

from rbcscope import detector as det
from rbcscope import evalharness as ev
from rbcscope import gbm as gb
from rbcscope import heads as hd
from rbcscope.featurizer import FeatureExtractor
from rbcscope.synthgen import DatasetConfig, SceneSpec, generate_scene, generate_scenes

scenes = generate_scenes(DatasetConfig(n_scenes=40, seed=1))
extractor = FeatureExtractor(0)

detector, log = det.train_detector(scenes[:24], det.DetectorConfig(epochs=10))
print(f"detector: foreground loss {log.foreground[0]:.3f} -> {log.foreground[-1]:.3f}")

# heads will see detector boxes, which run a little wider than mask boxes,
# so train them on both
data = ev.with_jittered_boxes(scenes, ev.build_patch_dataset(scenes, extractor), extractor)
heads, _ = hd.train_heads(data.features, data.labels, hd.HeadConfig(epochs=15))
probs = hd.predict_probs(heads, data.features)
abnormal = np.array([gb.labelset_is_abnormal(ls) for ls in data.labels], dtype=float)
gbm_model, losses = gb.fit_gbm(probs, abnormal)
print(f"heads on {len(data.patches)} patches; gbm loss {losses[0]:.3f} -> {losses[-1]:.3f}")

scene = generate_scene(SceneSpec(rng_seed=2024))
truth = sorted(i.cell_type for i in scene.instances)
print(f"\nunseen image with {len(truth)} cells: {truth}")
result = ev.analyze_image(scene.image, detector, heads, gbm_model, extractor)
for r in result.regions:
    b = r.box.box
    flag = "ABNORMAL" if r.abnormal else "normal"
    print(f"  ({b.x_min:3d},{b.y_min:3d})-({b.x_max:3d},{b.y_max:3d}) score={r.box.score:.2f} "
          f"{flag:8s} p={r.abnormal_prob:.2f} labels={sorted(r.labels) or '-'}")
