"""Train S+T, image-level ACDA and full SSDAS on one seed and compare target mIoU.

    python demos/compare_variants.py [seed]

Takes about three minutes on one core.
"""
import sys
import time

from ssdas import synthdata, trainer
from ssdas.config import ExperimentConfig, acda_image_only, s_plus_t

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
data = trainer.TrainData.from_split(synthdata.build_benchmark(k=1, seed=seed))
base = ExperimentConfig(seed=seed)

for name, cfg in (("S+T", s_plus_t(base)), ("ACDA image", acda_image_only(base)), ("SSDAS", base)):
    t0 = time.perf_counter()
    res = trainer.train_s_plus_t(cfg, data) if name == "S+T" else trainer.train(cfg, data)
    m = res.metrics
    ious = " ".join(f"{v:.2f}" for v in m["per_class_iou"])
    print(f"{name:10s}  mIoU {m['miou']:.4f}  per-class [{ious}]  sigma_w2 {m['sigma_w2']:.3f}  "
          f"sigma_b2 {m['sigma_b2']:.3f}  {time.perf_counter() - t0:.0f}s")
