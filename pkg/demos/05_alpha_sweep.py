"""Sweep the model-loss weight alpha over {0.25, 0.5, 1, 2}.

The combined objective is brand_loss + alpha * model_loss; the reference
protocol picks alpha by cross-validation but never reports the value, so
this script measures the sweep on the synthetic set.
"""

import tempfile
from pathlib import Path

from camid.hcbnet import BlockSpec, BranchSpec, NetworkSpec
from camid.manifest import make_folds
from camid.patchex import PatchCache, extract_to_cache
from camid.pipeline import (TrainConfig, evaluate_folds, hierarchy_of,
                            train_fold)
from camid.synth import SynthSpec, generate

ALPHAS = (0.25, 0.5, 1.0, 2.0)

work = Path(tempfile.mkdtemp(prefix="camid_alpha_"))
spec = SynthSpec(brands=[("Aero", 1), ("Bolt", 2), ("Crux", 2)],
                 devices_per_model=2, images_per_device=12,
                 image_size=192, seed=5)
manifest = generate(spec, work / "images")
extract_to_cache(manifest.records, work / "patches.cache", p=6)
cache = PatchCache(work / "patches.cache")
plan = make_folds(manifest, n_folds=1, val_fraction=0.15, seed=0)

nspec = NetworkSpec(
    input=(3, 128, 128),
    feature_blocks=[BlockSpec(4, 3, 1, 1), BlockSpec(8, 3, 1, 1),
                    BlockSpec(16, 3, 1, 1), BlockSpec(16, 3, 1, 1)],
    branch_block=BranchSpec(8, 3),
    hierarchy=hierarchy_of(manifest))

print(f"{'alpha':>6}  {'best val':>9}  {'held-out acc':>12}")
for alpha in ALPHAS:
    cfg = TrainConfig(epochs=6, batch_size=32, lr0=0.05, k=900, alpha=alpha,
                      patches_per_image_eval=50, seed=0)
    ckpt = work / f"alpha_{alpha}.ckpt"
    res = train_fold(manifest, plan, 0, nspec, cfg, cache, ckpt)
    report = evaluate_folds([ckpt], manifest, plan, cfg)
    print(f"{alpha:>6}  {res.best_val_accuracy:>9.3f}  "
          f"{report.fold_accuracies[0]:>12.3f}")
