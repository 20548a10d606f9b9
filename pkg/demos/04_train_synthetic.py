"""A complete desk-scale run: synthesize, balance, train both heads,
and score held-out devices with majority voting.

Uses a reduced synthetic dataset so the whole script finishes in about
a minute; the acceptance suite runs the full-size version.
"""

import tempfile
from pathlib import Path

from camid.hcbnet import (BlockSpec, BranchSpec, NetworkSpec, count_params,
                          build_network)
from camid.manifest import make_folds
from camid.patchex import PatchCache, extract_to_cache
from camid.pipeline import (TrainConfig, evaluate_folds, format_fold_table,
                            hierarchy_of, predict_image, train_fold)
from camid.synth import SynthSpec, generate

work = Path(tempfile.mkdtemp(prefix="camid_demo_"))
print(f"working under {work}")

spec = SynthSpec(brands=[("Aero", 1), ("Bolt", 2), ("Crux", 2)],
                 devices_per_model=2, images_per_device=12,
                 image_size=192, seed=5)
manifest = generate(spec, work / "images")
print(f"dataset: {len(manifest)} images, "
      f"{len(manifest.models())} models over {manifest.n_brands} brands")

extract_to_cache(manifest.records, work / "patches.cache", p=6)
cache = PatchCache(work / "patches.cache")
plan = make_folds(manifest, n_folds=2, val_fraction=0.15, seed=0)

blocks = [BlockSpec(4, 3, 1, 1), BlockSpec(8, 3, 1, 1),
          BlockSpec(16, 3, 1, 1), BlockSpec(16, 3, 1, 1)]
hier_spec = NetworkSpec(input=(3, 128, 128), feature_blocks=blocks,
                        branch_block=BranchSpec(8, 3),
                        hierarchy=hierarchy_of(manifest))
flat_spec = NetworkSpec(input=(3, 128, 128), feature_blocks=blocks,
                        branch_block=BranchSpec(8, 3),
                        hierarchy=hierarchy_of(manifest), head="flat",
                        flat_fc_dims=[48, 24, len(manifest.models())])
print(f"parameters: hierarchical {count_params(build_network(hier_spec)):,}"
      f" vs flat {count_params(build_network(flat_spec)):,}")

cfg = TrainConfig(epochs=6, batch_size=32, lr0=0.05, k=900,
                  patches_per_image_eval=50, seed=0)
reports = {}
for label, nspec in (("hierarchical", hier_spec), ("flat", flat_spec)):
    ckpts = []
    for fold in range(plan.n_folds):
        res = train_fold(manifest, plan, fold, nspec, cfg, cache,
                         work / f"{label}_fold{fold}.ckpt")
        print(f"{label} fold {fold}: best epoch {res.best_epoch}, "
              f"val accuracy {res.best_val_accuracy:.3f}")
        ckpts.append(res.checkpoint_path)
    reports[label] = evaluate_folds(ckpts, manifest, plan, cfg)

print("\nheld-out-device image accuracy:")
print(format_fold_table(reports))

# single-image prediction with vote tallies
record = manifest.records[-1]
pred = predict_image(work / "hierarchical_fold0.ckpt", record.path, p=50)
print(f"\n{Path(record.path).name}: true {record.brand}/{record.model} "
      f"-> predicted {pred.brand}/{pred.model}")
print(f"  brand votes {pred.brand_tally}")
print(f"  model votes {pred.model_tally}")
