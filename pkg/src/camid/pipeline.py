"""Per-fold training, checkpoint selection by validation accuracy, and
image-level evaluation via patch majority voting."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import hcbnet
from .balance import plan_counts, realize_plan
from .errors import ConfigError, DataError, DivergenceError
from .manifest import FoldPlan, Manifest, load_image, split_fold
from .patchex import select_patches


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 512
    lr0: float = 0.1
    momentum: float = 0.9
    lr_gamma: float = 0.9
    weight_decay: float = 0.005
    alpha: float = 1.0
    k: int = 260000
    patches_per_image_eval: int = 200
    seed: int = 0
    loss_form: str = "bce"
    decay_bn_and_bias: bool = True

    def validate(self):
        positive = ("epochs", "batch_size", "lr0", "lr_gamma", "k",
                    "patches_per_image_eval")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("momentum", "weight_decay", "alpha"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.loss_form not in ("bce", "ce"):
            raise ConfigError(f"unknown loss form {self.loss_form!r}")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


def hierarchy_of(manifest: Manifest):
    """Brand/model hierarchy in sorted order, as NetworkSpec expects it."""
    return [(b, manifest.models(b)) for b in manifest.brands()]


def label_maps(hierarchy):
    """brand index, per-brand model index, and flat class index lookups."""
    brand_index, model_index, class_index = {}, {}, {}
    flat = 0
    for bi, (brand, models) in enumerate(hierarchy):
        brand_index[brand] = bi
        for mi, model in enumerate(models):
            model_index[(brand, model)] = mi
            class_index[(brand, model)] = flat
            flat += 1
    return brand_index, model_index, class_index


def _check_spec_matches(spec: hcbnet.NetworkSpec, manifest: Manifest):
    derived = hierarchy_of(manifest)
    if [(b, list(m)) for b, m in spec.hierarchy] != derived:
        raise ConfigError(
            "network spec hierarchy does not match the manifest; "
            f"expected {derived}")


def _load_split_patches(records, quotas, cache, maps):
    """Stack cached patches for the given records into one batch array.

    `quotas` maps image path -> how many rank-ordered patches to take.
    Returns (X, brand_labels, model_labels, class_labels).
    """
    brand_index, model_index, class_index = maps
    arrays, b_lab, m_lab, c_lab = [], [], [], []
    for r in sorted(records, key=lambda r: r.key):
        quota = quotas.get(r.path, 0)
        if quota <= 0:
            continue
        take = min(quota, cache.n_patches(r.path))
        for patch in cache.load(r.path, range(take)):
            arrays.append(patch.values)
        b_lab.extend([brand_index[r.brand]] * take)
        m_lab.extend([model_index[(r.brand, r.model)]] * take)
        c_lab.extend([class_index[(r.brand, r.model)]] * take)
    if not arrays:
        raise DataError("no patches available for this split")
    return (np.stack(arrays), np.asarray(b_lab), np.asarray(m_lab),
            np.asarray(c_lab))


def _forward_loss(net, xb, bl, ml, cl, cfg, training):
    if net.spec.head == "hierarchical":
        out = hcbnet.forward_hierarchical(net, xb, training=training)
        total, l_bc, l_mc = hcbnet.loss_total(
            out, bl, ml, alpha=cfg.alpha, form=cfg.loss_form)
        return out, total
    out = hcbnet.forward_flat(net, xb, training=training)
    return out, hcbnet.loss_flat(out, cl, form=cfg.loss_form)


def _patch_predictions(net, x, batch=64):
    """Per-patch argmax decisions and probability sums, chunked.

    Returns (brand_idx[n], brand_prob_sums[K], model_idx per brand,
    model_prob_sums per brand) for hierarchical heads, or
    (class_idx[n], class_prob_sums[C], None, None) for flat heads.
    """
    if net.spec.head == "flat":
        idxs, sums = [], 0.0
        for lo in range(0, x.shape[0], batch):
            out = hcbnet.forward_flat(net, x[lo:lo + batch], training=False)
            p = out.probs.values
            idxs.append(p.argmax(axis=1))
            sums = sums + p.sum(axis=0)
        return np.concatenate(idxs), sums, None, None
    brand_idxs, brand_sums = [], 0.0
    model_idxs = {b: [] for b in net.spec.brands()}
    model_sums = {b: 0.0 for b in net.spec.brands()}
    for lo in range(0, x.shape[0], batch):
        out = hcbnet.forward_hierarchical(net, x[lo:lo + batch], training=False)
        p = out.brand_probs.values
        brand_idxs.append(p.argmax(axis=1))
        brand_sums = brand_sums + p.sum(axis=0)
        for b, probs in out.model_probs.items():
            model_idxs[b].append(probs.values.argmax(axis=1))
            model_sums[b] = model_sums[b] + probs.values.sum(axis=0)
    model_idxs = {b: np.concatenate(v) for b, v in model_idxs.items() if v}
    return np.concatenate(brand_idxs), brand_sums, model_idxs, model_sums


def _pair_accuracy(net, x, bl, ml, cl, batch=256):
    """Patch-level accuracy used for checkpoint selection; hierarchical
    heads must get both the brand and (for multi-model brands) the model
    right, flat heads the joint class."""
    idx, _, model_idxs, _ = _patch_predictions(net, x, batch=batch)
    if net.spec.head == "flat":
        return float((idx == cl).mean())
    correct = idx == bl
    for bi, (brand, models) in enumerate(net.spec.hierarchy):
        if len(models) < 2:
            continue
        mask = (bl == bi) & correct
        correct = correct & (~mask | (model_idxs[brand] == ml))
    return float(correct.mean())


@dataclass
class TrainResult:
    checkpoint_path: str
    best_epoch: int
    best_val_accuracy: float
    history: list


def train_fold(manifest: Manifest, plan: FoldPlan, fold: int,
               spec: hcbnet.NetworkSpec, cfg: TrainConfig, cache,
               out_path) -> TrainResult:
    """Train one fold and write the checkpoint of the epoch with the best
    validation accuracy (ties going to the earliest epoch).

    Quotas come from the fold's training split only; validation images
    reuse their device's per-image quota. Deterministic for a fixed seed
    in single-threaded mode.
    """
    cfg.validate()
    _check_spec_matches(spec, manifest)
    maps = label_maps(hierarchy_of(manifest))
    train_recs, val_recs, _ = split_fold(manifest, plan, fold)
    if not train_recs:
        raise DataError(f"fold {fold} has an empty training split")
    sampling = plan_counts(train_recs, cfg.k)
    realized = realize_plan(sampling, cache)
    train_quotas = {p: len(ix) for p, ix in realized.entries.items()}
    val_quotas = {r.path: sampling.k_image[(r.brand, r.model, r.device_index)]
                  for r in val_recs}

    x_tr, bl_tr, ml_tr, cl_tr = _load_split_patches(
        train_recs, train_quotas, cache, maps)
    x_va, bl_va, ml_va, cl_va = _load_split_patches(
        val_recs, val_quotas, cache, maps)

    net = hcbnet.build_network(spec, seed=[cfg.seed, fold])
    net.set_decay_policy(cfg.decay_bn_and_bias)
    params = net.parameters()

    best = None  # (accuracy, epoch, arrays)
    history = []
    n = x_tr.shape[0]
    step = 0
    for epoch in range(cfg.epochs):
        lr = ag.lr_schedule(epoch, cfg.lr0, cfg.lr_gamma)
        order = np.random.default_rng(
            [cfg.seed, fold, epoch]).permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            if sel.size < 2:
                continue  # batchnorm train mode needs >= 2 samples
            try:
                _, loss = _forward_loss(net, x_tr[sel], bl_tr[sel],
                                        ml_tr[sel], cl_tr[sel], cfg,
                                        training=True)
                ag.zero_grad(params)
                ag.backward(loss)
            except DivergenceError as e:
                raise DivergenceError(
                    f"training diverged at step {step}: {e}", step=step
                ) from e
            ag.sgd_step(params, lr, momentum=cfg.momentum,
                        weight_decay=cfg.weight_decay)
            losses.append(float(loss.values))
            step += 1
        val_acc = _pair_accuracy(net, x_va, bl_va, ml_va, cl_va)
        history.append({"epoch": epoch, "lr": lr,
                        "train_loss": float(np.mean(losses)),
                        "val_accuracy": val_acc})
        if best is None or val_acc > best[0]:
            best = (val_acc, epoch, lr,
                    {k: v.copy() for k, v in net.state_arrays().items()})

    acc, epoch, lr, arrays = best
    net.load_state_arrays(arrays)
    hcbnet.save_network(out_path, net, epoch=epoch, lr=lr, val_accuracy=acc)
    return TrainResult(checkpoint_path=str(out_path), best_epoch=epoch,
                       best_val_accuracy=acc, history=history)


# -- inference -----------------------------------------------------------------


def majority_vote(vote_indices, prob_sums):
    """Winner by vote count; ties go to the higher summed probability,
    then the lower index. Returns (winner, per-index tally array)."""
    vote_indices = np.asarray(vote_indices, dtype=np.intp)
    prob_sums = np.asarray(prob_sums, dtype=np.float64)
    tally = np.bincount(vote_indices, minlength=prob_sums.shape[0])
    top = tally.max()
    candidates = np.flatnonzero(tally == top)
    winner = min(candidates, key=lambda c: (-prob_sums[c], c))
    return int(winner), tally


@dataclass
class ImagePrediction:
    brand: str
    model: str | None
    brand_tally: dict
    model_tally: dict


def predict_image(net, image, p=200, seed=0, batch=64) -> ImagePrediction:
    """Image-level decision by majority vote over up to `p` patches.

    The predicted brand wins the per-patch brand argmax vote; if that brand
    has multiple models, the model wins the vote among the same patches'
    model-branch argmaxes. `net` may be a Network or a checkpoint path.
    """
    if isinstance(net, (str, Path)):
        net, _ = hcbnet.load_network(net)
    img = load_image(image) if isinstance(image, (str, Path)) else image
    selection = select_patches(img, p, seed=seed)
    x = np.stack([patch.values for patch in selection.patches])

    if net.spec.head == "flat":
        idx, sums, _, _ = _patch_predictions(net, x, batch=batch)
        winner, tally = majority_vote(idx, sums)
        brand, model = net.spec.class_pairs()[winner]
        named = {f"{b}/{m}": int(t)
                 for (b, m), t in zip(net.spec.class_pairs(), tally)}
        return ImagePrediction(brand=brand, model=model, brand_tally=named,
                               model_tally={})

    brand_idx, brand_sums, model_idxs, model_sums = _patch_predictions(
        net, x, batch=batch)
    winner, tally = majority_vote(brand_idx, brand_sums)
    brand = net.spec.brands()[winner]
    brand_tally = {b: int(t) for b, t in zip(net.spec.brands(), tally)}
    models = net.spec.models_of(brand)
    if len(models) >= 2:
        m_winner, m_tally = majority_vote(model_idxs[brand],
                                          model_sums[brand])
        model = models[m_winner]
        model_tally = {m: int(t) for m, t in zip(models, m_tally)}
    else:
        model = models[0] if models else None
        model_tally = {model: len(selection.patches)} if model else {}
    return ImagePrediction(brand=brand, model=model,
                           brand_tally=brand_tally, model_tally=model_tally)


@dataclass
class PredictionReport:
    rows: list
    fold_accuracies: list
    mean_accuracy: float
    std_accuracy: float

    @classmethod
    def aggregate(cls, rows, fold_accuracies):
        accs = [float(a) for a in fold_accuracies]
        mean = float(np.mean(accs))
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        return cls(rows=rows, fold_accuracies=accs, mean_accuracy=mean,
                   std_accuracy=std)

    def to_dict(self):
        return {
            "fold_accuracies": self.fold_accuracies,
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "rows": self.rows,
        }

    def save_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1,
                                         sort_keys=True))

    def save_csv(self, path):
        cols = ["fold", "path", "true_brand", "true_model", "pred_brand",
                "pred_model", "correct", "brand_tally", "model_tally"]
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=cols)
            writer.writeheader()
            for row in self.rows:
                out = dict(row)
                out["brand_tally"] = json.dumps(row["brand_tally"],
                                                sort_keys=True)
                out["model_tally"] = json.dumps(row["model_tally"],
                                                sort_keys=True)
                writer.writerow(out)


def evaluate_folds(fold_checkpoints, manifest: Manifest, plan: FoldPlan,
                   cfg: TrainConfig) -> PredictionReport:
    """Image-level accuracy on each fold's held-out devices, aggregated as
    mean +/- sample standard deviation across folds."""
    if len(fold_checkpoints) != plan.n_folds:
        raise DataError(
            f"need one checkpoint per fold: got {len(fold_checkpoints)} "
            f"for {plan.n_folds} folds")
    rows, accs = [], []
    for fold, ckpt in enumerate(fold_checkpoints):
        if ckpt is None:
            raise DataError(f"missing checkpoint for fold {fold}")
        net, _ = hcbnet.load_network(ckpt)
        _check_spec_matches(net.spec, manifest)
        _, _, test_recs = split_fold(manifest, plan, fold)
        correct = 0
        for r in test_recs:
            pred = predict_image(net, r.path, p=cfg.patches_per_image_eval,
                                 seed=cfg.seed)
            ok = pred.brand == r.brand and pred.model == r.model
            correct += int(ok)
            rows.append({
                "fold": fold, "path": r.path,
                "true_brand": r.brand, "true_model": r.model,
                "pred_brand": pred.brand, "pred_model": pred.model,
                "correct": bool(ok),
                "brand_tally": pred.brand_tally,
                "model_tally": pred.model_tally,
            })
        accs.append(correct / len(test_recs) if test_recs else 0.0)
    return PredictionReport.aggregate(rows, accs)


def format_fold_table(reports):
    """Render {label: PredictionReport} in per-fold columns plus the
    mean +/- std average column."""
    n_folds = max(len(r.fold_accuracies) for r in reports.values())
    headers = ["Classification"] + [f"fold-{i + 1}" for i in range(n_folds)] \
        + ["average"]
    lines = ["  ".join(f"{h:>14}" for h in headers)]
    for label, report in reports.items():
        cells = [f"{label:>14}"]
        cells += [f"{a:>14.4f}" for a in report.fold_accuracies]
        cells += ["" for _ in range(n_folds - len(report.fold_accuracies))]
        avg = f"{report.mean_accuracy:.4f} +/- {report.std_accuracy:.4f}"
        cells.append(f"{avg:>14}")
        lines.append("  ".join(cells))
    return "\n".join(lines)
