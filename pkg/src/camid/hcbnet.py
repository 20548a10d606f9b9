"""Hierarchical classifier-block network.

A shared four-block feature extractor (conv -> batchnorm -> relu -> maxpool
per block) feeds one small CBR+FC branch per brand; each multi-model brand
additionally feeds its branch feature map into one CBR+FC unit per model.
Brand logits are softmaxed jointly across branches, model logits within
their brand. A flat baseline head (flatten + three FC layers over all
models) shares the same trunk layout.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .errors import ConfigError, DataError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    pool_kernel: int = 2
    pool_stride: int = 2

    def to_dict(self):
        return {
            "out_channels": self.out_channels, "kernel": self.kernel,
            "stride": self.stride, "padding": self.padding,
            "pool_kernel": self.pool_kernel, "pool_stride": self.pool_stride,
        }


@dataclass(frozen=True)
class BranchSpec:
    out_channels: int
    kernel: int

    def to_dict(self):
        return {"out_channels": self.out_channels, "kernel": self.kernel}


@dataclass
class NetworkSpec:
    input: tuple                     # (3, H, W)
    feature_blocks: list             # exactly 4 BlockSpec
    branch_block: BranchSpec
    hierarchy: list                  # ordered (brand, [model, ...]) pairs
    head: str = "hierarchical"       # "hierarchical" | "flat"
    flat_fc_dims: list = field(default_factory=list)

    def validate(self):
        if len(self.feature_blocks) != 4:
            raise ConfigError(
                f"feature_blocks must have exactly 4 blocks, "
                f"got {len(self.feature_blocks)}")
        if len(self.input) != 3:
            raise ConfigError(f"input must be (C, H, W), got {self.input}")
        if self.head not in ("hierarchical", "flat"):
            raise ConfigError(f"unknown head {self.head!r}")
        if not self.hierarchy:
            raise ConfigError("hierarchy must name at least one brand")
        brands = [b for b, _ in self.hierarchy]
        if len(set(brands)) != len(brands):
            raise ConfigError("duplicate brand in hierarchy")
        for b, models in self.hierarchy:
            if len(set(models)) != len(models):
                raise ConfigError(f"duplicate model under brand {b}")
        if self.branch_block.kernel % 2 != 1:
            raise ConfigError("branch_block kernel must be odd")
        if self.head == "flat":
            if len(self.flat_fc_dims) != 3:
                raise ConfigError("flat head needs flat_fc_dims of length 3")
            if self.flat_fc_dims[-1] != len(self.class_pairs()):
                raise ConfigError(
                    f"flat_fc_dims[-1]={self.flat_fc_dims[-1]} must equal "
                    f"the number of models {len(self.class_pairs())}")

    def brands(self):
        return [b for b, _ in self.hierarchy]

    def models_of(self, brand):
        for b, models in self.hierarchy:
            if b == brand:
                return list(models)
        raise ConfigError(f"brand {brand} not in hierarchy")

    def class_pairs(self):
        """All (brand, model) pairs in hierarchy order; the flat head's
        class list."""
        return [(b, m) for b, models in self.hierarchy for m in models]

    def to_dict(self):
        return {
            "input": list(self.input),
            "feature_blocks": [b.to_dict() for b in self.feature_blocks],
            "branch_block": self.branch_block.to_dict(),
            "hierarchy": [[b, list(m)] for b, m in self.hierarchy],
            "head": self.head,
            "flat_fc_dims": list(self.flat_fc_dims),
        }

    @classmethod
    def from_dict(cls, d):
        spec = cls(
            input=tuple(d["input"]),
            feature_blocks=[BlockSpec(**b) for b in d["feature_blocks"]],
            branch_block=BranchSpec(**d["branch_block"]),
            hierarchy=[(b, list(m)) for b, m in d["hierarchy"]],
            head=d.get("head", "hierarchical"),
            flat_fc_dims=list(d.get("flat_fc_dims", [])),
        )
        spec.validate()
        return spec

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise ConfigError(f"cannot load network spec {path}: {e}") from e

    def spec_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


# Table-style default hierarchy for the full-scale dataset: 13 brands, with
# multiple models for Nikon, Samsung, and Sony.
DRESDEN_HIERARCHY = [
    ("Canon", ["Ixus70"]),
    ("Casio", ["EX-Z150"]),
    ("FujiFilm", ["FinePixJ50"]),
    ("Kodak", ["M1063"]),
    ("Nikon", ["CoolPixS710", "D200", "D70"]),
    ("Olympus", ["mju_1050SW"]),
    ("Panasonic", ["DMC-FZ50"]),
    ("Pentax", ["OptioA40"]),
    ("Praktica", ["DCZ5.9"]),
    ("Ricoh", ["GX100"]),
    ("Rollei", ["RCP-7325XS"]),
    ("Samsung", ["L74wide", "NV15"]),
    ("Sony", ["DSC-H50", "DSC-T77", "DSC-W170"]),
]


def default_spec(hierarchy=None, head="hierarchical"):
    """Full-scale default: channels 32/64/128/128 with kernels 7/5/5/3,
    2x2 pooling, and 32-channel 3x3 branch blocks. The exact full-scale
    configuration is not pinned down anywhere authoritative, so treat this
    as a reasonable default, not ground truth."""
    hierarchy = hierarchy if hierarchy is not None else DRESDEN_HIERARCHY
    n_classes = sum(len(m) for _, m in hierarchy)
    spec = NetworkSpec(
        input=(3, 128, 128),
        feature_blocks=[
            BlockSpec(32, 7, 1, 3), BlockSpec(64, 5, 1, 2),
            BlockSpec(128, 5, 1, 2), BlockSpec(128, 3, 1, 1),
        ],
        branch_block=BranchSpec(32, 3),
        hierarchy=[(b, list(m)) for b, m in hierarchy],
        head=head,
        flat_fc_dims=[256, 128, n_classes] if head == "flat" else [],
    )
    spec.validate()
    return spec


def _trunk_shape(spec):
    """(C, H, W) of the feature map after the four blocks."""
    c, h, w = spec.input
    for blk in spec.feature_blocks:
        h = (h + 2 * blk.padding - blk.kernel) // blk.stride + 1
        w = (w + 2 * blk.padding - blk.kernel) // blk.stride + 1
        h = (h - blk.pool_kernel) // blk.pool_stride + 1
        w = (w - blk.pool_kernel) // blk.pool_stride + 1
        c = blk.out_channels
        if h < 1 or w < 1:
            raise ConfigError("feature blocks shrink the input below 1x1")
    return c, h, w


class Network:
    """Parameterized network: named Parameters plus batchnorm running stats.

    Parameter names are stable and hierarchical ("features.0.conv.w",
    "brand.Sony.fc.b", "model.Sony.DSC-H50.conv.w", "flat.fc1.w"), so
    checkpoints survive branch additions.
    """

    def __init__(self, spec: NetworkSpec, dtype=np.float32):
        spec.validate()
        self.spec = spec
        self.dtype = dtype
        self.params = {}
        self.stats = {}

    # -- construction ----------------------------------------------------------

    def _add_param(self, name, values, decay=True):
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name}")
        self.params[name] = ag.Parameter(
            np.asarray(values, dtype=self.dtype), name=name, decay=decay)

    def _init_cbr(self, prefix, in_ch, out_ch, kernel, rng):
        fan_in = in_ch * kernel * kernel
        w = rng.standard_normal((out_ch, in_ch, kernel, kernel)) \
            * np.sqrt(2.0 / fan_in)
        self._add_param(f"{prefix}.conv.w", w)
        self._add_param(f"{prefix}.conv.b", np.zeros(out_ch), decay=False)
        self._add_param(f"{prefix}.bn.gamma", np.ones(out_ch), decay=False)
        self._add_param(f"{prefix}.bn.beta", np.zeros(out_ch), decay=False)
        self.stats[f"{prefix}.bn.running_mean"] = np.zeros(out_ch, dtype=self.dtype)
        self.stats[f"{prefix}.bn.running_var"] = np.ones(out_ch, dtype=self.dtype)
        self.stats[f"{prefix}.bn.count"] = np.zeros(1, dtype=self.dtype)

    def _init_fc(self, prefix, in_dim, out_dim, rng):
        w = rng.standard_normal((out_dim, in_dim)) * np.sqrt(2.0 / in_dim)
        self._add_param(f"{prefix}.w", w)
        self._add_param(f"{prefix}.b", np.zeros(out_dim), decay=False)

    def set_decay_policy(self, decay_bn_and_bias=True):
        """Whether weight decay also touches batchnorm gamma/beta and biases.
        Conv/linear weight matrices always decay."""
        for name, p in self.params.items():
            if name.endswith((".bn.gamma", ".bn.beta", ".b")):
                p.decay = decay_bn_and_bias

    # -- running the network -----------------------------------------------------

    def _cbr(self, prefix, x, training, padding):
        x = ag.conv2d(x, self.params[f"{prefix}.conv.w"],
                      self.params[f"{prefix}.conv.b"],
                      stride=1, padding=padding)
        x = ag.batchnorm2d(
            x, self.params[f"{prefix}.bn.gamma"],
            self.params[f"{prefix}.bn.beta"],
            self.stats[f"{prefix}.bn.running_mean"],
            self.stats[f"{prefix}.bn.running_var"],
            training=training, momentum_bn=BN_MOMENTUM, eps=BN_EPS,
            count=self.stats[f"{prefix}.bn.count"])
        return ag.relu(x)

    def features(self, x, training=False):
        """Shared trunk: four CBR blocks, each followed by max pooling."""
        if not isinstance(x, ag.Tensor):
            x = ag.Tensor(np.ascontiguousarray(x, dtype=self.dtype))
        if x.values.ndim != 4 or x.values.shape[1:] != tuple(self.spec.input):
            raise DataError(
                f"input shape {x.values.shape} does not match spec "
                f"{tuple(self.spec.input)}")
        for i, blk in enumerate(self.spec.feature_blocks):
            x = ag.conv2d(x, self.params[f"features.{i}.conv.w"],
                          self.params[f"features.{i}.conv.b"],
                          stride=blk.stride, padding=blk.padding)
            x = ag.batchnorm2d(
                x, self.params[f"features.{i}.bn.gamma"],
                self.params[f"features.{i}.bn.beta"],
                self.stats[f"features.{i}.bn.running_mean"],
                self.stats[f"features.{i}.bn.running_var"],
                training=training, momentum_bn=BN_MOMENTUM, eps=BN_EPS,
                count=self.stats[f"features.{i}.bn.count"])
            x = ag.relu(x)
            x = ag.maxpool2d(x, blk.pool_kernel, blk.pool_stride)
        return x

    def parameters(self):
        return list(self.params.values())

    def state_arrays(self):
        arrays = {name: p.values for name, p in self.params.items()}
        arrays.update(self.stats)
        return arrays

    def load_state_arrays(self, arrays):
        for name, p in self.params.items():
            if name not in arrays:
                raise DataError(f"checkpoint missing parameter {name}")
            if tuple(arrays[name].shape) != p.values.shape:
                raise DataError(f"checkpoint shape mismatch on {name}")
            p.values = arrays[name].astype(self.dtype)
        for name in self.stats:
            if name not in arrays:
                raise DataError(f"checkpoint missing stats {name}")
            self.stats[name] = arrays[name].astype(self.dtype)


@dataclass
class HierarchicalOutput:
    brand_order: list
    brand_logits: ag.Tensor            # (N, K)
    brand_probs: ag.Tensor             # (N, K)
    model_logits: dict                 # brand -> (N, n_models), multi-model only
    model_probs: dict
    brand_features: dict               # brand -> branch feature map tensor


@dataclass
class FlatOutput:
    class_pairs: list
    logits: ag.Tensor                  # (N, n_models)
    probs: ag.Tensor


def build_network(spec: NetworkSpec, seed=0, dtype=np.float32) -> Network:
    """Instantiate a network with deterministic He-style initialization:
    fan-in scaled normals for conv/linear weights, zero biases, unit gamma
    and zero beta for batchnorm."""
    spec.validate()
    net = Network(spec, dtype=dtype)
    rng = np.random.default_rng(seed)
    in_ch = spec.input[0]
    for i, blk in enumerate(spec.feature_blocks):
        net._init_cbr(f"features.{i}", in_ch, blk.out_channels, blk.kernel, rng)
        in_ch = blk.out_channels
    c, h, w = _trunk_shape(spec)
    bb = spec.branch_block
    if spec.head == "hierarchical":
        for brand, models in spec.hierarchy:
            net._init_cbr(f"brand.{brand}", c, bb.out_channels, bb.kernel, rng)
            net._init_fc(f"brand.{brand}.fc", bb.out_channels * h * w, 1, rng)
            if len(models) >= 2:
                for model in models:
                    net._init_cbr(f"model.{brand}.{model}", bb.out_channels,
                                  bb.out_channels, bb.kernel, rng)
                    net._init_fc(f"model.{brand}.{model}.fc",
                                 bb.out_channels * h * w, 1, rng)
    else:
        d_in = c * h * w
        for j, d_out in enumerate(spec.flat_fc_dims):
            net._init_fc(f"flat.fc{j}", d_in, d_out, rng)
            d_in = d_out
    return net


def forward_hierarchical(net: Network, x, training=False) -> HierarchicalOutput:
    """Trunk -> per-brand CBR+FC logits (softmaxed jointly), plus per-model
    CBR+FC logits (softmaxed within brand) for every multi-model brand."""
    if net.spec.head != "hierarchical":
        raise ConfigError("network head is not hierarchical")
    feats = net.features(x, training=training)
    pad = net.spec.branch_block.kernel // 2
    brand_order = net.spec.brands()
    brand_logit_cols = []
    model_logits, model_probs, brand_features = {}, {}, {}
    for brand, models in net.spec.hierarchy:
        xb = net._cbr(f"brand.{brand}", feats, training, pad)
        brand_features[brand] = xb
        a = ag.flatten(xb)
        brand_logit_cols.append(ag.linear(
            a, net.params[f"brand.{brand}.fc.w"],
            net.params[f"brand.{brand}.fc.b"]))
        if len(models) >= 2:
            cols = []
            for model in models:
                xm = net._cbr(f"model.{brand}.{model}", xb, training, pad)
                am = ag.flatten(xm)
                cols.append(ag.linear(
                    am, net.params[f"model.{brand}.{model}.fc.w"],
                    net.params[f"model.{brand}.{model}.fc.b"]))
            logits = ag.concat(cols, axis=1)
            model_logits[brand] = logits
            model_probs[brand] = ag.softmax(logits)
    brand_logits = ag.concat(brand_logit_cols, axis=1)
    return HierarchicalOutput(
        brand_order=brand_order,
        brand_logits=brand_logits,
        brand_probs=ag.softmax(brand_logits),
        model_logits=model_logits,
        model_probs=model_probs,
        brand_features=brand_features,
    )


def forward_flat(net: Network, x, training=False) -> FlatOutput:
    """Trunk -> flatten -> three FC layers (ReLU between) -> joint logits
    over every model."""
    if net.spec.head != "flat":
        raise ConfigError("network head is not flat")
    feats = net.features(x, training=training)
    a = ag.flatten(feats)
    n_fc = len(net.spec.flat_fc_dims)
    for j in range(n_fc):
        a = ag.linear(a, net.params[f"flat.fc{j}.w"],
                      net.params[f"flat.fc{j}.b"])
        if j < n_fc - 1:
            a = ag.relu(a)
    return FlatOutput(class_pairs=net.spec.class_pairs(),
                      logits=a, probs=ag.softmax(a))


def one_hot(labels, n_classes, dtype=np.float64):
    labels = np.asarray(labels, dtype=np.intp)
    if labels.min(initial=0) < 0 or (labels.size and labels.max() >= n_classes):
        raise DataError(
            f"label out of range [0, {n_classes}) : {labels}")
    return np.eye(n_classes, dtype=dtype)[labels]


_LOSS_FORMS = {"bce": ag.bce_over_softmax, "ce": ag.categorical_ce}


def loss_total(out: HierarchicalOutput, brand_labels, model_labels,
               alpha=1.0, form="bce"):
    """Combined objective: brand loss plus alpha times the model loss.

    The model loss for each sample is evaluated only on the ground-truth
    brand's model branch; samples of single-model brands contribute zero.
    Both terms average over the whole batch. Returns (total, brand_loss,
    model_loss) tensors; at alpha == 0 the total IS the brand loss node.
    """
    if form not in _LOSS_FORMS:
        raise ConfigError(f"unknown loss form {form!r}")
    loss_fn = _LOSS_FORMS[form]
    brand_labels = np.asarray(brand_labels, dtype=np.intp)
    model_labels = np.asarray(model_labels, dtype=np.intp)
    if brand_labels.shape != model_labels.shape or brand_labels.ndim != 1:
        raise DataError("brand/model label arrays must be 1-D and equal length")
    n = brand_labels.shape[0]
    k = len(out.brand_order)
    if n != out.brand_probs.shape[0]:
        raise DataError("label count does not match batch size")
    dtype = out.brand_probs.values.dtype

    l_bc = loss_fn(out.brand_probs, one_hot(brand_labels, k, dtype),
                   reduction="mean")

    l_mc = None
    for bi, brand in enumerate(out.brand_order):
        if brand not in out.model_probs:
            continue  # single-model brand: zero contribution
        rows = np.flatnonzero(brand_labels == bi)
        if rows.size == 0:
            continue
        n_models = out.model_probs[brand].shape[1]
        sel = ag.gather_rows(out.model_probs[brand], rows)
        part = loss_fn(sel, one_hot(model_labels[rows], n_models, dtype),
                       reduction="sum")
        l_mc = part if l_mc is None else ag.add(l_mc, part)
    if l_mc is None:
        l_mc = ag.Tensor(np.zeros((), dtype=dtype))
    else:
        l_mc = ag.scale(l_mc, 1.0 / n)

    if alpha == 0.0:
        return l_bc, l_bc, l_mc
    total = ag.add(l_bc, ag.scale(l_mc, alpha))
    return total, l_bc, l_mc


def loss_flat(out: FlatOutput, class_labels, form="bce"):
    """Flat objective: the same cross-entropy form over all models jointly."""
    if form not in _LOSS_FORMS:
        raise ConfigError(f"unknown loss form {form!r}")
    n_classes = len(out.class_pairs)
    labels = one_hot(class_labels, n_classes, out.probs.values.dtype)
    return _LOSS_FORMS[form](out.probs, labels, reduction="mean")


def count_params(net: Network) -> int:
    """Trainable values only: conv and linear weights/biases plus batchnorm
    gamma/beta. Running statistics and momentum buffers do not count."""
    return int(sum(p.values.size for p in net.params.values()))


def add_branch(net: Network, brand, model=None, seed=0) -> Network:
    """Extend a network with a new brand branch or a new model under an
    existing brand. Existing parameters stay bitwise identical; only the
    new units draw from the fresh seed. When a brand reaches two models,
    units are created for every model of that brand that lacks one.
    """
    if net.spec.head != "hierarchical":
        raise ConfigError("branches can only be added to a hierarchical head")
    hierarchy = [(b, list(m)) for b, m in net.spec.hierarchy]
    brands = {b: m for b, m in hierarchy}
    rng = np.random.default_rng(seed)
    c, h, w = _trunk_shape(net.spec)
    bb = net.spec.branch_block

    if model is None:
        if brand in brands:
            raise ConfigError(f"brand {brand} already present")
        hierarchy.append((brand, []))
        net._init_cbr(f"brand.{brand}", c, bb.out_channels, bb.kernel, rng)
        net._init_fc(f"brand.{brand}.fc", bb.out_channels * h * w, 1, rng)
    else:
        if brand not in brands:
            raise ConfigError(f"brand {brand} not present; add it first")
        if model in brands[brand]:
            raise ConfigError(f"model {brand}/{model} already present")
        models = brands[brand] + [model]
        hierarchy = [(b, models if b == brand else m) for b, m in hierarchy]
        if len(models) >= 2:
            for m in models:
                if f"model.{brand}.{m}.conv.w" not in net.params:
                    net._init_cbr(f"model.{brand}.{m}", bb.out_channels,
                                  bb.out_channels, bb.kernel, rng)
                    net._init_fc(f"model.{brand}.{m}.fc",
                                 bb.out_channels * h * w, 1, rng)
    net.spec = NetworkSpec(
        input=net.spec.input, feature_blocks=net.spec.feature_blocks,
        branch_block=net.spec.branch_block, hierarchy=hierarchy,
        head=net.spec.head, flat_fc_dims=net.spec.flat_fc_dims)
    return net


# -- checkpoint glue ---------------------------------------------------------------


def save_network(path, net: Network, epoch=0, lr=0.0, val_accuracy=0.0):
    metadata = {
        "epoch": int(epoch),
        "lr": float(lr),
        "val_accuracy": float(val_accuracy),
        "config_hash": net.spec.spec_hash(),
        "spec": net.spec.to_dict(),
    }
    ag.save_checkpoint(path, net.state_arrays(), metadata)


def load_network(path, expected_spec: NetworkSpec | None = None):
    """Rebuild a network from a checkpoint; verifies the embedded spec hash
    when an expected spec is given."""
    arrays, metadata = ag.load_checkpoint(path)
    spec = NetworkSpec.from_dict(metadata["spec"])
    if metadata.get("config_hash") != spec.spec_hash():
        raise DataError(f"checkpoint {path} has a corrupted spec hash")
    if expected_spec is not None \
            and expected_spec.spec_hash() != spec.spec_hash():
        raise DataError(
            f"checkpoint {path} was trained with a different network spec")
    net = build_network(spec, seed=0)
    net.load_state_arrays(arrays)
    return net, metadata
