"""The full MIL pipeline: feature extractor, aggregation, classifier, loss and prediction."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import gp
from . import tensor as T
from .attention import (
    AttentionOutput,
    DetAttentionParams,
    GpInputLayer,
    agp_attention,
    det_attention,
    glorot,
    mean_aggregation,
)
from .rng import stream
from .tensor import Parameter, Tensor

CHECKPOINT_FORMAT = 1
BACKBONES = ("mnist_small", "cifar_cnn")
MECHANISMS = ("agp", "a_det", "a_det_gated", "mean_agg")
INPUT_SHAPES = {"mnist_small": (1, 28, 28), "cifar_cnn": (3, 32, 32)}


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    backbone: str = "mnist_small"
    feature_dim: int = 64
    attention: str = "agp"
    num_classes: int = 2
    inducing_count: int = 64
    gp_input_dim: int = 32
    mc_samples: int = 20
    jitter: float = gp.DEFAULT_JITTER
    seed: int = 1
    gp_activation: str = "sigmoid"
    attention_hidden: int = 32
    kl_weight: float = 1.0
    class_weights: Optional[list] = None

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> list:
        errors = []
        if self.backbone not in BACKBONES:
            errors.append(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.attention not in MECHANISMS:
            errors.append(f"attention must be one of {MECHANISMS}, got {self.attention!r}")
        if self.num_classes < 2:
            errors.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.inducing_count < 1:
            errors.append(f"inducing_count must be >= 1, got {self.inducing_count}")
        if self.mc_samples < 1:
            errors.append(f"mc_samples must be >= 1, got {self.mc_samples}")
        if self.feature_dim < 1 or self.gp_input_dim < 1:
            errors.append("feature_dim and gp_input_dim must be positive")
        if self.class_weights is not None and len(self.class_weights) != self.num_classes:
            errors.append("class_weights needs one entry per class")
        return errors

    @property
    def probabilistic(self) -> bool:
        return self.attention == "agp"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BagPrediction:
    class_prob_mean: np.ndarray
    class_prob_std: np.ndarray
    total_uncertainty: float
    predicted_class: int
    attention: AttentionOutput
    class_prob_samples: np.ndarray = field(repr=False, default=None)


PredictionSummary = BagPrediction


# ---------------------------------------------------------------- backbones
def _conv(name, rng, f, c):
    return [
        Parameter(glorot(rng, (f, c, 3, 3), c * 9, f * 9), name=f"{name}.weight"),
        Parameter(np.zeros(f), name=f"{name}.bias"),
    ]


def _dense(name, rng, out_dim, in_dim):
    return [
        Parameter(glorot(rng, (out_dim, in_dim), in_dim, out_dim), name=f"{name}.weight"),
        Parameter(np.zeros(out_dim), name=f"{name}.bias"),
    ]


CIFAR_CONVS = [(32, 3), (32, 32), "pool", (64, 32), (64, 64), "pool", (128, 64), (128, 128), "pool"]


class MilModel:
    """Parameters and forward passes for one configuration.

    ``params`` is an insertion-ordered name -> Parameter mapping; that order is
    the checkpoint layout.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = stream(config.seed, "init")
        self.params: dict = {}
        P = config.feature_dim
        if config.backbone == "mnist_small":
            self._add(_conv("fe.conv1", rng, 4, 1))
            self._add(_dense("fe.fc1", rng, P, 4 * 26 * 26))
        else:
            c, i = 3, 0
            for layer in CIFAR_CONVS:
                if layer == "pool":
                    continue
                i += 1
                self._add(_conv(f"fe.conv{i}", rng, layer[0], c))
                c = layer[0]
            self._add(_dense("fe.fc1", rng, 128, 128))
            self._add(_dense("fe.fc2", rng, P, 128))

        self.gp_fc = None
        self.svgp = None
        self.det = None
        if config.attention == "agp":
            self.gp_fc = GpInputLayer.create(P, config.gp_input_dim, rng, config.gp_activation)
            self.svgp = gp.SvgpParams.create(config.inducing_count, config.gp_input_dim, rng, config.jitter)
            self._add(self.gp_fc.parameters() + self.svgp.parameters())
        elif config.attention in ("a_det", "a_det_gated"):
            self.det = DetAttentionParams.create(P, config.attention_hidden, rng, gated=config.attention == "a_det_gated")
            self._add(self.det.parameters())
        self._add(_dense("cls", rng, config.num_classes, P))

    def _add(self, params):
        for p in params:
            if p.name in self.params:
                raise KeyError(f"duplicate parameter {p.name}")
            self.params[p.name] = p

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # ----------------------------------------------------------- forward parts
    def features(self, pixels) -> Tensor:
        """Per-instance feature vectors (N x P) from (N, C, H, W) pixels."""
        pixels = np.asarray(pixels, dtype=np.float64)
        expected = INPUT_SHAPES[self.config.backbone]
        if pixels.ndim != 4 or pixels.shape[1:] != expected:
            raise T.ShapeError(f"{self.config.backbone} expects instances of shape {expected}, got {pixels.shape[1:]}")
        p = self.params
        x = Tensor(pixels)
        n = pixels.shape[0]
        if self.config.backbone == "mnist_small":
            x = T.relu(T.conv2d(x, p["fe.conv1.weight"], p["fe.conv1.bias"]))
            x = T.reshape(x, (n, -1))
            return T.relu(T.linear(x, p["fe.fc1.weight"], p["fe.fc1.bias"]))
        i = 0
        for layer in CIFAR_CONVS:
            if layer == "pool":
                x = T.maxpool2d(x)
                continue
            i += 1
            x = T.relu(T.conv2d(x, p[f"fe.conv{i}.weight"], p[f"fe.conv{i}.bias"]))
        x = T.reshape(x, (n, -1))
        x = T.relu(T.linear(x, p["fe.fc1.weight"], p["fe.fc1.bias"]))
        return T.relu(T.linear(x, p["fe.fc2.weight"], p["fe.fc2.bias"]))

    def aggregate(self, h, s: int, rng, lz=None) -> AttentionOutput:
        kind = self.config.attention
        if kind == "agp":
            return agp_attention(h, self.gp_fc, self.svgp, s, rng, lz=lz)
        if kind in ("a_det", "a_det_gated"):
            return det_attention(h, self.det)
        return mean_aggregation(h)

    def classify(self, embeddings) -> Tensor:
        return classify_bag(embeddings, self.params["cls.weight"], self.params["cls.bias"])

    def forward(self, pixels, s: int, rng):
        """Attention output (with S embedding samples) and the KL term, or None if deterministic."""
        h = self.features(pixels)
        lz = gp.prior_factor(self.svgp) if self.config.probabilistic else None
        att = self.aggregate(h, s, rng, lz=lz)
        kl = gp.kl_u(self.svgp, lz=lz) if self.config.probabilistic else None
        return att, kl


def classify_bag(embedding_samples, weight, bias) -> Tensor:
    """Row-wise softmax class probabilities (S x K)."""
    return T.softmax(T.linear(T.as_tensor(embedding_samples), weight, bias))


def feature_extract(bag, model: MilModel) -> Tensor:
    return model.features(bag.pixels)


# ------------------------------------------------------------------ loss
@dataclass
class LossParts:
    total: Tensor
    nll: float
    kl: float
    predicted_class: int = -1


def elbo_loss(bag, model: MilModel, rng: Optional[np.random.Generator] = None, s: Optional[int] = None) -> LossParts:
    """Per-bag negative ELBO: MC cross-entropy + kl_weight * KL(q(U)||p(U)).

    Deterministic mechanisms have no KL term and a single forward sample.
    """
    cfg = model.config
    label = int(bag.label)
    if not 0 <= label < cfg.num_classes:
        raise ValueError(f"bag label {label} outside [0, {cfg.num_classes})")
    s = cfg.mc_samples if s is None else s
    if rng is None:
        rng = stream(cfg.seed, "mc")
    att, kl = model.forward(bag.pixels, s, rng)
    logits = T.linear(att.bag_embedding, model.params["cls.weight"], model.params["cls.bias"])
    log_probs = T.log_softmax(logits)
    guess = int(np.argmax(np.exp(log_probs.data).mean(axis=0)))
    nll = T.neg(T.mean(T.take(log_probs, label, axis=1)))
    if cfg.class_weights is not None:
        nll = T.scale(nll, cfg.class_weights[label])
    if kl is None:
        return LossParts(nll, nll.item(), 0.0, guess)
    total = T.add(nll, T.scale(kl, cfg.kl_weight))
    return LossParts(total, nll.item(), kl.item(), guess)


def predict(bag, model: MilModel, s: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> BagPrediction:
    """Monte Carlo predictive summary: per-class mean/std and total uncertainty."""
    cfg = model.config
    s = cfg.mc_samples if s is None else s
    if rng is None:
        rng = stream(cfg.seed, "eval")
    with T.no_grad():
        att, _ = model.forward(bag.pixels, s, rng)
        probs = model.classify(att.bag_embedding).data
    mean = probs.mean(axis=0)
    std = probs.std(axis=0)
    return BagPrediction(
        class_prob_mean=mean,
        class_prob_std=std,
        total_uncertainty=float(std.mean()),
        predicted_class=int(np.argmax(mean)),
        attention=att,
        class_prob_samples=probs,
    )


# ------------------------------------------------------------- checkpoints
def save_checkpoint(model: MilModel, path, extra: Optional[dict] = None) -> tuple:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64 blob)."""
    path = Path(path)
    entries, offset, chunks = [], 0, []
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = path.with_suffix(".bin")
    manifest = path.with_suffix(".json")
    blob.write_bytes(b"".join(chunks))
    doc = {
        "format_version": CHECKPOINT_FORMAT,
        "dtype": "float64-le",
        "blob": blob.name,
        "config": model.config.to_dict(),
        "parameters": entries,
    }
    if extra:
        doc.update(extra)
    manifest.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return manifest, blob


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> MilModel:
    path = Path(path)
    manifest = path.with_suffix(".json")
    doc = json.loads(manifest.read_text())
    if doc.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{manifest}: unsupported format version {doc.get('format_version')}")
    stored = ModelConfig.from_dict(doc["config"])
    if config is not None:
        for key in ("backbone", "feature_dim", "attention", "num_classes", "inducing_count", "gp_input_dim"):
            if getattr(config, key) != getattr(stored, key):
                raise CheckpointError(f"{manifest}: config mismatch on {key}: {getattr(stored, key)} vs {getattr(config, key)}")
    model = MilModel(stored if config is None else config)
    blob = (manifest.parent / doc["blob"]).read_bytes()
    names = [e["name"] for e in doc["parameters"]]
    if names != list(model.params):
        raise CheckpointError(f"{manifest}: parameter list does not match the model layout")
    for e in doc["parameters"]:
        p = model.params[e["name"]]
        if tuple(e["shape"]) != p.shape:
            raise CheckpointError(f"{manifest}: shape mismatch for {e['name']}: {e['shape']} vs {list(p.shape)}")
        arr = np.frombuffer(blob, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        p.data[...] = arr.reshape(p.shape)
    return model


def predict_dataset(model: MilModel, bags, s: Optional[int] = None, seed: Optional[int] = None) -> list:
    """Predict every bag with noise keyed by bag id, so results do not depend on bag order."""
    seed = model.config.seed if seed is None else seed
    return [predict(b, model, s=s, rng=stream(seed, "eval", int(b.bag_id))) for b in bags]
