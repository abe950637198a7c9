"""Model construction: the configurable reconstruction autoencoder (learning
blocks with a convolutional or ViT first layer, optional skip connections)
and the compact residual classifier used on crops.

A learning block is [conv-or-ViT] -> batch norm -> ReLU -> resample, where
the resample step is a stride-2 max pool on the encoder side and a 2x
nearest-neighbor upsample on the decoder side.  The latent block keeps only
the first layer.  Skip connections, when enabled, concatenate each encoder
block's output onto the input of the decoder block working at the same
scale, U-Net style.
"""

import dataclasses
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import nn
from .data import PatchSpec, bilinear_resize
from .errors import CheckpointError, ConfigError, DimensionError
from .imaging import CroppedLocalization, ImagePatch

CHECKPOINT_FORMAT_VERSION = 1

VIT_PLACEMENTS = ("none", "outer", "inner", "latent")


@dataclass(frozen=True)
class ViTLayerSpec:
    """Hyperparameters of a ViT first layer."""

    token_patch: int = 8
    embed_dim: int = 128
    heads: int = 4
    transformer_depth: int = 2

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ConfigError("embed_dim must be divisible by heads")
        if self.token_patch < 1 or self.transformer_depth < 1:
            raise ConfigError("token_patch and transformer_depth must be >= 1")


@dataclass(frozen=True)
class AutoencoderSpec:
    """Declarative autoencoder architecture.

    ``depth`` counts learning blocks in the encoder (and in the decoder);
    each encoder block halves the spatial size, each decoder block doubles
    it.  ``vit_placement`` substitutes the first layer of the named block(s)
    with a ViT layer; "outer" substitutes symmetrically in encoder and
    decoder unless ``vit_encoder_only`` is set.
    """

    depth: int = 3
    vit_placement: str = "none"
    skip_connections: bool = False
    base_channels: int = 8
    input_size: PatchSpec = PatchSpec(128, 128)
    vit: ViTLayerSpec = ViTLayerSpec()
    vit_encoder_only: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.vit_placement not in VIT_PLACEMENTS:
            raise ConfigError(
                f"vit_placement must be one of {VIT_PLACEMENTS}, got {self.vit_placement!r}"
            )
        if self.vit_placement == "inner" and self.depth < 2:
            raise ConfigError("inner ViT placement needs depth >= 2")
        div = 2**self.depth
        if self.input_size.width % div or self.input_size.height % div:
            raise ConfigError(
                f"input {self.input_size.width}x{self.input_size.height} "
                f"not divisible by 2^depth = {div}"
            )

    def to_dict(self):
        return {
            "depth": self.depth,
            "vit_placement": self.vit_placement,
            "skip_connections": self.skip_connections,
            "base_channels": self.base_channels,
            "input_width": self.input_size.width,
            "input_height": self.input_size.height,
            "vit": dataclasses.asdict(self.vit),
            "vit_encoder_only": self.vit_encoder_only,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            depth=d["depth"],
            vit_placement=d["vit_placement"],
            skip_connections=d["skip_connections"],
            base_channels=d["base_channels"],
            input_size=PatchSpec(d["input_width"], d["input_height"]),
            vit=ViTLayerSpec(**d["vit"]),
            vit_encoder_only=d.get("vit_encoder_only", False),
        )


class LearningBlock(nn.Module):
    """First layer (conv or ViT) + batch norm + ReLU + optional resample."""

    def __init__(self, first, out_channels, resample):
        super().__init__()
        if resample not in ("down", "up", None):
            raise ConfigError(f"bad resample {resample!r}")
        self.add("first", first)
        self.add("bn", nn.BatchNorm2d(out_channels))
        self.add("relu", nn.ReLU())
        if resample == "down":
            self.add("resample", nn.MaxPool2d())
        elif resample == "up":
            self.add("resample", nn.UpsampleNearest2x())
        self.resample = resample

    def forward(self, x, training=False):
        m = self._modules
        x = m["relu"].forward(m["bn"].forward(m["first"].forward(x, training), training), training)
        if self.resample:
            x = m["resample"].forward(x, training)
        return x

    def backward(self, dy):
        m = self._modules
        if self.resample:
            dy = m["resample"].backward(dy)
        return m["first"].backward(m["bn"].backward(m["relu"].backward(dy)))


class LatentBlock(nn.Module):
    """The bottleneck learning block: first layer only."""

    def __init__(self, first):
        super().__init__()
        self.add("first", first)

    def forward(self, x, training=False):
        return self._modules["first"].forward(x, training)

    def backward(self, dy):
        return self._modules["first"].backward(dy)


def _first_layer(use_vit, spec, in_ch, out_ch, side_h, side_w, rng):
    if use_vit:
        v = spec.vit
        return nn.ViTLayer(
            in_ch, out_ch, side_h, side_w,
            v.token_patch, v.embed_dim, v.heads, v.transformer_depth, rng,
        )
    return nn.Conv2d(in_ch, out_ch, rng)


class Autoencoder(nn.Module):
    """Realized reconstruction network; built via :func:`build_autoencoder`."""

    def __init__(self, spec, seed):
        super().__init__()
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(seed)
        d, base = spec.depth, spec.base_channels
        h, w = spec.input_size.height, spec.input_size.width

        enc_out = [base * 2**i for i in range(d)]
        vit_enc = {
            "outer": {0},
            "inner": {1} if spec.vit_placement == "inner" else set(),
        }.get(spec.vit_placement, set())

        self._enc_channels = enc_out
        ch = 3
        for i in range(d):
            first = _first_layer(
                i in vit_enc, spec, ch, enc_out[i], h // 2**i, w // 2**i, rng
            )
            self.add(f"enc{i}", LearningBlock(first, enc_out[i], "down"))
            ch = enc_out[i]

        latent_side_h, latent_side_w = h // 2**d, w // 2**d
        latent_first = _first_layer(
            spec.vit_placement == "latent", spec, ch, ch, latent_side_h, latent_side_w, rng
        )
        self.add("latent", LatentBlock(latent_first))

        # decoder block j consumes the scale of encoder block d-1-j
        dec_out = [base * 2**max(d - 2 - j, 0) for j in range(d)]
        vit_dec = set()
        if not spec.vit_encoder_only:
            if spec.vit_placement == "outer":
                vit_dec = {d - 1}
            elif spec.vit_placement == "inner":
                vit_dec = {d - 2}
        for j in range(d):
            level = d - 1 - j  # matching encoder index
            in_ch = ch + (enc_out[level] if spec.skip_connections else 0)
            side_h, side_w = h // 2**(level + 1), w // 2**(level + 1)
            first = _first_layer(j in vit_dec, spec, in_ch, dec_out[j], side_h, side_w, rng)
            self.add(f"dec{j}", LearningBlock(first, dec_out[j], "up"))
            ch = dec_out[j]

        self.add("final", nn.Conv2d(ch, 3, rng))
        self.add("out_act", nn.Sigmoid())

    def forward(self, x, training=False):
        spec = self.spec
        if x.shape[1:] != (3, spec.input_size.height, spec.input_size.width):
            raise DimensionError(
                f"expected (N,3,{spec.input_size.height},{spec.input_size.width}), got {x.shape}"
            )
        m = self._modules
        enc_feats = []
        h = x
        for i in range(spec.depth):
            h = m[f"enc{i}"].forward(h, training)
            enc_feats.append(h)
        h = m["latent"].forward(h, training)
        for j in range(spec.depth):
            if spec.skip_connections:
                h = np.concatenate([h, enc_feats[spec.depth - 1 - j]], axis=1)
            h = m[f"dec{j}"].forward(h, training)
        return m["out_act"].forward(m["final"].forward(h, training), training)

    def backward(self, dy):
        spec, m = self.spec, self._modules
        d = m["final"].backward(m["out_act"].backward(dy))
        skip_grads = [None] * spec.depth
        for j in reversed(range(spec.depth)):
            d = m[f"dec{j}"].backward(d)
            if spec.skip_connections:
                main_ch = d.shape[1] - self._enc_channels[spec.depth - 1 - j]
                skip_grads[spec.depth - 1 - j] = d[:, main_ch:]
                d = np.ascontiguousarray(d[:, :main_ch])
        d = m["latent"].backward(d)
        for i in reversed(range(spec.depth)):
            if skip_grads[i] is not None:
                d = d + skip_grads[i]
            d = m[f"enc{i}"].backward(d)
        return d

    def reconstruct(self, patches):
        """Batch inference on (N,H,W,3) float pixels; returns same layout."""
        x = np.ascontiguousarray(patches.transpose(0, 3, 1, 2), dtype=np.float32)
        y = self.forward(x, training=False)
        return y.transpose(0, 2, 3, 1)


def build_autoencoder(spec, seed=0):
    """Construct an autoencoder with deterministic seed-derived weights."""
    return Autoencoder(spec, seed)


def forward(model, patch):
    """Reconstruct a single patch: ImagePatch -> ImagePatch, output in [0,1]."""
    if (patch.height, patch.width) != (
        model.spec.input_size.height,
        model.spec.input_size.width,
    ):
        raise DimensionError(
            f"patch {patch.height}x{patch.width} does not match model input "
            f"{model.spec.input_size.height}x{model.spec.input_size.width}"
        )
    recon = model.reconstruct(patch.pixels[None])[0]
    return ImagePatch(np.clip(recon.astype(np.float64), 0.0, 1.0), row=patch.row, col=patch.col)


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

class ResidualBlock(nn.Module):
    def __init__(self, channels, rng):
        super().__init__()
        self.add("conv1", nn.Conv2d(channels, channels, rng))
        self.add("bn1", nn.BatchNorm2d(channels))
        self.add("relu1", nn.ReLU())
        self.add("conv2", nn.Conv2d(channels, channels, rng))
        self.add("bn2", nn.BatchNorm2d(channels))
        self.add("relu2", nn.ReLU())

    def forward(self, x, training=False):
        m = self._modules
        h = m["relu1"].forward(m["bn1"].forward(m["conv1"].forward(x, training), training), training)
        h = m["bn2"].forward(m["conv2"].forward(h, training), training)
        return m["relu2"].forward(h + x, training)

    def backward(self, dy):
        m = self._modules
        d = m["relu2"].backward(dy)
        dh = m["conv1"].backward(m["bn1"].backward(m["relu1"].backward(
            m["conv2"].backward(m["bn2"].backward(d))
        )))
        return dh + d


@dataclass
class ClassPrediction:
    label: str
    score: float
    probabilities: np.ndarray
    class_names: Tuple[str, ...]


class Classifier(nn.Module):
    """Compact residual classifier over square crops; outputs logits."""

    def __init__(self, n_classes, input_size, seed, base_channels=16, stages=3):
        super().__init__()
        if n_classes < 2:
            raise ConfigError("classifier needs n_classes >= 2")
        if input_size % 2**stages:
            raise ConfigError(f"input_size must be divisible by {2**stages}")
        self.n_classes = n_classes
        self.input_size = input_size
        self.seed = seed
        self.base_channels = base_channels
        self.stages = stages
        self.class_names = tuple(str(i) for i in range(n_classes))
        rng = np.random.default_rng(seed)
        layers = []
        ch = 3
        for s in range(stages):
            out = base_channels * 2**s
            layers += [
                nn.Conv2d(ch, out, rng),
                nn.BatchNorm2d(out),
                nn.ReLU(),
                ResidualBlock(out, rng),
                nn.MaxPool2d(),
            ]
            ch = out
        layers += [nn.GlobalAvgPool2d(), nn.Linear(ch, n_classes, rng)]
        self.add("net", nn.Sequential(*layers))

    def forward(self, x, training=False):
        if x.shape[1:] != (3, self.input_size, self.input_size):
            raise DimensionError(
                f"expected (N,3,{self.input_size},{self.input_size}), got {x.shape}"
            )
        return self._modules["net"].forward(x, training)

    def backward(self, dy):
        return self._modules["net"].backward(dy)

    def predict_proba(self, x):
        """Class probabilities in float64 (softmax of the logits)."""
        logits = self.forward(x, training=False).astype(np.float64)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


def build_classifier(n_classes, input_size=64, seed=0, base_channels=16):
    """Construct the crop classifier with deterministic initialization."""
    return Classifier(n_classes, input_size, seed, base_channels=base_channels)


def prepare_crop(pixels, input_size):
    """Aspect-preserving resize of a crop to fit ``input_size``, padded with
    neutral gray; the normalization applied before classification."""
    h, w = pixels.shape[:2]
    if h == 0 or w == 0:
        raise DimensionError("empty crop")
    scale = input_size / max(h, w)
    out_h = max(1, int(round(h * scale)))
    out_w = max(1, int(round(w * scale)))
    resized = bilinear_resize(pixels, out_w, out_h)
    canvas = np.full((input_size, input_size, 3), 0.5)
    y0 = (input_size - out_h) // 2
    x0 = (input_size - out_w) // 2
    canvas[y0:y0 + out_h, x0:x0 + out_w] = resized
    return np.clip(canvas, 0.0, 1.0)


def classify(model, crop):
    """Classify a cropped localization; returns label, score and the full
    probability distribution."""
    pixels = crop.pixels if isinstance(crop, CroppedLocalization) else np.asarray(crop)
    prepared = prepare_crop(pixels, model.input_size)
    x = np.ascontiguousarray(prepared.transpose(2, 0, 1)[None], dtype=np.float32)
    probs = model.predict_proba(x)[0]
    idx = int(np.argmax(probs))
    return ClassPrediction(
        label=model.class_names[idx],
        score=float(probs[idx]),
        probabilities=probs,
        class_names=model.class_names,
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model, path):
    """Serialize a model (spec + parameters + buffers) to an .npz file."""
    if isinstance(model, Autoencoder):
        meta = {"kind": "autoencoder", "spec": model.spec.to_dict(), "seed": model.seed}
    elif isinstance(model, Classifier):
        meta = {
            "kind": "classifier",
            "n_classes": model.n_classes,
            "input_size": model.input_size,
            "base_channels": model.base_channels,
            "seed": model.seed,
            "class_names": list(model.class_names),
        }
    else:
        raise CheckpointError(f"cannot checkpoint {type(model).__name__}")
    meta["format_version"] = CHECKPOINT_FORMAT_VERSION
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    arrays.update(model.state_dict())
    np.savez(path, **arrays)


def load_checkpoint(path, expected_spec=None):
    """Rebuild a model from a checkpoint; forward outputs are bit-identical
    to the saved model's."""
    try:
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if "meta" not in arrays:
        raise CheckpointError("checkpoint is missing its metadata record")
    meta = json.loads(bytes(arrays.pop("meta").tobytes()).decode())
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {meta.get('format_version')}"
        )
    if meta["kind"] == "autoencoder":
        spec = AutoencoderSpec.from_dict(meta["spec"])
        if expected_spec is not None and spec != expected_spec:
            raise CheckpointError("checkpoint spec does not match the expected spec")
        model = Autoencoder(spec, meta.get("seed", 0))
    elif meta["kind"] == "classifier":
        if expected_spec is not None:
            raise CheckpointError("checkpoint holds a classifier, not an autoencoder")
        model = Classifier(
            meta["n_classes"], meta["input_size"], meta.get("seed", 0),
            base_channels=meta.get("base_channels", 16),
        )
        model.class_names = tuple(meta["class_names"])
    else:
        raise CheckpointError(f"unknown checkpoint kind {meta['kind']!r}")
    expected = set(dict(model.named_parameters())) | {
        k for k, _ in model.named_buffers()
    }
    stored = {k.partition("/")[2] for k in arrays}
    if stored != expected:
        raise CheckpointError("checkpoint parameters do not match the model spec")
    model.load_state_dict(arrays)
    return model
