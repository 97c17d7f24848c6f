"""Trainable components: feature extractor, codeword encoder, projection head,
and the plain classification head used by the baselines.

The extractor is either an MLP (vector inputs) or a small 2-conv + pool +
dense stack (image inputs); both produce a feature vector h. The encoder is
one dense layer with tanh, mapping h to a codeword c with entries in (-1, 1).
The projection head (linear-relu-linear) maps either c or h to the
contrastive space, depending on the pipeline.

Parameters are ordinary graph-leaf tensors; a forward pass never mutates
them, so repeated passes with the same inputs are identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import Tensor

CHECKPOINT_VERSION = 1

PROJECT_FROM_CODEWORD = "codeword"
PROJECT_FROM_FEATURE = "feature"


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    input_shape: tuple
    num_classes: int
    extractor: str = "auto"           # auto | mlp | conv
    hidden_sizes: tuple = (64,)       # mlp stack before the feature layer
    conv_channels: tuple = (8, 16)    # two 3x3 conv layers
    feature_dim: int = 64             # dimension of h
    code_length: int = 32             # dimension of c
    projection_dim: int = 0           # dimension of z; 0 means code_length // 2
    project_from: str = PROJECT_FROM_CODEWORD

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if self.resolved_extractor() == "conv" and len(self.input_shape) != 3:
            raise NetworkError(f"conv extractor needs (C,H,W) input, got {self.input_shape}")
        if self.resolved_extractor() == "mlp" and len(self.input_shape) != 1:
            raise NetworkError(f"mlp extractor needs (d,) input, got {self.input_shape}")
        if self.project_from not in (PROJECT_FROM_CODEWORD, PROJECT_FROM_FEATURE):
            raise NetworkError(f"unknown project_from {self.project_from!r}")

    def resolved_extractor(self):
        if self.extractor != "auto":
            return self.extractor
        return "mlp" if len(self.input_shape) == 1 else "conv"

    def resolved_projection_dim(self):
        return self.projection_dim if self.projection_dim > 0 else max(2, self.code_length // 2)

    def hash(self):
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Dense:
    w: Tensor  # (fan_in, fan_out)
    b: Tensor  # (fan_out,)

    def __call__(self, x):
        return x @ self.w + self.b


@dataclass
class Conv:
    w: Tensor  # (F, C, kh, kw)
    b: Tensor  # (F,)

    def __call__(self, x):
        f = self.w.shape[0]
        return x.conv2d(self.w) + self.b.reshape(1, f, 1, 1)


def _uniform_tensor(rng, shape, fan_in, gain):
    # uniform fan-in scaling; gain 2 keeps variance through relu layers
    bound = np.sqrt(3.0 * gain / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _init_dense(rng, fan_in, fan_out, gain=1.0):
    return Dense(w=_uniform_tensor(rng, (fan_in, fan_out), fan_in, gain),
                 b=Tensor(np.zeros(fan_out), requires_grad=True))


def _init_conv(rng, in_ch, out_ch, k=3, gain=2.0):
    fan_in = in_ch * k * k
    return Conv(w=_uniform_tensor(rng, (out_ch, in_ch, k, k), fan_in, gain),
                b=Tensor(np.zeros(out_ch), requires_grad=True))


def _conv_flat_dim(config):
    c, h, w = config.input_shape
    for _ in config.conv_channels:
        h, w = (h - 2) // 2, (w - 2) // 2  # 3x3 valid conv then 2x2 pool
    if h < 1 or w < 1:
        raise NetworkError(f"input {config.input_shape} too small for the conv stack")
    return config.conv_channels[-1] * h * w


@dataclass
class NetworkParams:
    config: NetConfig
    extractor: list = field(default_factory=list)
    encoder: Dense | None = None
    projection: list = field(default_factory=list)
    baseline_head: Dense | None = None

    def named_tensors(self, groups=("extractor", "encoder", "projection", "head")):
        out = []
        if "extractor" in groups:
            for i, layer in enumerate(self.extractor):
                out.append((f"extractor.{i}.w", layer.w))
                out.append((f"extractor.{i}.b", layer.b))
        if "encoder" in groups:
            out.append(("encoder.w", self.encoder.w))
            out.append(("encoder.b", self.encoder.b))
        if "projection" in groups:
            for i, layer in enumerate(self.projection):
                out.append((f"projection.{i}.w", layer.w))
                out.append((f"projection.{i}.b", layer.b))
        if "head" in groups:
            out.append(("head.w", self.baseline_head.w))
            out.append(("head.b", self.baseline_head.b))
        return out

    def copy(self):
        clone = init_params(self.config, seed=0)
        for (_, src), (_, dst) in zip(self.named_tensors(), clone.named_tensors()):
            dst.data[...] = src.data
        return clone


def init_params(config, seed):
    """Seed-deterministic parameter initialization (uniform fan-in scaling)."""
    rng = np.random.default_rng(seed)
    params = NetworkParams(config=config)
    kind = config.resolved_extractor()
    if kind == "mlp":
        dims = [config.input_shape[0], *config.hidden_sizes, config.feature_dim]
        params.extractor = [_init_dense(rng, a, b, gain=2.0)
                            for a, b in zip(dims[:-1], dims[1:])]
    else:
        chans = [config.input_shape[0], *config.conv_channels]
        params.extractor = [_init_conv(rng, a, b) for a, b in zip(chans[:-1], chans[1:])]
        params.extractor.append(
            _init_dense(rng, _conv_flat_dim(config), config.feature_dim, gain=2.0))
    params.encoder = _init_dense(rng, config.feature_dim, config.code_length)
    proj_in = (config.code_length if config.project_from == PROJECT_FROM_CODEWORD
               else config.feature_dim)
    d_z = config.resolved_projection_dim()
    params.projection = [_init_dense(rng, proj_in, proj_in, gain=2.0),
                         _init_dense(rng, proj_in, d_z)]
    params.baseline_head = _init_dense(rng, config.feature_dim, config.num_classes)
    return params


def transfer_pretrained(pretrained, seed):
    """Fine-tuning start point: extractor and encoder weights copied exactly,
    projection head and baseline head freshly re-initialized."""
    params = init_params(pretrained.config, seed)
    groups = ("extractor", "encoder")
    for (_, src), (_, dst) in zip(pretrained.named_tensors(groups),
                                  params.named_tensors(groups)):
        dst.data[...] = src.data
    return params


@dataclass
class ForwardOutputs:
    h: Tensor
    c: Tensor | None = None
    z: Tensor | None = None
    p: Tensor | None = None


def extract_features(params, x):
    """h = f(x) for a batch: (B,d) through the MLP or (B,C,H,W) through convs."""
    kind = params.config.resolved_extractor()
    out = x
    if kind == "mlp":
        for layer in params.extractor:
            out = layer(out).relu()
    else:
        for layer in params.extractor[:-1]:
            out = layer(out).relu().maxpool2()
        out = out.reshape(out.shape[0], -1)
        out = params.extractor[-1](out).relu()
    return out


def encode_codewords(params, h):
    """c = E(h): one dense layer squashed by tanh, so entries lie in (-1, 1)."""
    return params.encoder(h).tanh()


def project(params, base):
    """z = g(base): linear-relu-linear into the contrastive space."""
    hidden = params.projection[0](base).relu()
    return params.projection[1](hidden)


def forward_pretrain(params, x):
    """Pretraining pass over a stacked batch of augmented views."""
    h = extract_features(params, x)
    c = encode_codewords(params, h)
    base = c if params.config.project_from == PROJECT_FROM_CODEWORD else h
    return ForwardOutputs(h=h, c=c, z=project(params, base))


def forward_finetune(params, x, book):
    """Fine-tuning pass: codewords plus decoded class probabilities."""
    from .codebook import decode_probabilities

    h = extract_features(params, x)
    c = encode_codewords(params, h)
    return ForwardOutputs(h=h, c=c, p=decode_probabilities(c, book))


def forward_baseline(params, x):
    """Logits from the plain classification head (baseline pipelines)."""
    h = extract_features(params, x)
    return params.baseline_head(h)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params, path, extra=None):
    """Single-file .npz bundle: every layer array plus a JSON manifest with
    layer names/shapes and the config hash."""
    named = params.named_tensors()
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "config_hash": params.config.hash(),
        "layers": [{"name": n, "shape": list(t.shape)} for n, t in named],
        "extra": extra or {},
    }
    arrays = {name: t.data for name, t in named}
    arrays["__manifest__"] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path, expect_config=None):
    """Rebuild NetworkParams from a checkpoint; rejects config mismatches."""
    with np.load(path) as bundle:
        if "__manifest__" not in bundle:
            raise NetworkError(f"not a checkpoint file: {path}")
        manifest = json.loads(bytes(bundle["__manifest__"].tobytes()).decode())
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise NetworkError(f"unsupported checkpoint version {manifest.get('version')}")
        cfg_dict = dict(manifest["config"])
        config = NetConfig(**cfg_dict)
        if config.hash() != manifest["config_hash"]:
            raise NetworkError("checkpoint manifest hash does not match its config")
        if expect_config is not None and expect_config.hash() != config.hash():
            raise NetworkError("checkpoint config does not match the expected config")
        params = init_params(config, seed=0)
        for name, tensor in params.named_tensors():
            if name not in bundle:
                raise NetworkError(f"checkpoint missing layer {name!r}")
            arr = bundle[name]
            if tuple(arr.shape) != tensor.shape:
                raise NetworkError(
                    f"layer {name!r} has shape {arr.shape}, expected {tensor.shape}")
            tensor.data[...] = arr
        extra = manifest.get("extra", {})
    return params, extra
