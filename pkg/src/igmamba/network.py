"""Full classifier: pixel embedding, staged grouped-scan blocks, head.

A model is built from a ModelConfig and an init RNG; the config fully
determines the architecture, the parameter count, and the spatial-size trace
across stages, so checkpoints embed the config and rebuild the exact model.

Stage layout (per config): pixel embedding at stage 1, then for each later
stage an average-pool downsample plus channel re-embedding, with one or more
spatial-spectral blocks per stage. Each block runs its spatial operator, then
its spectral operator (mode-dependent), then a residual feed-forward. Each
operator is residual internally: input + project(norm(scan-branch) * gate).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from igmamba import igsm as igsm_mod
from igmamba import layers
from igmamba import tensor as T
from igmamba.errors import (
    CompatibilityError,
    ConfigError,
    MagicError,
    TruncationError,
    VersionError,
)
from igmamba.igsm import GROUP_COUNT, GROUPING_MODES
from igmamba.tensor import Parameter

OPERATOR_MODES = ("cascade", "spatial_only", "spectral_only")
EMBED_FEATURE_MAPS = 8
HEAD_HIDDEN = 64
CHECKPOINT_MAGIC = b"IGSM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Every architectural hyperparameter; serializable and hashable."""

    patch_size: int = 13
    pca_dim: int = 30
    embed_dim: int = 32
    num_stages: int = 3
    blocks_per_stage: int = 1
    downsample_m: int = 2
    downsample_s: int = 1
    ssm_state: int = 16
    expand: int = 1
    ffn_ratio: int = 2
    num_classes: int = 16
    grouping_mode: str = "interval"
    operator_mode: str = "cascade"

    def validate(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size must be odd and positive, got {self.patch_size}")
        for field in ("pca_dim", "embed_dim", "num_stages", "blocks_per_stage", "ssm_state",
                      "expand", "ffn_ratio", "downsample_m", "downsample_s"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        inner = self.embed_dim * self.expand
        if self.embed_dim % GROUP_COUNT != 0 or inner % GROUP_COUNT != 0:
            raise ConfigError(
                f"embed_dim ({self.embed_dim}) and embed_dim*expand ({inner}) must be "
                f"divisible by {GROUP_COUNT}"
            )
        if self.grouping_mode not in GROUPING_MODES:
            raise ConfigError(f"grouping_mode must be one of {GROUPING_MODES}, got '{self.grouping_mode}'")
        if self.operator_mode not in OPERATOR_MODES:
            raise ConfigError(f"operator_mode must be one of {OPERATOR_MODES}, got '{self.operator_mode}'")
        self.spatial_trace()
        return self

    def spatial_trace(self):
        """Spatial size per stage; downsampling starts at stage 2."""
        trace = [self.patch_size]
        p = self.patch_size
        for i in range(2, self.num_stages + 1):
            if (p - self.downsample_m) % self.downsample_s != 0:
                raise ConfigError(
                    f"stage {i}: spatial size {p} minus kernel {self.downsample_m} "
                    f"not divisible by stride {self.downsample_s}"
                )
            p = (p - self.downsample_m) // self.downsample_s + 1
            if p < 2:
                raise ConfigError(f"stage {i}: spatial size shrinks to {p}; must stay >= 2")
            trace.append(p)
        return trace

    def canonical_json(self):
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, values):
        known = set(cls.__dataclass_fields__)
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        coerced = {}
        for key, value in values.items():
            field_type = cls.__dataclass_fields__[key].type
            coerced[key] = str(value) if field_type == "str" else int(value)
        return cls(**coerced)


# -- submodules --------------------------------------------------------------


class Ffn:
    def __init__(self, k, ratio, rng, dtype):
        self.fc1 = layers.Linear(k, k * ratio, rng, dtype)
        self.fc2 = layers.Linear(k * ratio, k, rng, dtype)

    def __call__(self, f):
        return f + self.fc2(T.silu(self.fc1(f)))

    def named_parameters(self, prefix):
        yield from self.fc1.named_parameters(f"{prefix}.fc1")
        yield from self.fc2.named_parameters(f"{prefix}.fc2")


class Operator:
    """One gated scan operator over the spatial or spectral domain."""

    def __init__(self, k, domain, config, p, rng, dtype):
        inner = k * config.expand
        self.domain = domain
        self.norm1 = layers.LayerNorm(k, dtype)
        self.gate = layers.Linear(k, inner, rng, dtype)
        self.inproj = layers.Linear(k, inner, rng, dtype)
        self.dwconv = layers.DepthwiseConv2d(inner, rng, dtype)
        self.igsm = igsm_mod.init_igsm_params(
            inner, domain, config.grouping_mode, p, config.ssm_state, rng, dtype
        )
        self.norm2 = layers.LayerNorm(inner, dtype)
        self.out = layers.Linear(inner, k, rng, dtype)

    def __call__(self, f):
        xn = self.norm1(f)
        z = T.silu(self.gate(xn))
        branch = T.silu(self.dwconv(self.inproj(xn)))
        scanned = igsm_mod.igsm_forward(branch, self.igsm, self.domain)
        return self.out(self.norm2(scanned) * z) + f

    def named_parameters(self, prefix):
        yield from self.norm1.named_parameters(f"{prefix}.norm1")
        yield from self.gate.named_parameters(f"{prefix}.gate")
        yield from self.inproj.named_parameters(f"{prefix}.in")
        yield from self.dwconv.named_parameters(f"{prefix}.dw")
        for name, tensor in self.igsm.named_tensors():
            yield f"{prefix}.igsm.{name}", tensor
        yield from self.norm2.named_parameters(f"{prefix}.norm2")
        yield from self.out.named_parameters(f"{prefix}.out")


class IgssbBlock:
    """Spatial/spectral operator cascade plus residual feed-forward."""

    def __init__(self, k, config, p, rng, dtype):
        mode = config.operator_mode
        self.mode = mode
        self.spa = Operator(k, "spatial", config, p, rng, dtype) if mode != "spectral_only" else None
        self.spe = Operator(k, "spectral", config, p, rng, dtype) if mode != "spatial_only" else None
        self.ffn = Ffn(k, config.ffn_ratio, rng, dtype)

    def __call__(self, f):
        if self.spa is not None:
            f = self.spa(f)
        if self.spe is not None:
            f = self.spe(f)
        return self.ffn(f)

    def named_parameters(self, prefix):
        if self.spa is not None:
            yield from self.spa.named_parameters(f"{prefix}.spa")
        if self.spe is not None:
            yield from self.spe.named_parameters(f"{prefix}.spe")
        yield from self.ffn.named_parameters(f"{prefix}.ffn")


class Downsample:
    def __init__(self, k, d, m, s, rng, dtype):
        self.m = m
        self.s = s
        self.fc = layers.Linear(k, d, rng, dtype)

    def __call__(self, f):
        return self.fc(layers.avg_pool2d(f, self.m, self.s))

    def named_parameters(self, prefix):
        yield from self.fc.named_parameters(f"{prefix}.fc")


class Stage:
    def __init__(self, down, blocks):
        self.down = down
        self.blocks = blocks


class Model:
    def __init__(self, config: ModelConfig, rng, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        d = config.embed_dim
        self.conv = layers.Conv3d(EMBED_FEATURE_MAPS, rng, dtype)
        self.bn = layers.BatchNorm(EMBED_FEATURE_MAPS, dtype)
        self.embed_fc = layers.Linear(EMBED_FEATURE_MAPS * config.pca_dim, d, rng, dtype)
        self.stages = []
        for i, p in enumerate(config.spatial_trace(), start=1):
            down = None if i == 1 else Downsample(d, d, config.downsample_m, config.downsample_s, rng, dtype)
            blocks = [IgssbBlock(d, config, p, rng, dtype) for _ in range(config.blocks_per_stage)]
            self.stages.append(Stage(down, blocks))
        self.head_fc1 = layers.Linear(d, HEAD_HIDDEN, rng, dtype)
        self.head_fc2 = layers.Linear(HEAD_HIDDEN, config.num_classes, rng, dtype)

    # -- forward -------------------------------------------------------------

    def embed(self, x, training=False):
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.patch_size, cfg.patch_size, cfg.pca_dim):
            raise ConfigError(
                f"model expects [batch, {cfg.patch_size}, {cfg.patch_size}, {cfg.pca_dim}] "
                f"patches, got {x.shape}"
            )
        batch = x.shape[0]
        v = T.relu(self.bn(self.conv(x), training))
        v = T.reshape(v, (batch, cfg.patch_size, cfg.patch_size, cfg.pca_dim * EMBED_FEATURE_MAPS))
        return self.embed_fc(v)

    def classify(self, f):
        pooled = T.reduce_mean(T.reduce_mean(f, axis=1), axis=1)
        return self.head_fc2(T.silu(self.head_fc1(pooled)))

    def forward(self, x, training=False):
        """Logits [batch, num_classes] for patches [batch, B, B, L]."""
        f = self.embed(x, training)
        for stage in self.stages:
            if stage.down is not None:
                f = stage.down(f)
            for block in stage.blocks:
                f = block(f)
        return self.classify(f)

    def __call__(self, x, training=False):
        return self.forward(x, training)

    # -- parameter plumbing --------------------------------------------------

    def named_parameters(self):
        yield from self.conv.named_parameters("embed.conv")
        yield from self.bn.named_parameters("embed.bn")
        yield from self.embed_fc.named_parameters("embed.fc")
        for i, stage in enumerate(self.stages, start=1):
            if stage.down is not None:
                yield from stage.down.named_parameters(f"stage{i}.down")
            for bi, block in enumerate(stage.blocks, start=1):
                label = f"stage{i}.igssb" if len(stage.blocks) == 1 else f"stage{i}.igssb{bi}"
                yield from block.named_parameters(label)
        yield from self.head_fc1.named_parameters("head.fc1")
        yield from self.head_fc2.named_parameters("head.fc2")

    def parameters(self):
        params = [Parameter(name, tensor) for name, tensor in self.named_parameters()]
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate parameter names: {dupes}")
        return params

    def named_buffers(self):
        yield from self.bn.named_buffers("embed.bn")

    def set_buffer(self, name, value):
        if name == "embed.bn.running_mean":
            self.bn.running_mean = value
        elif name == "embed.bn.running_var":
            self.bn.running_var = value
        else:
            raise CompatibilityError(f"unknown buffer '{name}'")


# -- counting ----------------------------------------------------------------


def count_params(model):
    """Trainable scalars only; batchnorm running stats are buffers, not counted."""
    return int(sum(p.tensor.data.size for p in model.parameters()))


def _scan_geometry(config, p, domain, grouping):
    inner = config.embed_dim * config.expand
    if domain == "spatial":
        width = inner if grouping == "all" else inner // GROUP_COUNT
        length = p * p
    else:
        width = p
        per_group = inner if grouping == "all" else inner // GROUP_COUNT
        length = p * per_group
    return length, width


def flop_breakdown(config, grouping=None):
    """Multiply-accumulate counts for one single-patch forward, by component.

    Convention: 1 MAC per weight multiply in linear/conv layers and scan
    projections; the scan recurrence counts its per-step state arithmetic;
    activations and normalizations are excluded (linear in element count).
    """
    config.validate()
    grouping = config.grouping_mode if grouping is None else grouping
    n = config.ssm_state
    d = config.embed_dim
    inner = d * config.expand
    out = {}
    p0 = config.patch_size
    out["embed.conv"] = p0 * p0 * config.pca_dim * 27 * EMBED_FEATURE_MAPS
    out["embed.fc"] = p0 * p0 * (EMBED_FEATURE_MAPS * config.pca_dim) * d

    domains = {
        "cascade": ("spatial", "spectral"),
        "spatial_only": ("spatial",),
        "spectral_only": ("spectral",),
    }[config.operator_mode]

    for i, p in enumerate(config.spatial_trace(), start=1):
        pre = f"stage{i}"
        if i >= 2:
            out[f"{pre}.down.fc"] = p * p * d * d
        for domain in domains:
            length, width = _scan_geometry(config, p, domain, grouping)
            dpre = f"{pre}.{'spa' if domain == 'spatial' else 'spe'}"
            area = p * p
            per_block = {
                f"{dpre}.gate": area * d * inner,
                f"{dpre}.in": area * d * inner,
                f"{dpre}.dw": area * inner * 9,
                f"{dpre}.igsm.scan_proj": GROUP_COUNT * length * (width * width + 2 * width * n),
                f"{dpre}.igsm.scan_recur": GROUP_COUNT * length * (6 * width * n + width),
                f"{dpre}.igsm.atten": 2 * inner * (inner // GROUP_COUNT),
                f"{dpre}.out": area * inner * d,
            }
            for key, macs in per_block.items():
                out[key] = macs * config.blocks_per_stage
        out[f"{pre}.ffn"] = config.blocks_per_stage * 2 * p * p * d * (d * config.ffn_ratio)
    out["head"] = d * HEAD_HIDDEN + HEAD_HIDDEN * config.num_classes
    return out


def count_flops(config, grouping=None):
    return int(sum(flop_breakdown(config, grouping).values()))


def scan_projection_flops(config, grouping=None):
    """MACs spent on the per-step dt/B/C input projections across all scans."""
    return int(
        sum(v for k, v in flop_breakdown(config, grouping).items() if k.endswith("igsm.scan_proj"))
    )


# -- checkpoints -------------------------------------------------------------


def _checkpoint_entries(model):
    entries = [(name, t.data) for name, t in model.named_parameters()]
    entries += [(name, buf) for name, buf in model.named_buffers()]
    return sorted(entries, key=lambda item: item[0])


def save_checkpoint(model, path):
    """Binary dump: magic, version, config JSON, then name-sorted f32 arrays."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<H", CHECKPOINT_VERSION)
    cfg = model.config.canonical_json().encode("utf-8")
    blob += struct.pack("<I", len(cfg))
    blob += cfg
    entries = _checkpoint_entries(model)
    blob += struct.pack("<I", len(entries))
    for name, arr in entries:
        data = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def read(self, count, what):
        if self.pos + count > len(self.blob):
            raise TruncationError(
                f"checkpoint ends while reading {what}: need {count} bytes, "
                f"have {len(self.blob) - self.pos}",
                offset=self.pos,
            )
        out = self.blob[self.pos : self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt), what))


def load_checkpoint(path, dtype=np.float32):
    """Rebuild the model stored at ``path``; bit-exact against the save."""
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(blob)
    magic = reader.read(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise MagicError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    (version,) = reader.unpack("<H", "version")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}", offset=4)
    (cfg_len,) = reader.unpack("<I", "config length")
    config = ModelConfig.from_dict(json.loads(reader.read(cfg_len, "config").decode("utf-8")))
    (count,) = reader.unpack("<I", "entry count")
    stored = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        name = reader.read(name_len, "name").decode("utf-8")
        (ndim,) = reader.unpack("<B", "rank")
        shape = reader.unpack(f"<{ndim}I", "shape") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = reader.read(4 * size, f"data of '{name}'")
        stored[name] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    if reader.pos != len(blob):
        raise TruncationError(
            f"checkpoint has {len(blob) - reader.pos} trailing bytes", offset=reader.pos
        )

    model = Model(config, np.random.default_rng(0), dtype=dtype)
    expected = dict(_checkpoint_entries(model))
    missing = sorted(set(expected) - set(stored))
    extra = sorted(set(stored) - set(expected))
    if missing or extra:
        raise CompatibilityError(
            f"checkpoint entries do not match the config's model: missing {missing}, extra {extra}"
        )
    for name, tensor in model.named_parameters():
        arr = stored[name]
        if arr.shape != tensor.data.shape:
            raise CompatibilityError(
                f"'{name}': checkpoint shape {arr.shape} != model shape {tensor.data.shape}"
            )
        tensor.data = arr.astype(dtype)
    for name, buf in model.named_buffers():
        model.set_buffer(name, stored[name].astype(dtype).copy())
    return model
