"""The four networks: generator G, patch discriminator D_p, feature
discriminator D_f and the frozen feature extractor F, plus the binary
checkpoint format that persists all of them.

The generator is a U-Net: an encoder of stride-2 convolutions down to a
1x1 bottleneck and a mirrored decoder of stride-2 transposed convolutions.
The activation of encoder layer i is concatenated channel-wise into the
decoder path at the stage of equal spatial size, so low-level detail
bypasses the bottleneck.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import defaults, engine
from .engine import ShapeError, Tensor
from .layers import (
    BatchNorm2d, Conv2d, ConvTranspose2d, LeakyReLU, Linear, Module, ReLU,
    Sequential, Sigmoid, Tanh, count_parameters,
)


def _require_power_of_two(n, what):
    if n < 2 or n & (n - 1):
        raise ValueError(f"{what} must be a power of two >= 2, got {n}")
    return int(np.log2(n))


@dataclass
class GeneratorConfig:
    input_size: tuple = (defaults.IMAGE_SIZE, defaults.IMAGE_SIZE, 3)  # (h, w, c)
    encoder_depth: int = None
    base_channels: int = defaults.BASE_CHANNELS
    max_channels: int = defaults.MAX_CHANNELS
    skip_connections: bool = True

    def __post_init__(self):
        h, w, _c = self.input_size
        if h != w:
            raise ValueError(f"input must be square, got {h}x{w}")
        log2h = _require_power_of_two(h, "generator input size")
        if self.encoder_depth is None:
            self.encoder_depth = log2h
        if self.encoder_depth != log2h:
            raise ValueError(
                f"encoder_depth {self.encoder_depth} must equal log2(size) = {log2h} "
                "so the bottleneck is 1x1"
            )

    def channels(self, i):
        """Output channels of encoder layer i (1-indexed)."""
        return min(self.base_channels * 2 ** (i - 1), self.max_channels)

    @property
    def total_layers(self):
        return 2 * self.encoder_depth


@dataclass
class PatchDiscriminatorConfig:
    k: int = defaults.PATCH_GRID
    conv_layers: int = defaults.DP_CONV_LAYERS
    base_channels: int = defaults.DP_BASE_CHANNELS
    input_size: tuple = (defaults.IMAGE_SIZE, defaults.IMAGE_SIZE, 3)

    def __post_init__(self):
        h, w, _c = self.input_size
        if h % self.k or w % self.k:
            raise ValueError(f"input {h}x{w} not divisible into a {self.k}x{self.k} patch grid")
        patch = h // self.k
        halvings = self.conv_layers - 1
        if patch % (1 << halvings) or patch // (1 << halvings) < 1:
            raise ValueError(
                f"patch size {patch} too small for {self.conv_layers} conv layers"
            )


@dataclass
class FeatureDiscriminatorConfig:
    feature_dim: int = defaults.FEATURE_DIM
    hidden_dim: int = defaults.DF_HIDDEN


@dataclass
class FeatureExtractorConfig:
    input_size: tuple = (defaults.IMAGE_SIZE, defaults.IMAGE_SIZE, 3)
    base_channels: int = defaults.F_BASE_CHANNELS
    feature_dim: int = defaults.FEATURE_DIM
    n_classes: int = 0  # classifier head width during pretraining


class Generator(Module):
    def __init__(self, config: GeneratorConfig, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.config = config
        h, _w, c = config.input_size
        depth = config.encoder_depth

        self.enc_convs, self.enc_norms = [], []
        in_ch = c
        for i in range(1, depth + 1):
            out_ch = config.channels(i)
            self.enc_convs.append(Conv2d(in_ch, out_ch, 4, stride=2, pad=1, rng=rng))
            # first layer sees raw pixels and keeps their statistics
            self.enc_norms.append(BatchNorm2d(out_ch) if i > 1 else None)
            in_ch = out_ch

        self.dec_convs, self.dec_norms = [], []
        for j in range(1, depth + 1):
            skip_ch = config.channels(depth - j + 1) if (config.skip_connections and j >= 2) else 0
            dec_in = in_ch + skip_ch
            dec_out = config.channels(depth - j) if j < depth else c
            self.dec_convs.append(ConvTranspose2d(dec_in, dec_out, 4, stride=2, pad=1, rng=rng))
            self.dec_norms.append(BatchNorm2d(dec_out) if j < depth else None)
            in_ch = dec_out

        self.act_enc = LeakyReLU(0.2)
        self.act_dec = ReLU()
        self.out_act = Tanh()

    def parameters(self):
        out = []
        for conv, norm in zip(self.enc_convs, self.enc_norms):
            out.extend(conv.parameters())
            if norm is not None:
                out.extend(norm.parameters())
        for conv, norm in zip(self.dec_convs, self.dec_norms):
            out.extend(conv.parameters())
            if norm is not None:
                out.extend(norm.parameters())
        return out

    def buffers(self):
        out = []
        for norm in self.enc_norms + self.dec_norms:
            if norm is not None:
                out.extend(norm.buffers())
        return out

    def _children(self):
        for group in (self.enc_convs, self.enc_norms, self.dec_convs, self.dec_norms):
            for child in group:
                if child is not None:
                    yield child

    def forward(self, x):
        squeeze = x.ndim == 3
        if squeeze:
            x = engine.reshape(x, (1,) + x.shape)
        h, _w, c = self.config.input_size
        if x.shape[1] != c or x.shape[2] != h or x.shape[3] != h:
            raise ShapeError(f"generator: input {x.shape[1:]} does not match configured {(c, h, h)}")
        if np.abs(x.data).max() > 1.0 + 1e-5:
            raise ValueError("generator input must lie in [-1, 1]")

        skips = []
        for conv, norm in zip(self.enc_convs, self.enc_norms):
            x = conv(x)
            if norm is not None:
                x = norm(x)
            x = self.act_enc(x)
            skips.append(x)

        depth = self.config.encoder_depth
        for j, (conv, norm) in enumerate(zip(self.dec_convs, self.dec_norms), start=1):
            if self.config.skip_connections and j >= 2:
                x = engine.concat([x, skips[depth - j]], axis=1)
            x = conv(x)
            if norm is not None:
                x = norm(x)
                x = self.act_dec(x)
        x = self.out_act(x)
        if squeeze:
            x = engine.reshape(x, x.shape[1:])
        return x

    def encoder_activations(self, x):
        """Encoder outputs plus per-decoder-stage input channel counts.

        Used by the structural audit: for each decoder stage j >= 2 the
        input must be upstream channels + the matching skip channels.
        """
        if x.ndim == 3:
            x = engine.reshape(x, (1,) + x.shape)
        acts = []
        for conv, norm in zip(self.enc_convs, self.enc_norms):
            x = conv(x)
            if norm is not None:
                x = norm(x)
            x = self.act_enc(x)
            acts.append(x)
        return acts

    def flops(self, batch=1):
        h = self.config.input_size[0]
        total = 0
        size = h
        for conv in self.enc_convs:
            f, size, _ = conv.flops(size, size)
            total += f
        for conv in self.dec_convs:
            f, size, _ = conv.flops(size, size)
            total += f
        return total * batch


class PatchDiscriminator(Module):
    """Scores each of k x k non-overlapping patches independently.

    The same conv stack (no normalization, so each patch's score depends on
    that patch alone in every mode) runs on all patches; the last conv
    collapses the remaining spatial extent to 1x1 and a sigmoid maps to (0,1).
    """

    def __init__(self, config: PatchDiscriminatorConfig, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.config = config
        h, _w, c = config.input_size
        patch = h // config.k
        layers = []
        in_ch = c
        size = patch
        for i in range(config.conv_layers - 1):
            out_ch = config.base_channels * 2 ** i
            layers += [Conv2d(in_ch, out_ch, 4, stride=2, pad=1, rng=rng), LeakyReLU(0.2)]
            in_ch = out_ch
            size //= 2
        layers += [Conv2d(in_ch, 1, size, stride=1, pad=0, rng=rng), Sigmoid()]
        self.stack = Sequential(*layers)

    def forward(self, x):
        squeeze = x.ndim == 3
        if squeeze:
            x = engine.reshape(x, (1,) + x.shape)
        k = self.config.k
        n, _c, h, w = x.shape
        if h % k or w % k:
            raise ShapeError(f"input {h}x{w} not divisible into a {k}x{k} patch grid")
        ph, pw = h // k, w // k
        patches = [
            x[:, :, a * ph : (a + 1) * ph, b * pw : (b + 1) * pw]
            for a in range(k)
            for b in range(k)
        ]
        stacked = engine.concat(patches, axis=0) if len(patches) > 1 else patches[0]
        scores = self.stack(stacked)  # (k*k*n, 1, 1, 1)
        out = engine.reshape(scores, (k, k, n))
        out = engine.transpose(out, (2, 0, 1))
        if squeeze:
            out = engine.reshape(out, (k, k))
        return out

    def flops(self, batch=1):
        h = self.config.input_size[0]
        size = h // self.config.k
        total = 0
        for m in self.stack.mods:
            if isinstance(m, Conv2d):
                f, size, _ = m.flops(size, size)
                total += f
        return total * self.config.k ** 2 * batch


class FeatureDiscriminator(Module):
    """Two fully connected layers and a sigmoid: feature vector -> (0,1)."""

    def __init__(self, config: FeatureDiscriminatorConfig, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.config = config
        self.fc1 = Linear(config.feature_dim, config.hidden_dim, rng=rng)
        self.act = LeakyReLU(0.2)
        self.fc2 = Linear(config.hidden_dim, 1, rng=rng)
        self.out_act = Sigmoid()

    def forward(self, feat):
        squeeze = feat.ndim == 1
        if squeeze:
            feat = engine.reshape(feat, (1, -1))
        if feat.shape[1] != self.config.feature_dim:
            raise ShapeError(
                f"feature length {feat.shape[1]} does not match configured {self.config.feature_dim}"
            )
        p = self.out_act(self.fc2(self.act(self.fc1(feat))))
        p = engine.reshape(p, (-1,))
        if squeeze:
            p = engine.reshape(p, ())
        return p


class FeatureExtractor(Module):
    """Small conv classifier whose penultimate layer is the identity feature.

    Stays frozen during adversarial training: parameters receive no updates
    and batch statistics are the running averages captured at pretraining,
    while gradients still flow through to the generator.
    """

    def __init__(self, config: FeatureExtractorConfig, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.config = config
        h, w, c = config.input_size
        b = config.base_channels
        self.conv1 = Conv2d(c, b, 4, stride=2, pad=1, rng=rng)
        self.conv2 = Conv2d(b, 2 * b, 4, stride=2, pad=1, rng=rng)
        self.bn2 = BatchNorm2d(2 * b)
        self.conv3 = Conv2d(2 * b, 4 * b, 4, stride=2, pad=1, rng=rng)
        self.bn3 = BatchNorm2d(4 * b)
        self.conv4 = Conv2d(4 * b, 4 * b, 4, stride=2, pad=1, rng=rng)
        self.bn4 = BatchNorm2d(4 * b)
        self.act = LeakyReLU(0.2)
        self.fc_feat = Linear(4 * b * (h // 16) * (w // 16), config.feature_dim, rng=rng)
        self.head = Linear(config.feature_dim, config.n_classes, rng=rng) if config.n_classes else None
        self.frozen = False

    def features(self, x):
        if x.ndim == 3:
            x = engine.reshape(x, (1,) + x.shape)
        x = self.act(self.conv1(x))
        x = self.act(self.bn2(self.conv2(x)))
        x = self.act(self.bn3(self.conv3(x)))
        x = self.act(self.bn4(self.conv4(x)))
        x = engine.reshape(x, (x.shape[0], -1))
        return self.fc_feat(x)

    def forward(self, x):
        feats = self.features(x)
        if self.head is None:
            return feats
        return self.head(feats)

    def freeze(self):
        super().freeze()
        self.eval()
        self.frozen = True
        return self


def extract_feature(extractor: FeatureExtractor, image):
    """Fixed-length feature of an image (or batch), inference statistics."""
    was_training = extractor.training
    extractor.eval()
    try:
        squeeze = image.ndim == 3
        feats = extractor.features(image)
        if squeeze:
            feats = engine.reshape(feats, (-1,))
        return feats
    finally:
        if was_training and not extractor.frozen:
            extractor.train()


@dataclass
class BlanConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    patch_disc: PatchDiscriminatorConfig = field(default_factory=PatchDiscriminatorConfig)
    feature_disc: FeatureDiscriminatorConfig = field(default_factory=FeatureDiscriminatorConfig)
    extractor: FeatureExtractorConfig = field(default_factory=FeatureExtractorConfig)

    @classmethod
    def for_size(cls, size, n_classes=0, k=defaults.PATCH_GRID,
                 base_channels=defaults.BASE_CHANNELS, skip_connections=True):
        shape = (size, size, 3)
        return cls(
            generator=GeneratorConfig(input_size=shape, base_channels=base_channels,
                                      skip_connections=skip_connections),
            patch_disc=PatchDiscriminatorConfig(k=k, input_size=shape),
            feature_disc=FeatureDiscriminatorConfig(),
            extractor=FeatureExtractorConfig(input_size=shape, n_classes=n_classes),
        )


class BlanModel:
    """The generator, the two discriminators and the frozen extractor.

    Parameter sets are disjoint by construction; optimizers are built per
    network so a step on one can never touch another.
    """

    def __init__(self, config: BlanConfig, seed=0, extractor: FeatureExtractor | None = None):
        self.config = config
        ss = np.random.SeedSequence(entropy=(int(seed), 0xB1A))
        rng_g, rng_dp, rng_df, rng_f = (np.random.default_rng(s) for s in ss.spawn(4))
        self.G = Generator(config.generator, rng=rng_g)
        self.D_p = PatchDiscriminator(config.patch_disc, rng=rng_dp)
        self.D_f = FeatureDiscriminator(config.feature_disc, rng=rng_df)
        self.F = extractor if extractor is not None else FeatureExtractor(config.extractor, rng=rng_f)

    def networks(self):
        return {"G": self.G, "D_p": self.D_p, "D_f": self.D_f, "F": self.F}

    def remove_makeup(self, image):
        """Generator forward in inference mode (frozen batch statistics)."""
        was_training = self.G.training
        self.G.eval()
        try:
            with engine.no_grad():
                return self.G(image)
        finally:
            if was_training:
                self.G.train()


# -- checkpoint format -------------------------------------------------------
#
# little-endian binary: magic "BLAN", u32 format version, then entries of
# (u32 name length, name bytes, u32 scalar count, count x f32), and a trailing
# CRC32 over everything before it. Integer-valued entries ("config", "meta")
# are u32 words bit-cast to f32 so the 4-byte layout is uniform.

CHECKPOINT_MAGIC = b"BLAN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _entry_bytes(name, values):
    name_b = name.encode("utf-8")
    arr = np.ascontiguousarray(values, dtype="<f4")
    return (
        np.uint32(len(name_b)).tobytes()
        + name_b
        + np.uint32(arr.size).tobytes()
        + arr.tobytes()
    )


def write_checkpoint(path, entries):
    """entries: ordered list of (name, 1-d float32 array)."""
    blob = CHECKPOINT_MAGIC + np.uint32(CHECKPOINT_VERSION).tobytes()
    for name, values in entries:
        blob += _entry_bytes(name, values)
    blob += np.uint32(zlib.crc32(blob) & 0xFFFFFFFF).tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def read_checkpoint(path):
    """Returns the ordered entry dict; verifies magic, version and CRC."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    stored_crc = int(np.frombuffer(blob[-4:], dtype="<u4")[0])
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointError(f"{path}: CRC mismatch (corrupt checkpoint)")
    entries = {}
    pos = 8
    end = len(blob) - 4
    while pos < end:
        if pos + 4 > end:
            raise CheckpointError(f"{path}: truncated entry header")
        nlen = int(np.frombuffer(blob[pos : pos + 4], dtype="<u4")[0])
        pos += 4
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        count = int(np.frombuffer(blob[pos : pos + 4], dtype="<u4")[0])
        pos += 4
        nbytes = 4 * count
        if pos + nbytes > end:
            raise CheckpointError(f"{path}: truncated data for entry {name!r}")
        entries[name] = np.frombuffer(blob[pos : pos + nbytes], dtype="<f4").copy()
        pos += nbytes
    return entries


def pack_ints(values):
    return np.asarray(values, dtype="<u4").view("<f4")


def unpack_ints(arr):
    return np.ascontiguousarray(arr, dtype="<f4").view("<u4").astype(np.int64)


def network_state_vector(module):
    arrays = module.state_arrays()
    if not arrays:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate([a.reshape(-1).astype(np.float32) for a in arrays])


def load_network_state(module, vec):
    arrays = module.state_arrays()
    total = sum(a.size for a in arrays)
    if vec.size != total:
        raise CheckpointError(
            f"state size mismatch: checkpoint has {vec.size} scalars, network needs {total}"
        )
    pos = 0
    for a in arrays:
        a[...] = vec[pos : pos + a.size].reshape(a.shape).astype(a.dtype)
        pos += a.size
