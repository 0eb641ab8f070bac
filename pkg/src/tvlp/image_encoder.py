"""Multi-image encoder: CNN stem, cross-time transformer, decomposition.

The stem maps each image to a grid of patch tokens. When an earlier image
is present, both token sets (tagged with fixed 2-d sinusoidal positions
and learned time-point vectors) run through shared transformer layers with
full self-attention, and the layer-normalized current half becomes the
progression feature map. Without a prior, a learned missing-image token
stands in. The final representation concatenates static and progression
halves per patch.
"""

import dataclasses
import math

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor


class EncoderConfigError(ValueError):
    pass


@dataclasses.dataclass
class EncoderConfig:
    image_size: int = 64
    grid_size: int = 8
    dim: int = 64                 # patch feature width
    n_layers: int = 2             # cross-time transformer depth
    n_heads: int = 4
    use_temporal_encodings: bool = True
    use_decomposition: bool = True

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise EncoderConfigError("dim must divide evenly across heads")
        if self.dim % 4:
            raise EncoderConfigError("dim must be divisible by 4 for 2-d sinusoids")
        if self.n_layers < 1:
            raise EncoderConfigError("need at least one transformer layer")
        stride = self.image_size / self.grid_size
        if stride < 1 or 2 ** int(math.log2(stride)) != stride:
            raise EncoderConfigError("image_size / grid_size must be a power of two")

    @property
    def n_patches(self):
        return self.grid_size * self.grid_size


def sinusoidal_positions(grid_w, grid_h, dim):
    """Fixed 2-d positional table, one row per cell in row-major (y, x) order.

    The first dim/2 channels encode x, the rest y; each axis interleaves
    sin/cos at geometric frequencies (base 10000). Values lie in [-1, 1]
    and rows are distinct for any reasonable dim.
    """
    if dim % 4:
        raise EncoderConfigError("sinusoidal dim must be divisible by 4")
    half = dim // 2
    n_freq = half // 2
    freqs = 1.0 / (10000.0 ** (np.arange(n_freq) / n_freq))
    table = np.zeros((grid_h * grid_w, dim))
    for y in range(grid_h):
        for x in range(grid_w):
            row = table[y * grid_w + x]
            row[0:half:2] = np.sin(x * freqs)
            row[1:half:2] = np.cos(x * freqs)
            row[half::2] = np.sin(y * freqs)
            row[half + 1::2] = np.cos(y * freqs)
    return table


class _ResidualBlock(nn.Module):
    def __init__(self, channels, rng):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, rng, padding=1)

    def __call__(self, x):
        h = self.conv2(T.relu(self.conv1(x)))
        return T.relu(T.add(x, h))


class Stem(nn.Module):
    """Small residual CNN downsampling images to the patch grid."""

    def __init__(self, config, rng):
        super().__init__()
        stages = int(math.log2(config.image_size // config.grid_size))
        widths = [min(config.dim, 8 * 2 ** i) for i in range(stages)]
        self.downs = nn.ModuleList([
            nn.Conv2d(1 if i == 0 else widths[i - 1], widths[i], 3, rng,
                      stride=2, padding=1)
            for i in range(stages)
        ])
        self.res = _ResidualBlock(widths[0], rng)
        self.proj = nn.Conv2d(widths[-1], config.dim, 1, rng)
        self.config = config

    def __call__(self, images):
        """images: (B, H, W) in [0, 1] -> patch tokens (B, L, dim)."""
        cfg = self.config
        if images.ndim == 2:
            images = T.reshape(images, (1,) + images.shape)
        if images.shape[1:] != (cfg.image_size, cfg.image_size):
            raise EncoderConfigError(
                f"expected {cfg.image_size}x{cfg.image_size} images, got {images.shape[1:]}")
        x = T.reshape(images, (images.shape[0], 1) + images.shape[1:])
        for i, down in enumerate(self.downs):
            x = T.relu(down(x))
            if i == 0:
                x = self.res(x)
        x = self.proj(x)
        b = x.shape[0]
        x = T.reshape(x, (b, cfg.dim, cfg.n_patches))
        return T.transpose(x, (0, 2, 1))


class TemporalFusion(nn.Module):
    """Shared transformer over the concatenated two-time-point token set."""

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList([
            nn.TransformerLayer(config.dim, config.n_heads, 4 * config.dim, rng)
            for _ in range(config.n_layers)
        ])
        self.final_norm = nn.LayerNorm(config.dim)
        self.positions = sinusoidal_positions(config.grid_size, config.grid_size,
                                              config.dim)

    def __call__(self, tokens_a, tokens_b, t_a, t_b, capture=None):
        """Fuse two (B, L, dim) token maps; returns both halves, normalized.

        t_a / t_b are the per-time-point encodings added (with the fixed
        positional table) before the tokens are concatenated; swapping the
        (tokens, encoding) pairs swaps the output halves exactly.
        """
        pos = Tensor(self.positions)
        xa = T.add(T.add(tokens_a, pos), t_a)
        xb = T.add(T.add(tokens_b, pos), t_b)
        x = T.concatenate([xa, xb], axis=1)
        for layer in self.layers:
            x = layer(x, capture=capture)
        x = self.final_norm(x)
        l = self.config.n_patches
        return x[:, :l, :], x[:, l:, :]


@dataclasses.dataclass
class DecomposedImageRepresentation:
    p_current: object        # Tensor (B, L, dim), from the current image alone
    p_diff: object           # Tensor (B, L, dim), progression features
    v: object                # Tensor (B, L, 2*dim), concatenated representation
    prior_present: bool
    attention: list | None = None   # per-layer (B, heads, 2L, 2L) when captured


class ImageEncoder(nn.Module):
    def __init__(self, config=None, rng=None):
        super().__init__()
        self.config = config or EncoderConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stem = Stem(self.config, rng)
        self.fusion = TemporalFusion(self.config, rng)
        self.time_current = nn.Parameter(
            rng.normal(0.0, nn.EMBED_INIT_SCALE, size=self.config.dim),
            decay_exempt=True, name="time_current")
        self.time_prior = nn.Parameter(
            rng.normal(0.0, nn.EMBED_INIT_SCALE, size=self.config.dim),
            decay_exempt=True, name="time_prior")
        self.missing_prior = nn.Parameter(
            rng.normal(0.0, nn.EMBED_INIT_SCALE, size=self.config.dim),
            decay_exempt=True, name="missing_prior")

    def encode_stem(self, images):
        return self.stem(images)

    def decompose(self, current, prior=None, capture_attention=False):
        """Encode current (and optional prior) images into V = [static; diff]."""
        cfg = self.config
        # the stem always runs on the current batch alone so that the static
        # half is bitwise independent of whether a prior is supplied
        p_current = self.stem(current)
        b = p_current.shape[0]
        capture = [] if capture_attention else None
        if prior is None:
            base = Tensor(np.zeros((b, cfg.n_patches, cfg.dim)))
            p_diff = T.add(base, self.missing_prior)
        else:
            p_prior = self.stem(prior)
            if cfg.use_temporal_encodings:
                t_cur, t_pri = self.time_current, self.time_prior
            else:
                zero = Tensor(np.zeros(cfg.dim))
                t_cur = t_pri = zero
            p_diff, _ = self.fusion(p_current, p_prior, t_cur, t_pri, capture=capture)
        if cfg.use_decomposition or prior is None:
            v = T.concatenate([p_current, p_diff], axis=2)
        else:
            v = T.concatenate([p_diff, p_diff], axis=2)
        return DecomposedImageRepresentation(p_current, p_diff, v, prior is not None,
                                             capture)


def rollout_attention(attention_stack, reference_cell, n_patches, top_fraction=0.10):
    """Trace a reference current-image cell back through fused attention.

    ``attention_stack``: per-layer arrays (heads, 2L, 2L) from a fusion
    forward pass. Per layer the head-average gets an identity added for the
    residual path, everything below the top ``top_fraction`` of entries is
    zeroed, rows are renormalized, and the per-layer matrices are multiplied
    in order. Returns (current_map, prior_map), each of length L.
    """
    if not attention_stack:
        raise EncoderConfigError("no captured attention to roll out")
    size = attention_stack[0].shape[-1]
    if not 0 <= reference_cell < n_patches:
        raise IndexError(f"reference cell {reference_cell} outside [0, {n_patches})")
    rollout = np.eye(size)
    for layer_attn in attention_stack:
        mat = layer_attn.mean(axis=0) + np.eye(size)
        k = max(1, int(math.ceil(top_fraction * mat.size)))
        threshold = np.partition(mat.reshape(-1), mat.size - k)[mat.size - k]
        mat = np.where(mat >= threshold, mat, 0.0)
        mat = mat / mat.sum(axis=1, keepdims=True)
        rollout = mat @ rollout
    row = rollout[reference_cell]
    return row[:n_patches], row[n_patches:]
