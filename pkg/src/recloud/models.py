"""Learnable components: global point encoder, patch-token transformer
encoder/decoder, positional embeddings, and the reconstruction heads.

Every component is built from the autograd primitives, takes an explicit
construction RNG (so initialization is reproducible), and runs on a single
sample (no batch axis); the trainer accumulates gradients across samples.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corruption import MaskPlan
from .geometry import PatchSet
from .layers import Linear, Module, Parameter, TransformerBlock, mlp_chain, run_mlp


@dataclass(frozen=True)
class PointNetEncoderConfig:
    """Widths of the shared per-point MLP; the last width is the feature dim."""

    widths: tuple[int, ...] = (3, 64, 128, 64)

    def __post_init__(self):
        if len(self.widths) < 2 or self.widths[0] != 3:
            raise ValueError(f"widths must start at 3 with at least one layer, got {self.widths}")
        if any(w <= 0 for w in self.widths):
            raise ValueError("widths must be positive")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


@dataclass(frozen=True)
class TransformerConfig:
    feature_dim: int = 64
    encoder_depth: int = 4
    decoder_depth: int = 2
    num_heads: int = 4
    ffn_mult: int = 4
    num_patches: int = 16
    patch_size: int = 16
    mask_ratio: float = 0.6
    pe_hidden: int = 128
    token_hidden: int = 128
    fc_hidden: int = 256
    fold_hidden: int = 64

    def __post_init__(self):
        if self.decoder_depth >= self.encoder_depth:
            raise ValueError(
                f"decoder depth {self.decoder_depth} must be smaller than "
                f"encoder depth {self.encoder_depth}")
        if self.feature_dim % self.num_heads:
            raise ValueError(f"feature dim {self.feature_dim} not divisible by "
                             f"{self.num_heads} heads")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask ratio must be in (0, 1), got {self.mask_ratio}")


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class PointNetEncoder(Module):
    """Shared per-point MLP followed by a max pool over all points (Eq.-4 style
    global feature); permutation-invariant by construction."""

    def __init__(self, config: PointNetEncoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.layers = mlp_chain(config.widths, rng, dtype)

    def __call__(self, points) -> Tensor:
        x = _as_tensor(points, self.dtype)  # (w, 3)
        feat = run_mlp(self.layers, x)      # (w, d)
        return ag.max_pool_over_axis(feat, axis=0)  # (d,)


class TokenEmbedder(Module):
    """Per-patch PointNet: shared MLP on coordinates, max pool across the k
    neighbors. Input patches must be center-normalized."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.dtype = dtype
        self.layers = mlp_chain((3, hidden, dim), rng, dtype)

    def __call__(self, patches) -> Tensor:
        if isinstance(patches, PatchSet):
            raise TypeError("pass PatchSet.patches after normalization, not the PatchSet")
        x = _as_tensor(patches, self.dtype)
        n, k, _ = x.shape
        flat = ag.reshape(x, (n * k, 3))
        feat = ag.reshape(run_mlp(self.layers, flat), (n, k, -1))
        return ag.max_pool_over_axis(feat, axis=1)  # (n, d)


def embed_tokens(embedder: TokenEmbedder, patches: PatchSet) -> Tensor:
    """Tokenize a normalized patch set; rejects unnormalized input."""
    if not patches.normalized:
        raise ValueError("token embedding requires center-normalized patches")
    return embedder(patches.patches)


class PositionalEmbed(Module):
    """Learnable MLP from 3-D centers to the model dim.

    The final layer is zero-initialized so embeddings start at zero; the
    encoder and decoder each own an independent instance.
    """

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.dtype = dtype
        self.fc1 = Linear(3, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype, zero_init=True)

    def __call__(self, centers) -> Tensor:
        x = _as_tensor(centers, self.dtype)
        return self.fc2(ag.gelu(self.fc1(x)))


class TransformerEncoder(Module):
    """Stack of pre-norm blocks; the positional embedding is added to the
    block input at every block (patch coordinates are normalized, so the
    tokens carry no absolute position themselves)."""

    def __init__(self, dim: int, depth: int, heads: int, ffn_mult: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.blocks = [TransformerBlock(dim, heads, ffn_mult, rng, dtype)
                       for _ in range(depth)]

    def __call__(self, tokens: Tensor, pe: Tensor) -> Tensor:
        x = tokens
        for block in self.blocks:
            x = block(ag.add(x, pe))
        return x


class PatchDecoder(Module):
    """Transformer decoder over the full n-token sequence.

    Visible positions carry encoded tokens, masked positions carry the
    duplicated learnable mask token; its own positional embedding is added
    per block. Returns the masked rows in ascending masked-index order.
    """

    def __init__(self, dim: int, depth: int, heads: int, ffn_mult: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.dim = dim
        self.dtype = dtype
        self.mask_token = Parameter(rng.normal(0.0, 0.02, size=(1, dim)).astype(dtype))
        self.blocks = [TransformerBlock(dim, heads, ffn_mult, rng, dtype)
                       for _ in range(depth)]

    def assemble(self, encoded: Tensor, plan: MaskPlan) -> Tensor:
        n = plan.total_count
        if encoded.shape[0] != len(plan.visible):
            raise ValueError(
                f"plan has {len(plan.visible)} visible positions but got "
                f"{encoded.shape[0]} encoded tokens")
        vis = ag.scatter_rows(encoded, plan.visible, n)
        m = plan.masked_count
        if m == 0:
            return vis
        ones = Tensor(np.ones((m, 1), dtype=self.dtype))
        dup = ag.matmul(ones, self.mask_token.tensor)  # (m, d), one stored vector
        return ag.add(vis, ag.scatter_rows(dup, plan.masked, n))

    def __call__(self, encoded: Tensor, pe_all: Tensor, plan: MaskPlan) -> Tensor:
        if pe_all.shape[0] != plan.total_count:
            raise ValueError(
                f"decoder PE covers {pe_all.shape[0]} positions, plan has {plan.total_count}")
        x = self.assemble(encoded, plan)
        for block in self.blocks:
            x = block(ag.add(x, pe_all))
        return ag.gather_rows(x, plan.masked)

    def decode_all(self, encoded: Tensor, pe_all: Tensor) -> Tensor:
        """Run the decoder with no masked slots and return every position
        (used when masking is disabled and all patches are reconstructed)."""
        x = encoded
        for block in self.blocks:
            x = block(ag.add(x, pe_all))
        return x


class FCDecoder(Module):
    """Fully connected head: feature vector to an (out_points, 3) cloud."""

    def __init__(self, in_dim: int, out_points: int, hidden: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.out_points = out_points
        self.dtype = dtype
        self.layers = mlp_chain((in_dim, hidden, 3 * out_points), rng, dtype)

    def __call__(self, feature: Tensor) -> Tensor:
        if feature.data.ndim == 1:
            feature = ag.reshape(feature, (1, feature.shape[0]))
        flat = run_mlp(self.layers, feature)  # (1, 3w)
        return ag.reshape(flat, (self.out_points, 3))


def folding_grid(k: int) -> np.ndarray:
    """k seeds on the smallest near-square grid covering k.

    Coordinates span [-0.5, 0.5] per axis, row-major, truncated to k.
    """
    rows = int(np.ceil(np.sqrt(k)))
    cols = int(np.ceil(k / rows))
    u = np.linspace(-0.5, 0.5, rows)
    v = np.linspace(-0.5, 0.5, cols)
    grid = np.stack(np.meshgrid(u, v, indexing="ij"), axis=-1).reshape(-1, 2)
    return grid[:k]


class FoldDecoder(Module):
    """Folding head: deform a canonical 2-D grid conditioned on each feature
    row through one shared MLP pass."""

    def __init__(self, feat_dim: int, points_per_patch: int, hidden: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.points_per_patch = points_per_patch
        self.dtype = dtype
        self.grid = folding_grid(points_per_patch).astype(dtype)
        self.layers = mlp_chain((feat_dim + 2, hidden, hidden, 3), rng, dtype)

    def __call__(self, features: Tensor) -> Tensor:
        if features.data.ndim == 1:
            features = ag.reshape(features, (1, features.shape[0]))
        m = features.shape[0]
        k = self.points_per_patch
        rep = ag.gather_rows(features, np.repeat(np.arange(m), k))   # (m*k, d)
        seeds = Tensor(np.tile(self.grid, (m, 1)))                   # (m*k, 2)
        x = ag.concat([seeds, rep], axis=1)
        pts = run_mlp(self.layers, x)                                # (m*k, 3)
        return ag.reshape(pts, (m, k, 3))


class PatchFCHead(Module):
    """Per-token fully connected head: each d-vector to a (k, 3) patch."""

    def __init__(self, feat_dim: int, points_per_patch: int, hidden: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.points_per_patch = points_per_patch
        self.layers = mlp_chain((feat_dim, hidden, 3 * points_per_patch), rng, dtype)

    def __call__(self, features: Tensor) -> Tensor:
        m = features.shape[0]
        flat = run_mlp(self.layers, features)  # (m, 3k)
        return ag.reshape(flat, (m, self.points_per_patch, 3))


def pool_tokens(encoded: Tensor, kind: str = "max") -> Tensor:
    """Merge token rows into a single feature vector."""
    if kind == "max":
        return ag.max_pool_over_axis(encoded, axis=0)
    if kind == "mean":
        return ag.mean_pool_over_axis(encoded, axis=0)
    raise ValueError(f"unknown pooling {kind!r}")


class GlobalCenterHead(Module):
    """Pool the visible encoded tokens and predict all n patch centers."""

    def __init__(self, dim: int, num_centers: int, rng: np.random.Generator,
                 decoder: str = "fc", fc_hidden: int = 256, fold_hidden: int = 64,
                 pool: str = "max", dtype=np.float32):
        self.pool = pool
        if decoder == "fc":
            self.head = FCDecoder(dim, num_centers, fc_hidden, rng, dtype)
        elif decoder == "fold":
            self.head = FoldDecoder(dim, num_centers, fold_hidden, rng, dtype)
        else:
            raise ValueError(f"unknown center decoder {decoder!r}")
        self._is_fold = decoder == "fold"
        self.num_centers = num_centers

    def __call__(self, encoded: Tensor) -> Tensor:
        pooled = pool_tokens(encoded, self.pool)
        out = self.head(pooled)
        if self._is_fold:
            out = ag.reshape(out, (self.num_centers, 3))
        return out


class CloudAutoencoder(Module):
    """Whole-cloud autoencoder: global encoder plus a cloud decoder.

    Reconstructs a fixed-size cloud from the (masked, transformed) input;
    the decoder is either fully connected or folding-based.
    """

    def __init__(self, encoder_config: PointNetEncoderConfig, num_points: int,
                 decoder: str = "fc", fc_hidden: int = 256, fold_hidden: int = 64,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_points = num_points
        self.dtype = dtype
        self.encoder = PointNetEncoder(encoder_config, rng, dtype)
        if decoder == "fc":
            self.decoder = FCDecoder(encoder_config.feature_dim, num_points, fc_hidden, rng, dtype)
        elif decoder == "fold":
            self.decoder = FoldDecoder(encoder_config.feature_dim, num_points, fold_hidden, rng, dtype)
        else:
            raise ValueError(f"unknown decoder {decoder!r}")
        self._is_fold = decoder == "fold"

    def reconstruct(self, visible_points) -> Tensor:
        feature = self.encoder(visible_points)
        out = self.decoder(feature)
        if self._is_fold:
            out = ag.reshape(out, (self.num_points, 3))
        return out


class PatchAutoencoder(Module):
    """Masked patch autoencoder: token embedding, transformer encoder over
    visible tokens, transformer patch decoder with a duplicated mask token,
    a local patch head, and a pooled global center head.

    Encoder and decoder carry separate positional embeddings because they
    receive transformed and vanilla centers respectively.
    """

    def __init__(self, config: TransformerConfig, rng: np.random.Generator | None = None,
                 whole_points: int | None = None, local_decoder: str = "fold",
                 global_decoder: str = "fc", dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        self.config = c
        self.dtype = dtype
        self.token_embed = TokenEmbedder(c.feature_dim, c.token_hidden, rng, dtype)
        self.pos_embed_encoder = PositionalEmbed(c.feature_dim, c.pe_hidden, rng, dtype)
        self.pos_embed_decoder = PositionalEmbed(c.feature_dim, c.pe_hidden, rng, dtype)
        self.encoder = TransformerEncoder(c.feature_dim, c.encoder_depth, c.num_heads,
                                          c.ffn_mult, rng, dtype)
        self.patch_decoder = PatchDecoder(c.feature_dim, c.decoder_depth, c.num_heads,
                                          c.ffn_mult, rng, dtype)
        if local_decoder == "fold":
            self.local_head = FoldDecoder(c.feature_dim, c.patch_size, c.fold_hidden, rng, dtype)
        elif local_decoder == "fc":
            self.local_head = PatchFCHead(c.feature_dim, c.patch_size, c.fc_hidden, rng, dtype)
        else:
            raise ValueError(f"unknown local decoder {local_decoder!r}")
        self.center_head = GlobalCenterHead(c.feature_dim, c.num_patches, rng,
                                            decoder=global_decoder, fc_hidden=c.fc_hidden,
                                            fold_hidden=c.fold_hidden, dtype=dtype)
        # head for the direct whole-cloud objective variant; built on demand
        self.whole_head = (FCDecoder(c.feature_dim, whole_points, c.fc_hidden, rng, dtype)
                           if whole_points is not None else None)

    def encode_visible(self, visible_patches: PatchSet) -> Tensor:
        """Encoded tokens of the visible (normalized) patches."""
        tokens = embed_tokens(self.token_embed, visible_patches)
        pe = self.pos_embed_encoder(visible_patches.centers)
        return self.encoder(tokens, pe)

    def decode_masked(self, encoded: Tensor, target_centers: np.ndarray,
                      plan: MaskPlan) -> Tensor:
        """Decoded mask tokens guided by the reconstruction-target centers."""
        pe_all = self.pos_embed_decoder(target_centers)
        return self.patch_decoder(encoded, pe_all, plan)

    def predict_masked_patches(self, encoded: Tensor, target_centers: np.ndarray,
                               plan: MaskPlan) -> Tensor:
        """(m, k, 3) normalized patch predictions at the masked positions."""
        return self.local_head(self.decode_masked(encoded, target_centers, plan))

    def predict_all_patches(self, encoded: Tensor, target_centers: np.ndarray) -> Tensor:
        """(n, k, 3) predictions for every patch (no-masking mode)."""
        pe_all = self.pos_embed_decoder(target_centers)
        decoded = self.patch_decoder.decode_all(encoded, pe_all)
        return self.local_head(decoded)

    def predict_centers(self, encoded: Tensor) -> Tensor:
        return self.center_head(encoded)

    def predict_whole(self, encoded: Tensor) -> Tensor:
        if self.whole_head is None:
            raise ValueError("model was built without a whole-cloud head")
        return self.whole_head(pool_tokens(encoded, "max"))

    def encode_all(self, patches: PatchSet) -> Tensor:
        """Encoded tokens for a full (unmasked, uncorrupted) patch set;
        used at probe time."""
        return self.encode_visible(patches)
