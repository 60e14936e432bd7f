"""Vision transformer pieces: sparse encoder, mask-token decoder, and the
two-branch projection head that produces prototype scores.

The encoder consumes only visible tokens (plus the class token); masked
positions are reintroduced in the decoder as a learned mask-token
embedding. Positional embeddings are fixed 2-D sine-cosine, looked up by
original patch index, so a patch embeds identically no matter which other
patches are visible.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, concat, gelu, l2_normalize, layernorm, softmax


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    decoder_depth: int = 2
    decoder_dim: int = 64
    drop_path_rate: float = 0.0
    hierarchical_layers: tuple = None  # 1-based block indices, must include depth

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    def validate(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by "
                f"patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by "
                f"num_heads {self.num_heads}")
        if self.embed_dim % 4 != 0 or self.decoder_dim % 4 != 0:
            raise ConfigError("embed dims must be divisible by 4 for 2-D "
                              "sine-cosine positional embeddings")
        if self.hierarchical_layers is not None:
            ls = tuple(self.hierarchical_layers)
            if any(l < 1 or l > self.depth for l in ls) or self.depth not in ls:
                raise ConfigError(
                    f"hierarchical_layers {ls} must be 1-based block indices "
                    f"<= depth and include the final block {self.depth}")
        if not 0.0 <= self.drop_path_rate <= 1.0:
            raise ConfigError(f"drop_path_rate {self.drop_path_rate} not in [0, 1]")


@dataclass
class ProjectionHeadConfig:
    num_shared_layers: int = 2
    hidden_dim: int = 2048
    output_dim: int = 4096


# -- patch <-> image -----------------------------------------------------------

def patchify(image, patch_size):
    """[H, W, C] image -> [N, P*P*C] flattened patches, row-major order."""
    h, w, c = image.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    x = image.reshape(h // p, p, w // p, p, c)
    x = x.transpose(0, 2, 1, 3, 4)  # gh, gw, p, p, c
    return np.ascontiguousarray(x.reshape(h // p * (w // p), p * p * c))


def unpatchify(patches, patch_size, image_size, channels=3):
    """Inverse of `patchify` (bit-exact roundtrip)."""
    p = patch_size
    g = image_size // p
    x = patches.reshape(g, g, p, p, channels)
    x = x.transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(image_size, image_size, channels))


def patchify_batch(images, patch_size):
    """[B, H, W, C] -> [B, N, P*P*C]."""
    b, h, w, c = images.shape
    p = patch_size
    x = images.reshape(b, h // p, p, w // p, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, h // p * (w // p), p * p * c))


# -- positional embeddings -----------------------------------------------------

def sincos_pos_embed(dim, grid):
    """Fixed 2-D sine-cosine positional table, one row per patch index."""
    def axis_embed(pos, d):
        omega = 1.0 / 10000.0 ** (np.arange(d // 2, dtype=np.float64) / (d // 2))
        out = np.einsum("p,f->pf", pos.astype(np.float64), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    emb = np.concatenate(
        [axis_embed(ys.reshape(-1), dim // 2), axis_embed(xs.reshape(-1), dim // 2)],
        axis=1)
    return emb.astype(np.float32)  # [grid*grid, dim]


# -- parameterized layers ------------------------------------------------------

def trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std).astype(np.float32)


class Linear:
    def __init__(self, rng, d_in, d_out, bias=True):
        self.w = Tensor(trunc_normal(rng, (d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out, np.float32), requires_grad=True) if bias else None

    def __call__(self, x):
        # flatten leading dims so the product is one 2-D GEMM; a batched
        # [B, T, d_in] @ [d_in, d_out] would otherwise build a
        # [B, d_in, d_out] temporary in the weight-gradient pass
        lead = x.shape[:-1]
        if len(lead) > 1:
            x = x.reshape((-1, x.shape[-1]))
        y = x @ self.w
        if self.b is not None:
            y = y + self.b
        return y.reshape(lead + (self.w.shape[1],)) if len(lead) > 1 else y

    def params(self):
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out


class LayerNorm:
    def __init__(self, dim, eps=1e-6):
        self.gamma = Tensor(np.ones(dim, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, np.float32), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return layernorm(x, self.gamma, self.beta, self.eps)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}


class Attention:
    def __init__(self, rng, dim, num_heads):
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.proj = Linear(rng, dim, dim)

    def __call__(self, x):
        b, t, d = x.shape
        h, hd = self.num_heads, self.head_dim

        def heads(z):
            return z.reshape(b, t, h, hd).transpose((0, 2, 1, 3))

        q, k, v = heads(self.wq(x)), heads(self.wk(x)), heads(self.wv(x))
        att = softmax(q @ k.transpose((0, 1, 3, 2)) * (1.0 / np.sqrt(hd)), axis=-1)
        out = (att @ v).transpose((0, 2, 1, 3)).reshape(b, t, d)
        return self.proj(out)

    def params(self):
        return {f"{n}.{k}": v for n, m in
                [("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("proj", self.proj)]
                for k, v in m.params().items()}


class Mlp:
    def __init__(self, rng, dim, hidden):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))

    def params(self):
        return {f"fc1.{k}": v for k, v in self.fc1.params().items()} | \
               {f"fc2.{k}": v for k, v in self.fc2.params().items()}


class Block:
    """Pre-norm transformer block with optional stochastic depth."""

    def __init__(self, rng, dim, num_heads, mlp_ratio, drop_path=0.0):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(rng, dim, num_heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio))
        self.drop_path = drop_path

    def _branch_scale(self, batch, train, rng):
        """Per-sample keep mask for stochastic depth, scaled by 1/keep."""
        rate = self.drop_path
        if not train or rate == 0.0:
            return None
        if rate >= 1.0:
            return np.zeros((batch, 1, 1), np.float32)
        keep = 1.0 - rate
        mask = (rng.random(batch) < keep).astype(np.float32) / keep
        return mask.reshape(batch, 1, 1)

    def __call__(self, x, train=False, rng=None):
        for branch in (lambda z: self.attn(self.norm1(z)),
                       lambda z: self.mlp(self.norm2(z))):
            scale = self._branch_scale(x.shape[0], train, rng)
            r = branch(x)
            x = x + (r if scale is None else r * Tensor(scale))
        return x

    def params(self):
        out = {}
        for name, mod in [("norm1", self.norm1), ("attn", self.attn),
                          ("norm2", self.norm2), ("mlp", self.mlp)]:
            for k, v in mod.params().items():
                out[f"{name}.{k}"] = v
        return out


class Encoder:
    """Sparse ViT encoder: embeds only the tokens it is given."""

    def __init__(self, cfg, rng):
        cfg.validate()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = Linear(rng, cfg.patch_size ** 2 * cfg.in_channels, d)
        self.cls_token = Tensor(trunc_normal(rng, (1, 1, d)), requires_grad=True)
        self.pos = sincos_pos_embed(d, cfg.grid)  # fixed, not a parameter
        self.blocks = [Block(rng, d, cfg.num_heads, cfg.mlp_ratio, cfg.drop_path_rate)
                       for _ in range(cfg.depth)]
        self.norm = LayerNorm(d)

    def __call__(self, patches, patch_indices, train=False, rng=None):
        """patches: [B, T, P*P*C] (Tensor or array); patch_indices: [T] ints.

        Returns [B, T+1, D] with the class token at row 0.
        """
        idx = np.asarray(patch_indices, dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= self.cfg.num_patches):
            raise IndexError(f"patch index out of range 0..{self.cfg.num_patches - 1}")
        if not isinstance(patches, Tensor):
            patches = Tensor(patches)
        b = patches.shape[0]
        x = self.patch_embed(patches) + Tensor(self.pos[idx])
        cls = self.cls_token + Tensor(np.zeros((b, 1, self.cfg.embed_dim), np.float32))
        x = concat([cls, x], axis=1)
        picked = []
        want = set(self.cfg.hierarchical_layers or (self.cfg.depth,))
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x, train=train, rng=rng)
            if i in want:
                picked.append(x)
        out = picked[0]
        for extra in picked[1:]:
            out = out + extra
        return self.norm(out)

    def params(self):
        out = {"patch_embed.w": self.patch_embed.w, "patch_embed.b": self.patch_embed.b,
               "cls_token": self.cls_token}
        for i, blk in enumerate(self.blocks):
            for k, v in blk.params().items():
                out[f"blocks.{i}.{k}"] = v
        for k, v in self.norm.params().items():
            out[f"norm.{k}"] = v
        return out


class Decoder:
    """MAE-style decoder: reinserts a learned mask token at masked positions
    and projects back to the encoder embedding dimension."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        dd = cfg.decoder_dim
        self.embed = Linear(rng, cfg.embed_dim, dd)
        self.mask_token = Tensor(trunc_normal(rng, (1, 1, dd)), requires_grad=True)
        self.pos = sincos_pos_embed(dd, cfg.grid)
        self.blocks = [Block(rng, dd, cfg.num_heads, cfg.mlp_ratio)
                       for _ in range(cfg.decoder_depth)]
        self.norm = LayerNorm(dd)
        self.pred = Linear(rng, dd, cfg.embed_dim)  # D_out = encoder D

    def __call__(self, encoded, visible_indices, masked_indices):
        """encoded: [B, V+1, D] from the encoder (class token at row 0).

        Returns [B, N+1, D]: class token at row 0, then all N patch
        positions in canonical order.
        """
        vis = np.asarray(visible_indices, dtype=np.intp)
        msk = np.asarray(masked_indices, dtype=np.intp)
        n = self.cfg.num_patches
        if encoded.shape[1] != vis.size + 1:
            raise ValueError(
                f"encoded rows ({encoded.shape[1]}) do not cover class token "
                f"plus {vis.size} visible tokens")
        b = encoded.shape[0]
        x = self.embed(encoded)
        mask_rows = self.mask_token + Tensor(
            np.zeros((b, msk.size, self.cfg.decoder_dim), np.float32))
        x = concat([x, mask_rows], axis=1)  # [cls, visible..., masked...]
        # reorder rows to [cls, patch 0, ..., patch N-1]
        current = np.concatenate([[-1], vis, msk])  # -1 marks the class row
        perm = np.empty(n + 1, dtype=np.intp)
        order = np.argsort(current)  # class row (-1) sorts first
        perm[:] = order
        x = x.take(perm, axis=1)
        pos = np.concatenate(
            [np.zeros((1, self.cfg.decoder_dim), np.float32), self.pos], axis=0)
        x = x + Tensor(pos)
        for blk in self.blocks:
            x = blk(x)
        return self.pred(self.norm(x))

    def params(self):
        out = {"embed.w": self.embed.w, "embed.b": self.embed.b,
               "mask_token": self.mask_token}
        for i, blk in enumerate(self.blocks):
            for k, v in blk.params().items():
                out[f"blocks.{i}.{k}"] = v
        for k, v in self.norm.params().items():
            out[f"norm.{k}"] = v
        out["pred.w"] = self.pred.w
        out["pred.b"] = self.pred.b
        return out


class ProjectionHead:
    """Shared MLP trunk, then separate final linears for class and patch
    tokens, both projecting to the prototype dimension. The penultimate
    feature is L2-normalized before the final layer."""

    def __init__(self, cfg, rng, in_dim):
        self.cfg = cfg
        dims = [in_dim] + [cfg.hidden_dim] * cfg.num_shared_layers
        self.shared = [Linear(rng, dims[i], dims[i + 1])
                       for i in range(cfg.num_shared_layers)]
        self.class_out = Linear(rng, cfg.hidden_dim, cfg.output_dim, bias=False)
        self.patch_out = Linear(rng, cfg.hidden_dim, cfg.output_dim, bias=False)
        # unit-norm prototype vectors: with the L2-normalized trunk feature
        # this makes the output a cosine similarity per prototype, so the
        # tempered score distribution has usable spread from step one
        for layer in (self.class_out, self.patch_out):
            w = layer.w.data
            w /= np.linalg.norm(w, axis=0, keepdims=True)

    def trunk(self, x):
        for layer in self.shared:
            x = gelu(layer(x))
        return l2_normalize(x, axis=-1)

    def __call__(self, tokens):
        """tokens: [B, T+1, D], class token at row 0.

        Returns (class_scores [B, K_c], patch_scores [B, T, K_c]).
        """
        t = tokens.shape[1]
        feats = self.trunk(tokens)
        cls_feat = feats.take(np.array([0]), axis=1)
        patch_feat = feats.take(np.arange(1, t), axis=1)
        cls_scores = self.class_out(cls_feat).reshape(
            tokens.shape[0], self.cfg.output_dim)
        return cls_scores, self.patch_out(patch_feat)

    def params(self):
        out = {}
        for i, layer in enumerate(self.shared):
            for k, v in layer.params().items():
                out[f"shared.{i}.{k}"] = v
        out["class_out.w"] = self.class_out.w
        out["patch_out.w"] = self.patch_out.w
        return out
