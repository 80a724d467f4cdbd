"""Vision-transformer regressor mapping a gridded field to a gridded field.

The input grid is zero-padded on its high edges to a multiple of the patch
size, split into ``p x p`` patches (value channel plus validity-mask
channel), embedded, passed through the encoder blocks and projected back to
``p * p`` cell values per token.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict, field as dc_field
import math

import numpy as np

from . import nn
from .grid import Field


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 16
    embed_dim: int = 64
    heads: int = 8
    blocks: int = 12
    mlp_hidden: int = 256
    channels: int = 2
    use_norm_residual: bool = True
    max_tokens: int = 64
    input_skip: bool = False

    def __post_init__(self):
        for name in ("patch_size", "embed_dim", "heads", "blocks", "mlp_hidden", "max_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.channels not in (1, 2):
            raise ConfigError(f"channels must be 1 or 2, got {self.channels}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    def parameter_count(self) -> int:
        p2 = self.patch_size ** 2
        d, h, dk, dff = self.embed_dim, self.heads, self.head_dim, self.mlp_hidden
        embed = d * p2 * self.channels + d + self.max_tokens * d
        block = 3 * h * d * dk + h * dk * d + d * dff + dff * d
        if self.use_norm_residual:
            block += 4 * d
        return embed + self.blocks * block + d * p2 + p2


@dataclass(frozen=True)
class Scaling:
    """Affine standardization applied to the value channel and the output."""
    input_mean: float = 0.0
    input_std: float = 1.0
    target_mean: float = 0.0
    target_std: float = 1.0


# --------------------------------------------------------------------------
# patches


@dataclass(frozen=True)
class PadInfo:
    rows: int
    cols: int
    padded_rows: int
    padded_cols: int
    patch_size: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.padded_rows // self.patch_size, self.padded_cols // self.patch_size

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw


def pad_info(rows: int, cols: int, p: int) -> PadInfo:
    return PadInfo(rows, cols, -(-rows // p) * p, -(-cols // p) * p, p)


def patches_from_image(img, info: PadInfo):
    """(B, H, W, c) -> (B, n, p*p*c), padding high edges with zeros."""
    B, H, W, c = img.shape
    p = info.patch_size
    padded = np.zeros((B, info.padded_rows, info.padded_cols, c))
    padded[:, :H, :W] = img
    gh, gw = info.grid
    x = padded.reshape(B, gh, p, gw, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, gh * gw, p * p * c)


def image_from_patches(tokens, info: PadInfo, channels: int = 1):
    """Inverse of :func:`patches_from_image`, cropping back to the original extent."""
    B = tokens.shape[0]
    p = info.patch_size
    gh, gw = info.grid
    x = tokens.reshape(B, gh, gw, p, p, channels).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(B, info.padded_rows, info.padded_cols, channels)
    return x[:, :info.rows, :info.cols]


def encode_inputs(values, channels: int = 2, scaling: Scaling = Scaling()):
    """NaN-masked grids (B, H, W) -> model input image (B, H, W, channels)."""
    values = np.asarray(values, dtype=np.float64)
    valid = np.isfinite(values)
    v = np.where(valid, (np.where(valid, values, 0.0) - scaling.input_mean) / scaling.input_std, 0.0)
    if channels == 1:
        return v[..., None]
    return np.stack([v, valid.astype(np.float64)], axis=-1)


def patchify(field: Field, aux_mask_channel: bool = True, p: int = 16):
    """Split a field into flattened patches; invalid cells become 0 in channel 0."""
    img = encode_inputs(field.values[None], 2 if aux_mask_channel else 1)
    info = pad_info(field.spec.rows, field.spec.cols, p)
    return patches_from_image(img, info)[0], info


def unpatchify(patches, info: PadInfo, channels: int = 1):
    """Patches (n, p*p*channels) -> array (rows, cols, channels) on the original extent."""
    return image_from_patches(np.asarray(patches)[None], info, channels)[0]


# --------------------------------------------------------------------------
# parameters


def _xavier(rng, shape, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class PatchEmbedding:
    def __init__(self, cfg: ViTConfig, rng):
        d, k = cfg.embed_dim, cfg.patch_size ** 2 * cfg.channels
        self.w = nn.Parameter("embed.w", _xavier(rng, (d, k), k, d))
        self.b = nn.Parameter("embed.b", np.zeros(d))
        self.pos = nn.Parameter("embed.pos", _xavier(rng, (cfg.max_tokens, d), cfg.max_tokens, d))

    def parameters(self):
        return [self.w, self.b, self.pos]


class EncoderBlock:
    def __init__(self, cfg: ViTConfig, rng, index: int):
        d, h, dk, dff = cfg.embed_dim, cfg.heads, cfg.head_dim, cfg.mlp_hidden
        pre = f"blocks.{index}."
        self.w_q = nn.Parameter(pre + "attn.w_q", _xavier(rng, (h, d, dk), d, dk))
        self.w_k = nn.Parameter(pre + "attn.w_k", _xavier(rng, (h, d, dk), d, dk))
        self.w_v = nn.Parameter(pre + "attn.w_v", _xavier(rng, (h, d, dk), d, dk))
        self.w_o = nn.Parameter(pre + "attn.w_o", _xavier(rng, (h * dk, d), h * dk, d))
        self.w_1 = nn.Parameter(pre + "mlp.w_1", _xavier(rng, (d, dff), d, dff))
        self.w_2 = nn.Parameter(pre + "mlp.w_2", _xavier(rng, (dff, d), dff, d))
        self.norm = cfg.use_norm_residual
        if self.norm:
            self.ln1_g = nn.Parameter(pre + "ln1.gain", np.ones(d))
            self.ln1_b = nn.Parameter(pre + "ln1.bias", np.zeros(d))
            self.ln2_g = nn.Parameter(pre + "ln2.gain", np.ones(d))
            self.ln2_b = nn.Parameter(pre + "ln2.bias", np.zeros(d))

    def parameters(self):
        ps = [self.w_q, self.w_k, self.w_v, self.w_o, self.w_1, self.w_2]
        if self.norm:
            ps += [self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b]
        return ps


# --------------------------------------------------------------------------
# attention


def attention(Q, K, V):
    """Scaled dot-product attention over the last two axes."""
    Kt, _ = nn.transpose(K)
    S, c_s = nn.matmul(Q, Kt)
    S2, c_sc = nn.scale(S, 1.0 / math.sqrt(Q.shape[-1]))
    P, c_p = nn.softmax_rows(S2)
    O, c_o = nn.matmul(P, V)
    return O, (c_s, c_sc, c_p, c_o)


def attention_backward(dO, cache):
    c_s, c_sc, c_p, c_o = cache
    dP, dV = nn.matmul_backward(dO, c_o)
    dS2 = nn.softmax_rows_backward(dP, c_p)
    dS = nn.scale_backward(dS2, c_sc)
    dQ, dKt = nn.matmul_backward(dS, c_s)
    return dQ, nn.transpose_backward(dKt), dV


def multi_head(X, w_q, w_k, w_v, w_o):
    """Multi-head self-attention of ``X`` (..., n, d) with stacked head projections (h, d, d_k)."""
    Xh = X[..., None, :, :]
    Q, c_q = nn.matmul(Xh, w_q)
    K, c_k = nn.matmul(Xh, w_k)
    V, c_v = nn.matmul(Xh, w_v)
    O, c_att = attention(Q, K, V)
    heads = [O[..., i, :, :] for i in range(O.shape[-3])]
    C, c_cat = nn.concat_last_axis(heads)
    out, c_out = nn.matmul(C, w_o)
    return out, (X.shape, c_q, c_k, c_v, c_att, c_cat, c_out)


def multi_head_backward(dout, cache):
    """Returns ``(dX, dW_q, dW_k, dW_v, dW_o)``."""
    xshape, c_q, c_k, c_v, c_att, c_cat, c_out = cache
    dC, dWo = nn.matmul_backward(dout, c_out)
    dO = np.stack(nn.concat_last_axis_backward(dC, c_cat), axis=-3)
    dQ, dK, dV = attention_backward(dO, c_att)
    dXq, dWq = nn.matmul_backward(dQ, c_q)
    dXk, dWk = nn.matmul_backward(dK, c_k)
    dXv, dWv = nn.matmul_backward(dV, c_v)
    dX = (dXq + dXk + dXv).reshape(xshape)
    return dX, dWq, dWk, dWv, dWo


def attention_weights(cache) -> np.ndarray:
    """Softmax attention matrix stored in a :func:`multi_head` cache."""
    return cache[4][2]


# --------------------------------------------------------------------------
# model


def embed(patches, pe: PatchEmbedding):
    """Token embeddings ``patch @ W_p^T + b_p + positional[:n]``."""
    n = patches.shape[-2]
    if n > pe.pos.shape[0]:
        raise ConfigError(f"{n} tokens exceed the positional table of length {pe.pos.shape[0]}")
    Wt, _ = nn.transpose(pe.w.data)
    E, c_e = nn.matmul(patches, Wt)
    return E + pe.b.data + pe.pos.data[:n], (c_e, n)


def embed_backward(dE, cache, pe: PatchEmbedding):
    c_e, n = cache
    _, dWt = nn.matmul_backward(dE, c_e)
    pe.w.grad += nn.transpose_backward(dWt)
    lead = tuple(range(dE.ndim - 2))
    db = dE.sum(axis=lead)
    pe.b.grad += db.sum(axis=0)
    pe.pos.grad[:n] += db


class ViTRegressor:
    def __init__(self, config: ViTConfig = ViTConfig(), seed: int = 0, scaling: Scaling = Scaling()):
        self.config = config
        self.scaling = scaling
        rng = np.random.default_rng(seed)
        p2 = config.patch_size ** 2
        self.embedding = PatchEmbedding(config, rng)
        self.blocks = [EncoderBlock(config, rng, i) for i in range(config.blocks)]
        self.head_w = nn.Parameter("head.w", _xavier(rng, (config.embed_dim, p2), config.embed_dim, p2))
        if config.use_norm_residual and config.input_skip:
            # the network starts as the identity and learns a correction
            self.head_w.data[...] = 0.0
        self.head_b = nn.Parameter("head.b", np.zeros(p2))

    def parameters(self) -> list[nn.Parameter]:
        ps = self.embedding.parameters()
        for blk in self.blocks:
            ps += blk.parameters()
        return ps + [self.head_w, self.head_b]

    def named_parameters(self) -> dict[str, nn.Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- forward / backward on raw arrays

    def _block_forward(self, X, blk: EncoderBlock):
        norm = blk.norm
        c = {}
        if norm:
            h, c["ln1"] = nn.layer_norm(X, blk.ln1_g.data, blk.ln1_b.data)
        else:
            h = X
        a, c["mha"] = multi_head(h, blk.w_q.data, blk.w_k.data, blk.w_v.data, blk.w_o.data)
        X1 = X + a if norm else a
        if norm:
            h2, c["ln2"] = nn.layer_norm(X1, blk.ln2_g.data, blk.ln2_b.data)
        else:
            h2 = X1
        m1, c["m1"] = nn.matmul(h2, blk.w_1.data)
        g, c["gelu"] = nn.gelu(m1)
        m2, c["m2"] = nn.matmul(g, blk.w_2.data)
        return (X1 + m2 if norm else m2), c

    def _block_backward(self, dX2, blk: EncoderBlock, c):
        norm = blk.norm
        dg, dW2 = nn.matmul_backward(dX2, c["m2"])
        blk.w_2.grad += dW2
        dm1 = nn.gelu_backward(dg, c["gelu"])
        dh2, dW1 = nn.matmul_backward(dm1, c["m1"])
        blk.w_1.grad += dW1
        if norm:
            dX1, dg2, db2 = nn.layer_norm_backward(dh2, c["ln2"])
            blk.ln2_g.grad += dg2
            blk.ln2_b.grad += db2
            dX1 = dX1 + dX2
        else:
            dX1 = dh2
        dh, dWq, dWk, dWv, dWo = multi_head_backward(dX1, c["mha"])
        blk.w_q.grad += dWq
        blk.w_k.grad += dWk
        blk.w_v.grad += dWv
        blk.w_o.grad += dWo
        if norm:
            dX, dg1, db1 = nn.layer_norm_backward(dh, c["ln1"])
            blk.ln1_g.grad += dg1
            blk.ln1_b.grad += db1
            return dX + dX1
        return dh

    def forward_batch(self, values):
        """Predict grids for a batch of NaN-masked input grids (B, H, W)."""
        values = np.asarray(values, dtype=np.float64)
        cfg, sc = self.config, self.scaling
        B, H, W = values.shape
        info = pad_info(H, W, cfg.patch_size)
        patches = patches_from_image(encode_inputs(values, cfg.channels, sc), info)
        X, c_emb = embed(patches, self.embedding)
        c_blocks = []
        for blk in self.blocks:
            X, c = self._block_forward(X, blk)
            c_blocks.append(c)
        T, c_head = nn.matmul(X, self.head_w.data)
        T = T + self.head_b.data
        out = image_from_patches(T, info)[..., 0]
        if cfg.use_norm_residual and cfg.input_skip:
            # residual around the whole network: predict a correction to the scaled input
            out = out + encode_inputs(values, 1, sc)[..., 0]
        pred = out * sc.target_std + sc.target_mean
        return pred, (info, c_emb, c_blocks, c_head)

    def backward(self, dpred, cache):
        """Accumulate parameter gradients given dLoss/dpred of shape (B, H, W)."""
        info, c_emb, c_blocks, c_head = cache
        dout = np.asarray(dpred) * self.scaling.target_std
        dT = patches_from_image(dout[..., None], info)
        self.head_b.grad += dT.sum(axis=(0, 1))
        dX, dWh = nn.matmul_backward(dT, c_head)
        self.head_w.grad += dWh
        for blk, c in zip(reversed(self.blocks), reversed(c_blocks)):
            dX = self._block_backward(dX, blk, c)
        embed_backward(dX, c_emb, self.embedding)

    def predict(self, values, batch_size: int = 32):
        values = np.asarray(values, dtype=np.float64)
        outs = [self.forward_batch(values[i:i + batch_size])[0]
                for i in range(0, len(values), batch_size)]
        return np.concatenate(outs, axis=0)


def forward(field: Field, model: ViTRegressor) -> Field:
    """Predict a fully valid concentration field from a (possibly gappy) input field."""
    pred, _ = model.forward_batch(field.values[None])
    return Field(field.spec, pred[0], np.ones(field.spec.shape, dtype=bool))
