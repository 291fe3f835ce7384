# -*- coding: utf-8 -*-

"""
Vision Transformer encoder over time-frequency maps and attention
map extraction.
"""

import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from vibration_dino import tensor as T
from vibration_dino.exceptions import DomainError
from vibration_dino.exceptions import ParseError
from vibration_dino.exceptions import ShapeError

logger = logging.getLogger(__name__)

ATTENTION_MAGIC = b'ATTNMAP1'

LN_EPS = 1e-6


def _trunc_normal(shape, std):
    p = torch.empty(shape)
    nn.init.trunc_normal_(p, std=std, a=-2.0 * std, b=2.0 * std)
    return nn.Parameter(p)


class LayerNorm(nn.Module):
    """
    Layer normalization over the last axis
    """
    def __init__(self, dim):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return T.layer_norm(x, self.gain, self.bias, eps=LN_EPS)


class TransformerBlock(nn.Module):
    """
    Pre-norm block: multi-head self-attention then a GeLU MLP, each
    with a residual connection
    """
    def __init__(self, config):
        super().__init__()
        d = config.embed_dim
        inner = config.n_heads * config.head_dim
        self.n_heads = config.n_heads
        self.head_dim = config.head_dim
        self.ln1 = LayerNorm(d)
        self.w_q = _trunc_normal((d, inner), config.init_std)
        self.w_k = _trunc_normal((d, inner), config.init_std)
        self.w_v = _trunc_normal((d, inner), config.init_std)
        self.w_o = _trunc_normal((inner, d), config.init_std)
        self.ln2 = LayerNorm(d)
        self.w1 = _trunc_normal((d, config.mlp_dim), config.init_std)
        self.b1 = nn.Parameter(torch.zeros(config.mlp_dim))
        self.w2 = _trunc_normal((config.mlp_dim, d), config.init_std)
        self.b2 = nn.Parameter(torch.zeros(d))

    def _split_heads(self, x):
        b, n, _ = x.shape
        return T.transpose(T.reshape(x, (b, n, self.n_heads, self.head_dim)), 1, 2)

    def msa(self, z):
        """
        ``MHA(LN(z), LN(z), LN(z)) + z``

        :param z: ``[B, L, d]`` token sequence
        :return: tuple of the updated sequence and the attention
                 weights ``[B, h, L, L]``
        """
        u = self.ln1(z)
        q = self._split_heads(T.matmul(u, self.w_q))
        k = self._split_heads(T.matmul(u, self.w_k))
        v = self._split_heads(T.matmul(u, self.w_v))
        logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(self.head_dim))
        attn = T.softmax(logits, axis=-1)
        heads = T.matmul(attn, v)
        b, _, n, _ = heads.shape
        merged = T.reshape(T.transpose(heads, 1, 2), (b, n, self.n_heads * self.head_dim))
        return T.add(T.matmul(merged, self.w_o), z), attn

    def mlp_block(self, z_msa):
        """
        ``GeLU(LN(z) W1 + b1) W2 + b2 + z``
        """
        u = self.ln2(z_msa)
        hidden = T.gelu(T.add(T.matmul(u, self.w1), self.b1))
        return T.add(T.add(T.matmul(hidden, self.w2), self.b2), z_msa)

    def forward(self, z):
        z, attn = self.msa(z)
        return self.mlp_block(z), attn


class VisionTransformer(nn.Module):
    """
    Patch embedding, class token, learned position encoding, a stack
    of :py:class:`TransformerBlock` and a final layer norm applied to
    the class token

    :param config: structure of the encoder
    :type config: :py:class:`~vibration_dino.config.ViTConfig`
    :param image_size: side of the square input maps
    :type image_size: int
    :param in_channels: input channels
    """
    def __init__(self, config, image_size, in_channels=3):
        super().__init__()
        if image_size % config.patch_size != 0:
            raise ShapeError('image_size ' + str(image_size) +
                             ' is not divisible by patch_size ' + str(config.patch_size))
        self.config = config
        self.image_size = image_size
        self.in_channels = in_channels
        self.patch_size = config.patch_size
        self.n_patches = (image_size // config.patch_size) ** 2
        d = config.embed_dim
        self.w_emd = _trunc_normal((config.patch_size ** 2 * in_channels, d), config.init_std)
        self.x_class = _trunc_normal((d,), config.init_std)
        self.e_pos = _trunc_normal((self.n_patches + 1, d), config.init_std)
        self.blocks = nn.ModuleList([TransformerBlock(config) for _ in range(config.depth)])
        self.ln = LayerNorm(d)

    @property
    def embed_dim(self):
        return self.config.embed_dim

    def patchify(self, x):
        """
        ``[B, H, W, C] -> [B, N, P*P*C]`` with patches in row-major
        order over the patch grid
        """
        b, h, w, c = x.shape
        p = self.patch_size
        if h % p != 0 or w % p != 0:
            raise ShapeError('Input ' + str((h, w)) + ' is not divisible by patch size ' + str(p))
        x = T.reshape(x, (b, h // p, p, w // p, p, c))
        x = x.permute(0, 1, 3, 2, 4, 5)
        return T.reshape(x, (b, (h // p) * (w // p), p * p * c))

    def patch_embed(self, x):
        """
        ``z0 = [x_class; x_p W_emd] + E_pos``

        :param x: ``[B, H, W, C]``
        :return: ``[B, N + 1, d]``
        """
        patches = self.patchify(x)
        if patches.shape[1] != self.n_patches:
            raise ShapeError('Input gives ' + str(patches.shape[1]) + ' patches, encoder expects ' +
                             str(self.n_patches))
        tokens = T.matmul(patches, self.w_emd)
        cls = self.x_class.expand(x.shape[0], 1, -1)
        return T.add(T.concat([cls, tokens], axis=1), self.e_pos)

    def forward_tokens(self, z, return_attention=False):
        """
        Runs the block stack on an embedded sequence and returns the
        normalized class token ``[B, d]``
        """
        attentions = []
        for block in self.blocks:
            z, attn = block(z)
            attentions.append(attn)
        y = self.ln(z[:, 0])
        if return_attention:
            return y, attentions
        return y

    def forward(self, x, return_attention=False):
        single = x.dim() == 3
        if single:
            x = x.unsqueeze(0)
        res = self.forward_tokens(self.patch_embed(x), return_attention=return_attention)
        if single:
            if return_attention:
                return res[0][0], [a[0] for a in res[1]]
            return res[0]
        return res


def to_input(maps):
    """
    Stacks :py:class:`~vibration_dino.tfm.TimeFrequencyMap` objects
    (or one of them) into a ``[B, H, W, C]`` tensor in the default
    precision
    """
    if hasattr(maps, 'pixels'):
        maps = [maps]
    arr = np.stack([np.asarray(m.pixels) for m in maps], axis=0)
    return torch.as_tensor(arr, dtype=torch.get_default_dtype())


def encode(x, model):
    """
    Feature vector ``y = LN(z_depth[0])`` of one map, or ``[B, d]`` for
    a batch

    :param x: map(s) or an input tensor
    :param model: encoder
    :type model: :py:class:`VisionTransformer`
    """
    if not isinstance(x, torch.Tensor):
        single = hasattr(x, 'pixels')
        y = model(to_input(x))
        return y[0] if single else y
    return model(x)


@dataclass(eq=False)
class AttentionMaps:
    """
    Last-block attention of one input. ``cam`` is ``h x N``, ``tam``
    is a boolean mask of length ``N``, ``eam`` is ``h x (N+1) x (N+1)``.
    """
    cam: np.ndarray
    tam: np.ndarray
    eam: np.ndarray

    @property
    def n_heads(self):
        return self.cam.shape[0]

    @property
    def n_patches(self):
        return self.cam.shape[1]

    def concentration_ratio(self):
        """
        Max over min of the head-averaged class token attention
        """
        mean = self.cam.mean(axis=0)
        return float(mean.max() / max(mean.min(), np.finfo(np.float64).tiny))


def threshold_attention(cam, keep_mass):
    """
    Smallest set of patches, taken greedily by descending head-averaged
    attention, whose mass reaches ``keep_mass``

    :return: boolean mask over patches
    """
    mean = np.asarray(cam, dtype=np.float64).mean(axis=0)
    mean = mean / mean.sum()
    if keep_mass >= 1.0:
        return mean > 0
    order = np.argsort(-mean, kind='stable')
    cumulative = np.cumsum(mean[order])
    count = int(np.searchsorted(cumulative, keep_mass - 1e-12)) + 1
    mask = np.zeros(mean.size, dtype=bool)
    mask[order[:min(count, mean.size)]] = True
    return mask


def extract_attention(x, model, keep_mass=0.9):
    """
    Class token, thresholded and embedding-sequence attention maps of
    the last block

    :param x: a single map
    :type x: :py:class:`~vibration_dino.tfm.TimeFrequencyMap`
    :param keep_mass: attention mass to keep in the thresholded map
    :raises DomainError: unless ``0 < keep_mass <= 1``
    :rtype: :py:class:`AttentionMaps`
    """
    if not 0 < keep_mass <= 1:
        raise DomainError('keep_mass must lie in (0, 1], got ' + str(keep_mass))
    if len(model.blocks) == 0:
        raise ShapeError('Encoder has no transformer blocks to take attention from')
    with torch.no_grad():
        _, attentions = model(to_input(x), return_attention=True)
    eam = attentions[-1][0].detach().cpu().double().numpy()
    cam = eam[:, 0, 1:]
    cam = cam / cam.sum(axis=1, keepdims=True)
    tam = threshold_attention(cam, keep_mass)
    return AttentionMaps(cam=cam, tam=tam, eam=eam)


def write_attention_maps(maps, path):
    """
    Writes the ``ATTNMAP1`` format: magic, u32 h, u32 N, cam (h x N
    f32), tam (N u8), eam (h x (N+1)^2 f32), little-endian
    """
    h, n = maps.cam.shape
    with open(path, 'wb') as f:
        f.write(ATTENTION_MAGIC)
        f.write(struct.pack('<II', h, n))
        f.write(np.ascontiguousarray(maps.cam, dtype='<f4').tobytes())
        f.write(maps.tam.astype(np.uint8).tobytes())
        f.write(np.ascontiguousarray(maps.eam, dtype='<f4').tobytes())


def read_attention_maps(path):
    """
    Reads an ``ATTNMAP1`` file

    :raises ParseError: on bad magic or size
    :rtype: :py:class:`AttentionMaps`
    """
    with open(path, 'rb') as f:
        data = f.read()
    if not data.startswith(ATTENTION_MAGIC):
        raise ParseError(str(path) + ': not an ATTNMAP1 file', offset=0)
    pos = len(ATTENTION_MAGIC)
    if len(data) < pos + 8:
        raise ParseError(str(path) + ': truncated header', offset=len(data))
    h, n = struct.unpack_from('<II', data, pos)
    pos += 8
    expected = pos + 4 * h * n + n + 4 * h * (n + 1) ** 2
    if len(data) != expected:
        raise ParseError(str(path) + ': expected ' + str(expected) + ' bytes, found ' +
                         str(len(data)), offset=min(len(data), expected))
    cam = np.frombuffer(data, dtype='<f4', count=h * n, offset=pos).reshape(h, n)
    pos += 4 * h * n
    tam = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).astype(bool)
    pos += n
    eam = np.frombuffer(data, dtype='<f4', offset=pos).reshape(h, n + 1, n + 1)
    return AttentionMaps(cam=cam.astype(np.float64), tam=tam, eam=eam.astype(np.float64))


def render_attention(tfm, maps, cam_path, tam_path):
    """
    Writes portable pixmaps: the map with the head-averaged class
    token attention blended over it, and the map with patches outside
    the thresholded set darkened
    """
    pixels = np.asarray(tfm.pixels, dtype=np.float64)
    size = pixels.shape[0]
    grid = int(round(math.sqrt(maps.n_patches)))
    patch = size // grid
    mean = maps.cam.mean(axis=0).reshape(grid, grid)
    mean = (mean - mean.min()) / max(mean.max() - mean.min(), 1e-12)
    heat = np.kron(mean, np.ones((patch, patch)))[..., None]
    overlay = 0.5 * pixels + 0.5 * heat * np.array([1.0, 0.0, 0.0])
    mask = np.kron(maps.tam.reshape(grid, grid).astype(np.float64), np.ones((patch, patch)))[..., None]
    kept = pixels * (0.25 + 0.75 * mask)
    Image.fromarray((np.clip(overlay, 0, 1) * 255).astype(np.uint8)).save(cam_path, format='PPM')
    Image.fromarray((np.clip(kept, 0, 1) * 255).astype(np.uint8)).save(tam_path, format='PPM')
