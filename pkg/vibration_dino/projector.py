# -*- coding: utf-8 -*-

"""
Projector head and the encoder plus head model network.
"""

import logging

import torch
import torch.nn as nn

from vibration_dino import tensor as T
from vibration_dino.exceptions import ShapeError
from vibration_dino.vit import VisionTransformer

logger = logging.getLogger(__name__)


class ProjectorHead(nn.Module):
    """
    ``n``-layer MLP with GeLU between layers, L2 normalization of the
    bottleneck and a bias free linear layer whose weight rows are
    renormalized to unit length on every forward pass. Every logit is
    therefore a cosine similarity in [-1, 1].

    :param in_dim: encoder feature width
    :param config: head structure
    :type config: :py:class:`~vibration_dino.config.ProjectorConfig`
    """
    def __init__(self, in_dim, config, init_std=0.02):
        super().__init__()
        self.config = config
        dims = [in_dim] + list(config.head_dims)
        self.layers = nn.ModuleList([nn.Linear(dims[i], dims[i + 1])
                                     for i in range(len(dims) - 1)])
        for layer in self.layers:
            nn.init.trunc_normal_(layer.weight, std=init_std, a=-2.0 * init_std, b=2.0 * init_std)
            nn.init.zeros_(layer.bias)
        self.weight = nn.Parameter(torch.empty(config.out_dim, dims[-1]))
        nn.init.trunc_normal_(self.weight, std=init_std, a=-2.0 * init_std, b=2.0 * init_std)

    @property
    def out_dim(self):
        return self.config.out_dim

    def bottleneck(self, y):
        """
        MLP output before normalization
        """
        if y.shape[-1] != self.layers[0].in_features:
            raise ShapeError('Projector expects features of width ' +
                             str(self.layers[0].in_features) + ', got ' + str(tuple(y.shape)))
        h = y
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = T.gelu(h)
        return h

    def normalized_weight(self):
        """
        Final layer weight with unit L2 norm rows
        """
        return T.l2_normalize(self.weight, axis=1, eps=self.config.l2_eps)

    def logits_from_bottleneck(self, b):
        unit = T.l2_normalize(b, axis=-1, eps=self.config.l2_eps)
        return T.matmul(unit.unsqueeze(-2), T.transpose(self.normalized_weight(), 0, 1)).squeeze(-2)

    def forward(self, y):
        return self.logits_from_bottleneck(self.bottleneck(y))


def project(y, head):
    """
    Pseudo-label logits ``q`` of length ``K`` for feature ``y``
    """
    return head(y)


class DinoNetwork(nn.Module):
    """
    Model network ``q = g(f(x))``: encoder followed by projector head
    """
    def __init__(self, vit_config, projector_config, image_size):
        super().__init__()
        self.encoder = VisionTransformer(vit_config, image_size)
        self.head = ProjectorHead(vit_config.embed_dim, projector_config,
                                  init_std=vit_config.init_std)

    def features(self, x):
        return self.encoder(x)

    def forward(self, x):
        return self.head(self.encoder(x))


def build_network(config, seed):
    """
    Model network for ``config`` with parameters drawn from ``seed``

    :param config: run configuration
    :type config: :py:class:`~vibration_dino.config.RunConfig`
    :rtype: :py:class:`DinoNetwork`
    """
    with T.seeded(seed):
        return DinoNetwork(config.vit, config.projector, config.tfm.image_size)
