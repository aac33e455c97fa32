"""High-frequency adversarial learning with a relativistic-average discriminator.

The discriminator reuses the U-Net encoder layout (two 3x3x3 convolutions per
level, 2x max pooling between levels, doubling width) and reduces the deepest
feature map to one score by global averaging and a linear layer. It only ever
sees high-frequency CT volumes.
"""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ArgumentError, DomainError
from .network import ParamStore, check_divisible, unet_encoder_forward, unet_encoder_params
from .tensor import Tensor
from .volume import Domain


class Discriminator:
    def __init__(self, channels=8, depth=2, seed=0, dtype=np.float32, init="he"):
        self.channels = channels
        self.depth = depth
        self.dtype = np.dtype(dtype)
        store = ParamStore(np.random.default_rng(seed), self.dtype, init)
        unet_encoder_params(store, "disc", 1, channels, depth)
        width = channels * 2**depth
        if init == "zeros":
            w = np.zeros(width, dtype=self.dtype)
        else:
            w = (store.rng.standard_normal(width) * math.sqrt(2.0 / width)).astype(self.dtype)
        store.params["disc.fc.weight"] = Tensor(w, requires_grad=True)
        store.params["disc.fc.bias"] = Tensor(np.zeros(1, dtype=self.dtype), requires_grad=True)
        self.params = store.params

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def forward(self, y_high):
        """Scalar realism score for one (1, D, H, W) high-frequency volume."""
        if not isinstance(y_high, Tensor):
            y_high = Tensor(np.asarray(y_high, dtype=self.dtype))
        check_divisible(y_high.shape[1:], 2**self.depth, "discriminator input")
        feats = unet_encoder_forward(self.params, "disc", y_high, self.depth)[-1]
        pooled = feats.mean(axis=(1, 2, 3))
        score = (pooled * self.params["disc.fc.weight"]).sum() + self.params["disc.fc.bias"]
        return score.reshape(())

    __call__ = forward


def require_high_frequency(volume):
    """Guard: the discriminator is trained on high-frequency CT volumes only."""
    if volume.domain != Domain.CT_HIGHFREQ:
        raise DomainError(f"discriminator inputs must be CT_HIGHFREQ, got {volume.domain.name}")
    return volume


def _scores(scores):
    if isinstance(scores, Tensor):
        scores = [scores[i] for i in range(scores.size)] if scores.ndim else [scores]
    scores = list(scores)
    if not scores:
        raise ArgumentError("score list is empty")
    return T.stack_scalars([s if isinstance(s, Tensor) else Tensor(s) for s in scores])


def _log_prob(z, log_clamp):
    # log(sigmoid(z)); optionally floored at log(log_clamp)
    out = T.log_sigmoid(z)
    return out if log_clamp is None else T.clip_min(out, math.log(log_clamp))


def _ragan(first, second, log_clamp):
    a = _scores(first)
    b = _scores(second)
    rel_a = a - b.mean()
    rel_b = b - a.mean()
    return -(_log_prob(rel_a, log_clamp).mean()) - _log_prob(-rel_b, log_clamp).mean()


def ragan_d_loss(real_scores, fake_scores, log_clamp=None):
    """-E[log s(r - mean f)] - E[log(1 - s(f - mean r))]."""
    return _ragan(real_scores, fake_scores, log_clamp)


def ragan_g_loss(real_scores, fake_scores, log_clamp=None):
    """The discriminator loss with the roles of real and fake swapped."""
    return _ragan(fake_scores, real_scores, log_clamp)
