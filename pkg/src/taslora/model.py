"""Bundle of supernet weights plus optional experts and router."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .molekit import ExpertBank, ExpertMixture, MoleContext
from .routerkit import RouterState, route
from .spacekit import SubnetConfig
from .supernet import SupernetWeights, forward


@dataclass
class TasLoraModel:
    weights: SupernetWeights
    bank: ExpertBank | None = None
    router: RouterState | None = None
    mode: str = "merged"

    @property
    def space(self):
        return self.weights.space

    def mixture(self, subnet: SubnetConfig) -> ExpertMixture | None:
        if self.bank is None:
            return None
        if self.router is None:
            # single shared LoRA or an unrouted bank: every layer gets the same uniform row
            return ExpertMixture.uniform(subnet.depth, self.space.num_blocks, self.bank.num_experts)
        return route(self.router, subnet)

    def context(self, subnet: SubnetConfig, mixture: ExpertMixture | None = None) -> MoleContext | None:
        if self.bank is None:
            return None
        return MoleContext(self.bank, mixture or self.mixture(subnet), self.mode)

    def forward(self, subnet: SubnetConfig, images, mixture: ExpertMixture | None = None):
        return forward(self.weights, subnet, images, self.context(subnet, mixture))

    def predict(self, subnet: SubnetConfig, images: np.ndarray, batch_size: int = 256):
        """Penultimate features and logits as numpy arrays, routing once."""
        mixture = self.mixture(subnet)
        feats, logits = [], []
        for lo in range(0, len(images), batch_size):
            f, z = self.forward(subnet, images[lo: lo + batch_size], mixture)
            feats.append(f.data)
            logits.append(z.data)
        return np.concatenate(feats), np.concatenate(logits)


def mean_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy accumulated in float64."""
    logp = gc.log_softmax_np(logits.astype(np.float64))
    return float(-logp[np.arange(len(labels)), labels].mean())


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(100.0 * (logits.argmax(axis=1) == labels).mean())
