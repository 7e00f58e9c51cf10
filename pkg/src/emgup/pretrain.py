"""Supervised source-model training with best-validation model selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, adam_step, no_grad, softmax_cross_entropy
from .data import EmgDataError, LabeledWindows
from .model import Backbone, BackboneConfig
from .ssa import build_views, cross_view_loss


@dataclass
class PretrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    batch_size: int = 64
    beta1: float = 0.5
    beta2: float = 0.99
    weight_decay: float = 3e-4
    # weight of an auxiliary contrastive term on source windows (0 = plain CE)
    ssa_weight: float = 0.0
    T: int = 17


@dataclass
class PretrainResult:
    model: Backbone
    log: list = field(default_factory=list)  # (epoch, train_loss, val_acc)
    best_epoch: int = -1


def predict(model: Backbone, windows: np.ndarray, batch: int = 512) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(windows), batch):
            out.append(model.classify(windows[s : s + batch]).values.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def pretrain(
    cfg: BackboneConfig,
    train: LabeledWindows,
    val: LabeledWindows,
    pcfg: PretrainConfig,
    rng: np.random.Generator,
    init_seed: int = 0,
) -> PretrainResult:
    if np.any(train.labels < 0):
        raise EmgDataError("source training windows must all be labeled")
    model = Backbone(cfg, seed=init_seed)
    opt = AdamState(pcfg.beta1, pcfg.beta2, pcfg.weight_decay)
    best = (-1.0, None, -1)
    log = []
    n = len(train)
    for epoch in range(pcfg.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, pcfg.batch_size):
            idx = order[s : s + pcfg.batch_size]
            x = train.windows[idx]
            model.zero_grad()
            loss = softmax_cross_entropy(model.classify(x), train.labels[idx])
            if pcfg.ssa_weight:
                x, xv = build_views(x, "inversion")
                loss = loss + cross_view_loss(model, x, xv, pcfg.T) * pcfg.ssa_weight
            loss.backward()
            adam_step(model.params, model.grads(), opt, pcfg.lr)
            losses.append(loss.item())
        val_acc = float(np.mean(predict(model, val.windows) == val.labels)) if len(val) else 0.0
        log.append((epoch, float(np.mean(losses)), val_acc))
        if val_acc > best[0]:
            best = (val_acc, model.copy(), epoch)
    chosen = best[1] if best[1] is not None else model
    chosen.zero_grad()
    return PretrainResult(chosen, log, best[2])
