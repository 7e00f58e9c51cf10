"""Stage 1: sequence-cross perspective contrastive adaptation.

The context of the time-reversed view predicts upcoming latents of the
original view and vice versa, scored with an InfoNCE objective over cosine
similarities (no temperature).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    AdamState,
    Tensor,
    adam_step,
    concat,
    cosine_similarity,
    l2_normalize,
    matmul,
    softmax_cross_entropy,
    stack,
)
from .data import ConfigurationError, LabeledWindows, UnlabeledWindows, WindowedSample, mask_array, reverse_view
from .model import Backbone

VIEW_MODES = ("inversion", "none", "mask")


@dataclass
class SSAConfig:
    epochs: int = 5
    lr: float = 1e-7
    batch_size: int = 64
    T: int = 17
    view_mode: str = "inversion"
    mask_fraction: float = 0.25
    beta1: float = 0.5
    beta2: float = 0.99
    weight_decay: float = 3e-4
    trace_path: str | None = None

    def __post_init__(self):
        if self.view_mode not in VIEW_MODES:
            raise ConfigurationError(f"view_mode must be one of {VIEW_MODES}, got {self.view_mode!r}")


@dataclass
class SSAResult:
    model: Backbone
    trace: list = field(default_factory=list)  # (epoch, step, loss)


def build_views(window, mode: str = "inversion", rng=None, mask_fraction: float = 0.25):
    """Return ``(window, augmented)`` for a WindowedSample or a raw array
    (``... x channels x L``)."""
    if isinstance(window, WindowedSample):
        if mode == "inversion":
            return window, reverse_view(window)
        raw = build_views(window.window, mode, rng, mask_fraction)
        return window, WindowedSample(raw[1], window.origin, None)
    x = np.asarray(window)
    if mode == "inversion":
        return x, x[..., ::-1].copy()
    if mode == "none":
        return x, x.copy()
    if mode == "mask":
        if rng is None:
            raise ValueError("mask mode needs an rng")
        if x.ndim == 3:
            return x, np.stack([mask_array(w, mask_fraction, rng) for w in x])
        return x, mask_array(x, mask_fraction, rng)
    raise ConfigurationError(f"unknown view mode {mode!r}")


def info_nce_direction(predicted: Tensor, positives: Tensor, negatives) -> Tensor:
    """Mean over horizons of ``-log softmax(sim(pred_k, candidates_k))[positive]``.

    ``predicted`` and ``positives`` are ``K x d``.  ``negatives`` is either
    ``n x d`` (shared by all horizons) or ``n x K x d``; ``n`` may be 0.
    """
    predicted = predicted if isinstance(predicted, Tensor) else Tensor(predicted)
    positives = positives if isinstance(positives, Tensor) else Tensor(positives)
    K, d = predicted.shape
    if K < 1:
        raise ConfigurationError("empty candidate set: no horizons to predict")
    if isinstance(negatives, (list, tuple)):
        negatives = stack(negatives) if negatives else Tensor(np.zeros((0, d)))
    elif not isinstance(negatives, Tensor):
        negatives = Tensor(negatives)
    if negatives.ndim == 2:
        negatives = Tensor(np.zeros((negatives.shape[0], K, d))) + negatives.reshape(negatives.shape[0], 1, d)
    cand = concat([positives.reshape(1, K, d), negatives], axis=0).swapaxes(0, 1)  # K x (n+1) x d
    sims = cosine_similarity(predicted.reshape(K, 1, d), cand)  # K x (n+1)
    return softmax_cross_entropy(sims, np.zeros(K, dtype=int))


def batch_info_nce(predicted: Tensor, targets: Tensor) -> Tensor:
    """Batched InfoNCE with in-batch negatives.

    ``predicted``/``targets`` are ``B x K x d``.  For sample i and horizon k
    the candidates are ``targets[:, k]``, the positive being ``targets[i, k]``.
    Equals the batch mean of ``info_nce_direction`` for each sample.
    """
    B, K, d = predicted.shape
    p = l2_normalize(predicted.swapaxes(0, 1))  # K x B x d
    t = l2_normalize(targets.swapaxes(0, 1))
    sims = matmul(p, t.swapaxes(1, 2)).reshape(K * B, B)
    return softmax_cross_entropy(sims, np.tile(np.arange(B), K))


def predict_all(model: Backbone, c: Tensor) -> Tensor:
    """Stack the K horizon predictions: ``B x d`` -> ``B x K x d``."""
    K = model.cfg.prediction_horizons
    return stack([model.predict_future(c, k) for k in range(1, K + 1)], axis=1)


def cross_view_from_latents(model: Backbone, z: Tensor, zr: Tensor, c: Tensor, cr: Tensor, T: int) -> Tensor:
    """Reversed-view context predicts ``z[T:T+K]``; original-view context
    predicts ``zr[T:T+K]``.  Both directions weigh equally."""
    K = model.cfg.prediction_horizons
    fwd = batch_info_nce(predict_all(model, cr), z[:, T : T + K, :])
    bwd = batch_info_nce(predict_all(model, c), zr[:, T : T + K, :])
    return fwd + bwd


def cross_view_loss(model: Backbone, x: np.ndarray, x_view: np.ndarray, T: int) -> Tensor:
    """Contrastive loss for a batch ``B x channels x L`` and its augmented view."""
    K = model.cfg.prediction_horizons
    lz = model.cfg.latent_length
    if lz < T + K:
        raise ConfigurationError(f"latent length {lz} < T + K = {T} + {K}")
    z = model.extract_features(x)
    zr = model.extract_features(x_view)
    c = model.encode_context(z, T)
    cr = model.encode_sequence(zr[:, lz - T :, :])
    return cross_view_from_latents(model, z, zr, c, cr, T)


def ssa_adapt(model: Backbone, windows: UnlabeledWindows, cfg: SSAConfig, rng: np.random.Generator) -> SSAResult:
    """Adapt every backbone parameter on one target user's unlabeled windows."""
    if isinstance(windows, LabeledWindows) or not isinstance(windows, UnlabeledWindows):
        raise TypeError("ssa_adapt accepts label-free UnlabeledWindows only")
    if len(windows) == 0:
        raise ConfigurationError("no target windows to adapt on")
    student = model.copy()
    K = student.cfg.prediction_horizons
    if student.cfg.latent_length < cfg.T + K:
        raise ConfigurationError(f"latent length {student.cfg.latent_length} < T + K = {cfg.T} + {K}")
    opt = AdamState(cfg.beta1, cfg.beta2, cfg.weight_decay)
    trace = []
    n = len(windows)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            x = windows.windows[order[s : s + cfg.batch_size]]
            x, xv = build_views(x, cfg.view_mode, rng, cfg.mask_fraction)
            student.zero_grad()
            loss = cross_view_loss(student, x, xv, cfg.T)
            loss.backward()
            adam_step(student.params, student.grads(), opt, cfg.lr)
            trace.append((epoch, step, loss.item()))
            step += 1
    student.zero_grad()
    if cfg.trace_path:
        write_trace(trace, cfg.trace_path)
    return SSAResult(student, trace)


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "loss"])
        for row in trace:
            w.writerow([row[0], row[1], repr(row[2])])
