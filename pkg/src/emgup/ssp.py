"""Stage 2: confidence-filtered pseudo-label fine-tuning with an EMA teacher."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, DimensionError, adam_step, no_grad, softmax, softmax_cross_entropy
from .data import LabeledWindows, UnlabeledWindows
from .model import Backbone

log = logging.getLogger(__name__)


@dataclass
class SSPConfig:
    epochs: int = 10
    lr: float = 1e-7
    batch_size: int = 64
    alpha: float = 0.996
    xi: float = 0.8
    n_c: int = 15
    filtering: bool = True
    beta1: float = 0.5
    beta2: float = 0.99
    weight_decay: float = 3e-4
    infer_batch: int = 512
    report_path: str | None = None


@dataclass
class TeacherState:
    params: dict[str, np.ndarray]
    alpha: float = 0.996
    update_count: int = 0

    @classmethod
    def from_model(cls, model: Backbone, alpha: float = 0.996) -> "TeacherState":
        return cls({k: p.values.copy() for k, p in model.params.items()}, alpha)

    def as_model(self, like: Backbone) -> Backbone:
        m = like.copy()
        for k, v in self.params.items():
            m.params[k].values = v.copy()
        return m


@dataclass
class PseudoLabelSet:
    labels: np.ndarray
    confidence: np.ndarray
    record_ids: np.ndarray
    retained: np.ndarray = None
    record_counts: dict = field(default_factory=dict)
    record_retained: dict = field(default_factory=dict)


def predict_proba(model: Backbone, windows: np.ndarray, batch: int = 512) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(windows), batch):
            out.append(softmax(model.classify(windows[s : s + batch]), axis=-1).values)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.num_classes))


def infer_pseudolabels(teacher: Backbone, windows: UnlabeledWindows, batch: int = 512) -> PseudoLabelSet:
    """Argmax label and max-probability confidence per window.  ``np.argmax``
    resolves ties to the lowest class index."""
    probs = predict_proba(teacher, windows.windows, batch)
    return pseudolabels_from_proba(probs, windows.record_ids)


def pseudolabels_from_proba(probs: np.ndarray, record_ids) -> PseudoLabelSet:
    return PseudoLabelSet(probs.argmax(axis=1), probs.max(axis=1), np.asarray(record_ids))


def filter_confidence(pls: PseudoLabelSet, xi: float = 0.8, n_c: int = 15, enabled: bool = True) -> np.ndarray:
    """Indices of windows that train.

    A window passes when its confidence is strictly above ``xi``; a record's
    passing windows only count if the record has at least ``n_c`` of them.
    Updates ``pls.retained`` and the per-record bookkeeping in place.
    """
    n = len(pls.labels)
    if not enabled:
        pls.retained = np.ones(n, dtype=bool)
        rids, counts = np.unique(pls.record_ids, return_counts=True)
        pls.record_counts = dict(zip(rids.tolist(), counts.tolist()))
        pls.record_retained = {r: True for r in pls.record_counts}
        return np.arange(n)
    pls.retained = pls.confidence > xi
    rids = np.unique(pls.record_ids)
    counts = {r: int(pls.retained[pls.record_ids == r].sum()) for r in rids.tolist()}
    pls.record_counts = counts
    pls.record_retained = {r: c >= n_c for r, c in counts.items()}
    gate = np.array([pls.record_retained[r] for r in pls.record_ids.tolist()], dtype=bool)
    return np.flatnonzero(pls.retained & gate)


def finetune_step(student: Backbone, windows: np.ndarray, labels: np.ndarray, opt: AdamState, lr: float):
    """One Adam step on the mean cross-entropy against pseudo-labels.
    Returns the batch loss, or None (no step) for an empty batch."""
    if len(windows) == 0:
        return None
    student.zero_grad()
    loss = softmax_cross_entropy(student.classify(windows), labels)
    loss.backward()
    adam_step(student.params, student.grads(), opt, lr)
    return loss.item()


def ema_update(teacher: TeacherState, student_params: dict) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student, in place."""
    if set(teacher.params) != set(student_params):
        missing = sorted(set(teacher.params) ^ set(student_params))
        raise DimensionError(f"teacher/student manifest mismatch at {missing[0]!r}")
    a = teacher.alpha
    for k, tp in teacher.params.items():
        sp = student_params[k]
        sp = sp.values if hasattr(sp, "values") else np.asarray(sp)
        if sp.shape != tp.shape:
            raise DimensionError(f"parameter {k!r}: teacher {tp.shape} vs student {sp.shape}")
        tp *= a
        tp += (1.0 - a) * sp
    teacher.update_count += 1


@dataclass
class SSPResult:
    model: Backbone
    teacher: TeacherState
    report: list = field(default_factory=list)


REPORT_FIELDS = ["epoch", "n_windows", "n_retained", "n_records_retained", "mean_conf", "loss"]


def ssp_adapt(model: Backbone, windows: UnlabeledWindows, cfg: SSPConfig, rng: np.random.Generator) -> SSPResult:
    """Personalize ``model`` on one user's unlabeled windows.

    Each epoch the teacher relabels all windows, the retained subset trains
    the student in shuffled batches, and the teacher follows the student by
    EMA after every optimizer step.
    """
    if isinstance(windows, LabeledWindows) or not isinstance(windows, UnlabeledWindows):
        raise TypeError("ssp_adapt accepts label-free UnlabeledWindows only")
    student = model.copy()
    teacher = TeacherState.from_model(student, cfg.alpha)
    teacher_model = student.copy()
    opt = AdamState(cfg.beta1, cfg.beta2, cfg.weight_decay)
    report = []
    for epoch in range(cfg.epochs):
        for k, v in teacher.params.items():
            teacher_model.params[k].values = v.copy()
        pls = infer_pseudolabels(teacher_model, windows, cfg.infer_batch)
        keep = filter_confidence(pls, cfg.xi, cfg.n_c, cfg.filtering)
        losses = []
        if len(keep) == 0:
            log.warning("epoch %d: no retained windows, parameters unchanged", epoch)
        else:
            order = keep[rng.permutation(len(keep))]
            for s in range(0, len(order), cfg.batch_size):
                idx = order[s : s + cfg.batch_size]
                losses.append(finetune_step(student, windows.windows[idx], pls.labels[idx], opt, cfg.lr))
                ema_update(teacher, student.params)
        report.append(
            {
                "epoch": epoch,
                "n_windows": len(windows),
                "n_retained": int(len(keep)),
                "n_records_retained": int(sum(pls.record_retained.values())),
                "mean_conf": float(pls.confidence.mean()) if len(windows) else 0.0,
                "loss": float(np.mean(losses)) if losses else float("nan"),
            }
        )
    student.zero_grad()
    if cfg.report_path:
        write_report(report, cfg.report_path)
    return SSPResult(student, teacher, report)


def write_report(report, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for row in report:
            w.writerow(row)
