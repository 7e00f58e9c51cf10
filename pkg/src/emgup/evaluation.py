"""Cross-user protocol, per-user personalization and the ablation grid."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig, derive_seed, stream_rng
from .data import (
    ConfigurationError,
    EmgDataError,
    EmgRecord,
    LabeledWindows,
    UnlabeledWindows,
    channel_stats,
    make_cross_user_splits,
    normalize,
    windows_from_records,
)
from .metrics import accuracy, confusion_matrix, macro_f1
from .model import Backbone, decode_checkpoint, encode_checkpoint
from .pretrain import predict, pretrain
from .ssa import VIEW_MODES, ssa_adapt
from .ssp import ssp_adapt

log = logging.getLogger(__name__)

MIN_USERS = 10
VARIANTS = {"so": (False, False), "ssa": (True, False), "ssp": (False, True), "full": (True, True)}
SUMMARY_FIELDS = ["variant", "T", "view_mode", "filtering", "mean_acc", "mean_mf1", "std_acc", "std_mf1", "seeds"]


# ---------------------------------------------------------------------------
# per-user evaluation
# ---------------------------------------------------------------------------


@dataclass
class UserMetrics:
    confusion: np.ndarray
    acc: float
    mf1: float


def prepare_windows(model: Backbone, windows: np.ndarray) -> np.ndarray:
    """Apply the normalization stored in the checkpoint buffers."""
    return normalize(windows, model.buffers["norm.mean"], model.buffers["norm.std"])


def evaluate_user(model: Backbone, windows: LabeledWindows, prenormalized: bool = False) -> UserMetrics:
    labels = np.asarray(windows.labels)
    k = model.cfg.num_classes
    if labels.size == 0:
        raise EmgDataError("no labeled windows to evaluate")
    if labels.min() < 0 or labels.max() >= k:
        raise EmgDataError(f"label outside class range [0, {k})")
    x = windows.windows if prenormalized else prepare_windows(model, windows.windows)
    cm = confusion_matrix(labels, predict(model, x), k)
    return UserMetrics(cm, accuracy(cm), macro_f1(cm))


# ---------------------------------------------------------------------------
# grid description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationCell:
    use_ssa: bool
    use_ssp: bool
    ssp_filtering: bool | None = True
    view_mode: str | None = "inversion"
    T: int | None = 17

    @property
    def variant(self) -> str:
        return {v: k for k, v in VARIANTS.items()}[(self.use_ssa, self.use_ssp)]

    def label(self) -> str:
        parts = [self.variant]
        if self.use_ssa:
            parts += [f"T{self.T}", self.view_mode]
        if self.use_ssp:
            parts.append("filter" if self.ssp_filtering else "nofilter")
        return "_".join(parts)


@dataclass
class AblationConfig:
    variants: Sequence[str] = ("so", "ssa", "ssp", "full")
    filtering: Sequence[bool] = (True,)
    view_modes: Sequence[str] = ("inversion",)
    T_values: Sequence[int] = (17,)
    seeds: Sequence[int] = (0,)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("ablation needs at least one seed")
        if not self.T_values:
            raise ConfigurationError("T_values must be non-empty")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigurationError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
        for m in self.view_modes:
            if m not in VIEW_MODES:
                raise ConfigurationError(f"unknown view mode {m!r}")

    @classmethod
    def single(cls, rc: RunConfig, variant: str, seeds=None) -> "AblationConfig":
        return cls(
            variants=(variant,),
            filtering=(rc.ssp_filtering,),
            view_modes=(rc.view_mode,),
            T_values=(rc.context_window,),
            seeds=tuple(seeds if seeds is not None else (rc.seed,)),
        )

    @classmethod
    def from_run_config(cls, rc: RunConfig) -> "AblationConfig":
        def ints(s):
            return tuple(int(x) for x in s.split(",") if x.strip())

        return cls(
            variants=tuple(v.strip() for v in rc.ablation_variants.split(",") if v.strip()),
            filtering=(True, False) if rc.ablation_no_filter else (rc.ssp_filtering,),
            view_modes=tuple(v.strip() for v in rc.ablation_view_modes.split(",") if v.strip()),
            T_values=ints(rc.ablation_T_values),
            seeds=ints(rc.ablation_seeds),
        )

    def cells(self) -> list[AblationCell]:
        """Cartesian product of the grid; axes a variant does not use are
        collapsed so each distinct pipeline appears once."""
        out = []
        for v in self.variants:
            use_ssa, use_ssp = VARIANTS[v]
            for filt in self.filtering if use_ssp else (None,):
                for mode in self.view_modes if use_ssa else (None,):
                    for T in self.T_values if use_ssa else (None,):
                        cell = AblationCell(use_ssa, use_ssp, filt, mode, T)
                        if cell not in out:
                            out.append(cell)
        return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    config_fingerprint: str
    seed: int
    cell: dict
    folds: list = field(default_factory=list)
    per_user: list = field(default_factory=list)
    mean_acc: float = 0.0
    mean_mf1: float = 0.0
    std_acc: float = 0.0
    std_mf1: float = 0.0
    wallclock_s: float = 0.0

    def finalize(self) -> None:
        self.per_user.sort(key=lambda r: r["user"])
        accs = np.array([r["acc"] for r in self.per_user])
        mf1s = np.array([r["mf1"] for r in self.per_user])
        self.mean_acc = float(accs.mean())
        self.mean_mf1 = float(mf1s.mean())
        self.std_acc = float(accs.std())
        self.std_mf1 = float(mf1s.std())

    def to_dict(self, include_wallclock: bool = True) -> dict:
        d = asdict(self)
        if not include_wallclock:
            d.pop("wallclock_s")
        return d

    def to_json(self, include_wallclock: bool = True) -> str:
        return json.dumps(self.to_dict(include_wallclock), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(self.to_json())


def summarize(reports: dict[AblationCell, list[MetricsReport]]) -> list[dict]:
    """One row per cell.  Means average the per-seed means; stds pool the
    per-user values across seeds."""
    rows = []
    for cell, reps in reports.items():
        accs = np.concatenate([[u["acc"] for u in r.per_user] for r in reps])
        mf1s = np.concatenate([[u["mf1"] for u in r.per_user] for r in reps])
        rows.append(
            {
                "variant": cell.variant,
                "T": "" if cell.T is None else cell.T,
                "view_mode": cell.view_mode or "",
                "filtering": "" if cell.ssp_filtering is None else str(cell.ssp_filtering).lower(),
                "mean_acc": float(np.mean([r.mean_acc for r in reps])),
                "mean_mf1": float(np.mean([r.mean_mf1 for r in reps])),
                "std_acc": float(accs.std()),
                "std_mf1": float(mf1s.std()),
                "seeds": " ".join(str(r.seed) for r in reps),
            }
        )
    return rows


def write_summary(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------


def source_model(rc: RunConfig, train: LabeledWindows, val: LabeledWindows, seed: int, fold: int):
    """Pretrain on source users; normalization statistics go into the buffers."""
    mean, std = channel_stats(train.windows)
    train = LabeledWindows(normalize(train.windows, mean, std), train.labels, train.record_ids, train.user_ids)
    val = LabeledWindows(normalize(val.windows, mean, std), val.labels, val.record_ids, val.user_ids)
    result = pretrain(
        rc.backbone(),
        train,
        val,
        rc.pretrain(),
        stream_rng(seed, "pretrain", fold),
        init_seed=derive_seed(seed, "init", fold),
    )
    model = result.model
    model.buffers["norm.mean"] = mean
    model.buffers["norm.std"] = std
    model.provenance.update({"seed": str(seed), "fold": str(fold), "fingerprint": rc.fingerprint()})
    return model, result


def adapt_user(
    source: Backbone,
    target: UnlabeledWindows,
    rc: RunConfig,
    cell: AblationCell,
    seed: int,
    user: str,
    ssa_cache: dict | None = None,
) -> Backbone:
    """Run the adaptation stages of ``cell`` on one user's (normalized,
    label-free) windows."""
    model = source
    if cell.use_ssa:
        key = (user, cell.T, cell.view_mode)
        if ssa_cache is not None and key in ssa_cache:
            model = ssa_cache[key]
        else:
            cfg = rc.ssa(T=cell.T, view_mode=cell.view_mode)
            model = ssa_adapt(source, target, cfg, stream_rng(seed, "ssa", user, cell.T, cell.view_mode)).model
            if ssa_cache is not None:
                ssa_cache[key] = model
    if cell.use_ssp:
        cfg = rc.ssp(filtering=bool(cell.ssp_filtering))
        model = ssp_adapt(model, target, cfg, stream_rng(seed, "ssp", user)).model
    return model


def _check_users(users) -> None:
    if len(users) < MIN_USERS:
        raise ConfigurationError(f"cross-user protocol needs at least {MIN_USERS} users, got {len(users)}")


def run_ablation(
    dataset: Sequence[EmgRecord] | Callable[[int], Sequence[EmgRecord]],
    rc: RunConfig,
    grid: AblationConfig,
) -> dict[AblationCell, list[MetricsReport]]:
    """Execute every grid cell for every seed.

    ``dataset`` is a list of records or a callable mapping a seed to one.
    Within a seed and fold, every cell starts from the same pretrained
    checkpoint bytes.
    """
    cells = grid.cells()
    fingerprint = rc.fingerprint()
    out: dict[AblationCell, list[MetricsReport]] = {c: [] for c in cells}
    for seed in grid.seeds:
        t0 = time.perf_counter()
        records = dataset(seed) if callable(dataset) else dataset
        lw = windows_from_records(list(records), rc.window_length, rc.window_stride)
        users = sorted(set(lw.user_ids))
        _check_users(users)
        splits = make_cross_user_splits(users, rc.num_folds, derive_seed(seed, "split"))
        reports = {c: MetricsReport(fingerprint, seed, {**asdict(c), "label": c.label()}) for c in cells}
        for split in splits:
            fold = split.fold_index
            train = lw.subset(np.isin(lw.user_ids, split.train_users))
            val = lw.subset(np.isin(lw.user_ids, split.val_users))
            try:
                model, result = source_model(rc, train, val, seed, fold)
            except Exception as exc:
                raise type(exc)(f"seed {seed} fold {fold} pretraining: {exc}") from exc
            blob = encode_checkpoint(model)
            digest = hashlib.sha256(blob).hexdigest()
            source = decode_checkpoint(blob)
            log.info("seed %d fold %d: pretrained, best epoch %d", seed, fold, result.best_epoch)
            fold_info = {
                "fold": fold,
                "train_users": list(split.train_users),
                "val_users": list(split.val_users),
                "test_users": list(split.test_users),
                "best_epoch": result.best_epoch,
                "checkpoint_sha256": digest,
            }
            ssa_cache: dict = {}
            for user in sorted(split.test_users):
                tw = lw.subset(lw.user_ids == user)
                tw = LabeledWindows(prepare_windows(source, tw.windows), tw.labels, tw.record_ids, tw.user_ids)
                target = tw.strip_labels()
                for cell in cells:
                    try:
                        adapted = adapt_user(source, target, rc, cell, seed, user, ssa_cache)
                        m = evaluate_user(adapted, tw, prenormalized=True)
                    except Exception as exc:
                        raise type(exc)(f"seed {seed} fold {fold} user {user} ({cell.label()}): {exc}") from exc
                    reports[cell].per_user.append(
                        {
                            "user": user,
                            "fold": fold,
                            "acc": m.acc,
                            "mf1": m.mf1,
                            "n_windows": int(m.confusion.sum()),
                            "confusion": m.confusion.tolist(),
                        }
                    )
                    log.info("seed %d fold %d user %s %s: acc %.4f", seed, fold, user, cell.label(), m.acc)
            for rep in reports.values():
                rep.folds.append(dict(fold_info))
        elapsed = time.perf_counter() - t0
        for cell, rep in reports.items():
            rep.finalize()
            rep.wallclock_s = elapsed
            out[cell].append(rep)
    return out


def run_cross_validation(dataset, rc: RunConfig, variant: str | None = None) -> MetricsReport:
    """Single-pipeline protocol for ``rc.seed``; ``variant`` defaults to the
    one named by ``rc.mode``."""
    variant = variant or {"none": "so"}.get(rc.mode, rc.mode)
    grid = AblationConfig.single(rc, variant)
    (reports,) = run_ablation(dataset, rc, grid).values()
    return reports[0]
