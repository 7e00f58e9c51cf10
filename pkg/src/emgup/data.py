"""EMG records, file formats, windowing, view augmentation and the synthetic
multi-user generator."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EMGU"
FORMAT_VERSION = 1


class EmgFormatError(ValueError):
    pass


class EmgTruncationError(EmgFormatError):
    pass


class EmgDataError(ValueError):
    """Labels or values inconsistent with what the operation needs."""


class ConfigurationError(ValueError):
    pass


@dataclass
class EmgRecord:
    user_id: str
    session_id: str
    data: np.ndarray  # channels x samples
    gesture_label: int | None = None
    sample_rate_hz: int = 2000

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"record data must be channels x samples, got {self.data.shape}")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")

    @property
    def record_id(self) -> str:
        return f"{self.user_id}/{self.session_id}"

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def num_samples(self) -> int:
        return self.data.shape[1]


@dataclass
class WindowedSample:
    window: np.ndarray  # channels x L
    origin: tuple[str, int]  # (record id, start index)
    label: int | None = None


@dataclass
class UnlabeledWindows:
    """Label-free window batch handed to adaptation code.

    There is deliberately no label field: adaptation stages cannot read one.
    """

    windows: np.ndarray  # N x channels x L
    record_ids: np.ndarray  # N, record identifier per window

    def __len__(self) -> int:
        return len(self.windows)

    def subset(self, idx) -> "UnlabeledWindows":
        return UnlabeledWindows(self.windows[idx], self.record_ids[idx])


@dataclass
class LabeledWindows:
    windows: np.ndarray
    labels: np.ndarray
    record_ids: np.ndarray
    user_ids: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.windows)

    def strip_labels(self) -> UnlabeledWindows:
        return UnlabeledWindows(self.windows.copy(), self.record_ids.copy())

    def subset(self, idx) -> "LabeledWindows":
        users = None if self.user_ids is None else self.user_ids[idx]
        return LabeledWindows(self.windows[idx], self.labels[idx], self.record_ids[idx], users)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def encode_record(rec: EmgRecord) -> bytes:
    label = -1 if rec.gesture_label is None else int(rec.gesture_label)
    head = MAGIC + struct.pack("<HHIQ", FORMAT_VERSION, rec.channels, rec.sample_rate_hz, rec.num_samples)
    body = _pack_str(rec.user_id) + _pack_str(rec.session_id) + struct.pack("<h", label)
    payload = np.ascontiguousarray(rec.data, dtype="<f4").tobytes()
    return head + body + payload


def decode_records(buf: bytes) -> list[EmgRecord]:
    records = []
    pos = 0
    while pos < len(buf):
        start = pos
        if buf[pos : pos + 4] != MAGIC:
            raise EmgFormatError(f"bad magic at byte {pos}: {buf[pos:pos + 4]!r}")
        pos += 4
        if len(buf) < pos + 16:
            raise EmgTruncationError(f"truncated header at byte offset {start}")
        version, channels, rate, n = struct.unpack_from("<HHIQ", buf, pos)
        if version != FORMAT_VERSION:
            raise EmgFormatError(f"unsupported version {version} at byte {start}")
        pos += 16
        strings = []
        for _ in range(2):
            if len(buf) < pos + 2:
                raise EmgTruncationError(f"truncated string header at byte offset {pos}")
            (ln,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            strings.append(buf[pos : pos + ln].decode("utf-8"))
            pos += ln
        (label,) = struct.unpack_from("<h", buf, pos)
        pos += 2
        nbytes = 4 * channels * n
        if len(buf) < pos + nbytes:
            raise EmgTruncationError(
                f"record at byte {start} declares {channels}x{n} values but payload ends at byte offset {len(buf)}"
            )
        data = np.frombuffer(buf, dtype="<f4", count=channels * n, offset=pos).reshape(channels, n)
        pos += nbytes
        records.append(
            EmgRecord(strings[0], strings[1], data.astype(np.float64), None if label < 0 else label, rate)
        )
    return records


def save_records(records: list[EmgRecord], path) -> None:
    Path(path).write_bytes(b"".join(encode_record(r) for r in records))


def _load_csv(path) -> list[EmgRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["user", "session", "label"] or len(header) < 4:
            raise EmgFormatError(f"unexpected CSV header {header}")
        nch = len(header) - 3
        groups: list[tuple[str, str, int, list]] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != nch + 3:
                raise EmgTruncationError(f"line {lineno}: expected {nch + 3} fields, got {len(row)}")
            key = (row[0], row[1])
            if not groups or groups[-1][:2] != key:
                groups.append((row[0], row[1], int(row[2]), []))
            groups[-1][3].append([float(v) for v in row[3:]])
    return [
        EmgRecord(u, s, np.array(rows).T, None if lab < 0 else lab)
        for u, s, lab, rows in groups
    ]


def save_csv(records: list[EmgRecord], path) -> None:
    nch = records[0].channels
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user", "session", "label"] + [f"ch{i}" for i in range(nch)])
        for r in records:
            lab = -1 if r.gesture_label is None else r.gesture_label
            for t in range(r.num_samples):
                w.writerow([r.user_id, r.session_id, lab] + [repr(float(v)) for v in r.data[:, t]])


def load_records(path, format: str = "binary") -> list[EmgRecord]:
    if format == "binary":
        return decode_records(Path(path).read_bytes())
    if format == "csv":
        return _load_csv(path)
    raise ValueError(f"unknown format {format!r}")


# ---------------------------------------------------------------------------
# windowing and views
# ---------------------------------------------------------------------------


def segment_windows(record: EmgRecord, L: int, stride: int) -> list[WindowedSample]:
    if L < 1 or stride < 1:
        raise ValueError("L and stride must be >= 1")
    n = record.num_samples
    return [
        WindowedSample(record.data[:, s : s + L].copy(), (record.record_id, s), record.gesture_label)
        for s in range(0, n - L + 1, stride)
    ]


def reverse_view(sample: WindowedSample) -> WindowedSample:
    return WindowedSample(sample.window[:, ::-1].copy(), sample.origin, None)


def mask_array(window: np.ndarray, mask_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Zero one contiguous block of ``round(mask_fraction * L)`` time steps."""
    if not 0.0 <= mask_fraction <= 1.0:
        raise ValueError("mask_fraction must lie in [0, 1]")
    out = window.copy()
    L = out.shape[-1]
    n = int(round(mask_fraction * L))
    if n:
        start = int(rng.integers(0, L - n + 1))
        out[..., start : start + n] = 0.0
    return out


def random_mask_view(sample: WindowedSample, mask_fraction: float, rng: np.random.Generator) -> WindowedSample:
    return WindowedSample(mask_array(sample.window, mask_fraction, rng), sample.origin, None)


def windows_from_records(records: list[EmgRecord], L: int, stride: int) -> LabeledWindows:
    wins, labels, rids, users = [], [], [], []
    for r in records:
        for w in segment_windows(r, L, stride):
            wins.append(w.window)
            labels.append(-1 if w.label is None else w.label)
            rids.append(r.record_id)
            users.append(r.user_id)
    if not wins:
        raise ConfigurationError("no windows produced; records shorter than window length")
    return LabeledWindows(np.stack(wins), np.array(labels), np.array(rids), np.array(users))


def channel_stats(windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over all windows and time steps."""
    mean = windows.mean(axis=(0, 2))
    std = windows.std(axis=(0, 2))
    return mean, np.where(std > 1e-12, std, 1.0)


def normalize(windows: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (windows - mean[None, :, None]) / std[None, :, None]


# ---------------------------------------------------------------------------
# synthetic users
# ---------------------------------------------------------------------------


@dataclass
class SyntheticUserProfile:
    user_id: str
    channel_gain: np.ndarray
    channel_rotation: int = 0
    time_warp: float = 1.0
    noise_std: float = 0.0
    baseline_drift_amp: float = 0.0
    # user-specific additive waveform per class (execution style), or None
    style: np.ndarray | None = None

    @classmethod
    def identity(cls, user_id: str, channels: int) -> "SyntheticUserProfile":
        return cls(user_id, np.ones(channels))


@dataclass
class SynthConfig:
    num_users: int = 10
    num_classes: int = 5
    windows_per_class: int = 40
    channels: int = 8
    L: int = 80
    seed: int = 0
    sample_rate_hz: int = 2000
    gain_range: tuple[float, float] = (0.6, 1.5)
    max_rotation: int = 2
    warp_range: tuple[float, float] = (0.8, 1.25)
    noise_std: float = 0.25
    drift_amp: float = 0.2
    rep_jitter: float = 0.15  # per-repetition amplitude/shift variability
    spatial_spread: tuple[float, float] = (1.0, 2.5)  # in channels
    style_mix: float = 0.6
    # per-repetition contraction strength, log-uniform; weak repetitions are noise dominated
    rep_gain_range: tuple[float, float] = (1.0, 1.0)


def _class_templates(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Base waveforms, num_classes x channels x ext_len, defined past L so a
    warp of up to 1.25 can be cropped back to L.

    Each component is a burst-modulated sinusoid whose amplitude spreads over
    neighbouring electrodes (circular armband geometry).
    """
    ext = int(math.ceil(cfg.L * cfg.warp_range[1])) + 2
    t = np.arange(ext) / cfg.L
    C = cfg.channels
    ch = np.arange(C)
    out = np.zeros((cfg.num_classes, C, ext))
    for c in range(cfg.num_classes):
        for _ in range(int(rng.integers(2, 5))):
            amp = rng.uniform(0.5, 1.0)
            freq = rng.uniform(1.0, 8.0)
            phase = rng.uniform(0, 2 * np.pi)
            center = rng.uniform(0.15, 0.85)
            width = rng.uniform(0.08, 0.3)
            mu = rng.uniform(0, C)
            spread = rng.uniform(*cfg.spatial_spread)
            dist = np.abs(ch - mu)
            dist = np.minimum(dist, C - dist)
            spatial = np.exp(-0.5 * (dist / spread) ** 2)
            lag = rng.uniform(-0.5, 0.5, size=C)
            burst = np.exp(-0.5 * ((t - center) / width) ** 2)
            out[c] += amp * spatial[:, None] * burst * np.sin(2 * np.pi * freq * t + phase + lag[:, None])
    return out


def sample_profile(user_id: str, cfg: SynthConfig, rng: np.random.Generator) -> SyntheticUserProfile:
    return SyntheticUserProfile(
        user_id=user_id,
        channel_gain=rng.uniform(*cfg.gain_range, size=cfg.channels),
        channel_rotation=int(rng.integers(0, cfg.max_rotation + 1)),
        time_warp=float(rng.uniform(*cfg.warp_range)),
        noise_std=cfg.noise_std,
        baseline_drift_amp=cfg.drift_amp,
        style=cfg.style_mix * _class_templates(cfg, rng) if cfg.style_mix else None,
    )


def render_repetition(
    template: np.ndarray,
    profile: SyntheticUserProfile,
    L: int,
    rng: np.random.Generator,
    jitter: float = 0.0,
    rep_gain_range: tuple[float, float] = (1.0, 1.0),
) -> np.ndarray:
    """Apply one user's transform to a class template, returning channels x L."""
    C, ext = template.shape
    shift = jitter * rng.uniform(-1, 1) * L * 0.25 if jitter else 0.0
    src = np.arange(L) / profile.time_warp + shift
    src = np.clip(src, 0, ext - 1)
    grid = np.arange(ext)
    x = np.stack([np.interp(src, grid, template[ch]) for ch in range(C)])
    if jitter:
        x = x * (1.0 + jitter * rng.uniform(-1, 1, size=(C, 1)))
    lo, hi = rep_gain_range
    if lo != hi:
        x = x * np.exp(rng.uniform(np.log(lo), np.log(hi)))
    elif lo != 1.0:
        x = x * lo
    x = x * profile.channel_gain[:, None]
    x = np.roll(x, profile.channel_rotation, axis=0)
    if profile.baseline_drift_amp:
        ph = rng.uniform(0, 2 * np.pi, size=(C, 1))
        x = x + profile.baseline_drift_amp * np.sin(np.pi * np.arange(L)[None, :] / L + ph)
    if profile.noise_std:
        x = x + rng.normal(0.0, profile.noise_std, size=x.shape)
    return x


def synth_generate(cfg: SynthConfig, profiles: dict[str, SyntheticUserProfile] | None = None):
    """Generate one record per (user, class) made of ``windows_per_class``
    back-to-back gesture repetitions of length L.

    Returns ``(records, labels, profiles)``; ``labels[i]`` is the ground-truth
    class of ``records[i]`` (also stored on the record).
    """
    if min(cfg.num_users, cfg.num_classes, cfg.windows_per_class, cfg.channels, cfg.L) < 1:
        raise ConfigurationError("all synthetic counts must be >= 1")
    root = np.random.SeedSequence(cfg.seed)
    t_seed, p_seed, r_seed = root.spawn(3)
    templates = _class_templates(cfg, np.random.default_rng(t_seed))
    prng = np.random.default_rng(p_seed)
    user_ids = [f"u{i:03d}" for i in range(cfg.num_users)]
    if profiles is None:
        profiles = {u: sample_profile(u, cfg, prng) for u in user_ids}
    user_seeds = r_seed.spawn(cfg.num_users)
    records, labels = [], []
    for u, useed in zip(user_ids, user_seeds):
        rng = np.random.default_rng(useed)
        prof = profiles[u]
        for c in range(cfg.num_classes):
            base = templates[c] if prof.style is None else templates[c] + prof.style[c]
            reps = [
                render_repetition(base, prof, cfg.L, rng, cfg.rep_jitter, cfg.rep_gain_range)
                for _ in range(cfg.windows_per_class)
            ]
            records.append(EmgRecord(u, f"g{c}", np.concatenate(reps, axis=1), c, cfg.sample_rate_hz))
            labels.append(c)
    return records, labels, profiles


# ---------------------------------------------------------------------------
# cross-user splits
# ---------------------------------------------------------------------------


@dataclass
class UserSplit:
    fold_index: int
    train_users: list[str]
    val_users: list[str]
    test_users: list[str]


def make_cross_user_splits(user_ids, num_folds: int = 10, seed: int = 0) -> list[UserSplit]:
    users = list(user_ids)
    if len(users) < num_folds:
        raise ConfigurationError(f"{len(users)} users cannot fill {num_folds} folds")
    order = [users[i] for i in np.random.default_rng(seed).permutation(len(users))]
    groups = [list(g) for g in np.array_split(np.array(order, dtype=object), num_folds)]
    splits = []
    for k in range(num_folds):
        test = groups[k]
        # start after the test group so the validation users rotate with k
        rest = [u for j in range(1, num_folds) for u in groups[(k + j) % num_folds]]
        n_val = max(1, int(round(len(rest) / 9)))
        val = rest[:n_val]
        train = rest[n_val:]
        splits.append(UserSplit(k, train, val, test))
    return splits
