"""Flat key=value run configuration, fingerprinting and seed streams."""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .data import ConfigurationError, SynthConfig
from .model import BackboneConfig
from .pretrain import PretrainConfig
from .ssa import VIEW_MODES, SSAConfig
from .ssp import SSPConfig

# keys that do not change results and stay out of the fingerprint
_UNFINGERPRINTED = {"seed", "out_dir"}


@dataclass
class RunConfig:
    # data
    data_dir: str = "data"
    synth_users: int = 10
    synth_classes: int = 5
    synth_windows_per_class: int = 40
    synth_channels: int = 8
    synth_noise_std: float = 0.25
    synth_drift_amp: float = 0.2
    synth_rep_jitter: float = 0.15
    synth_style_mix: float = 0.6
    synth_gain_min: float = 0.6
    synth_gain_max: float = 1.5
    window_length: int = 64
    window_stride: int = 32
    # backbone
    conv_blocks: str = "32:7:2,32:5:1,32:3:1"
    latent_dim: int = 32
    encoder_layers: int = 2
    encoder_heads: int = 2
    context_window: int = 17
    prediction_horizons: int = 4
    num_classes: int = 5
    # protocol
    num_folds: int = 10
    fold: int = 0
    mode: str = "full"
    # optimizer (shared by all stages)
    batch_size: int = 64
    beta1: float = 0.5
    beta2: float = 0.99
    weight_decay: float = 3e-4
    # stage 0: source pretraining
    pretrain_epochs: int = 100
    pretrain_lr: float = 1e-4
    pretrain_ssa_weight: float = 0.0
    # stage 1
    ssa_epochs: int = 5
    ssa_lr: float = 1e-7
    view_mode: str = "inversion"
    mask_fraction: float = 0.25
    # stage 2
    ssp_epochs: int = 10
    ssp_lr: float = 1e-7
    alpha: float = 0.996
    xi: float = 0.8
    n_c: int = 15
    ssp_filtering: bool = True
    # ablation grid
    ablation_variants: str = "so,ssa,ssp,full"
    ablation_T_values: str = "17"
    ablation_view_modes: str = "inversion"
    ablation_no_filter: bool = False
    ablation_seeds: str = "0"
    # run
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.view_mode not in VIEW_MODES:
            raise ConfigurationError(f"view_mode must be one of {VIEW_MODES}, got {self.view_mode!r}")

    # -- serialization -----------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, **overrides) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigurationError(f"unknown config key {key!r}")
            values[key] = _parse(val, types[key], key)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read(), **overrides)

    def fingerprint(self) -> str:
        canon = "".join(
            f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self) if f.name not in _UNFINGERPRINTED
        )
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    # -- stage configs -----------------------------------------------------
    def backbone(self) -> BackboneConfig:
        blocks = [tuple(int(x) for x in b.split(":")) for b in self.conv_blocks.split(",")]
        return BackboneConfig(
            channels=self.synth_channels,
            window_length=self.window_length,
            conv_blocks=blocks,
            latent_dim=self.latent_dim,
            encoder_layers=self.encoder_layers,
            encoder_heads=self.encoder_heads,
            context_window=self.context_window,
            prediction_horizons=self.prediction_horizons,
            num_classes=self.num_classes,
        )

    def synth(self, seed: int | None = None) -> SynthConfig:
        return SynthConfig(
            num_users=self.synth_users,
            num_classes=self.num_classes,
            windows_per_class=self.synth_windows_per_class,
            channels=self.synth_channels,
            L=self.window_length,
            seed=self.seed if seed is None else seed,
            noise_std=self.synth_noise_std,
            drift_amp=self.synth_drift_amp,
            rep_jitter=self.synth_rep_jitter,
            style_mix=self.synth_style_mix,
            gain_range=(self.synth_gain_min, self.synth_gain_max),
        )

    def pretrain(self) -> PretrainConfig:
        return PretrainConfig(
            epochs=self.pretrain_epochs,
            lr=self.pretrain_lr,
            batch_size=self.batch_size,
            beta1=self.beta1,
            beta2=self.beta2,
            weight_decay=self.weight_decay,
            ssa_weight=self.pretrain_ssa_weight,
            T=self.context_window,
        )

    def ssa(self, **kw) -> SSAConfig:
        base = SSAConfig(
            epochs=self.ssa_epochs,
            lr=self.ssa_lr,
            batch_size=self.batch_size,
            T=self.context_window,
            view_mode=self.view_mode,
            mask_fraction=self.mask_fraction,
            beta1=self.beta1,
            beta2=self.beta2,
            weight_decay=self.weight_decay,
        )
        return replace(base, **kw)

    def ssp(self, **kw) -> SSPConfig:
        base = SSPConfig(
            epochs=self.ssp_epochs,
            lr=self.ssp_lr,
            batch_size=self.batch_size,
            alpha=self.alpha,
            xi=self.xi,
            n_c=self.n_c,
            filtering=self.ssp_filtering,
            beta1=self.beta1,
            beta2=self.beta2,
            weight_decay=self.weight_decay,
        )
        return replace(base, **kw)

    def as_dict(self) -> dict:
        return asdict(self)


MODES = ("none", "ssa", "ssp", "full")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(val: str, typ, key: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = val.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return low in ("true", "1", "yes")
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        return val
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {val!r} as {typ}") from None


def derive_seed(seed: int, *stream) -> int:
    """Seed for a named stream; streams are independent of each other so
    toggling one stage leaves the others' randomness untouched."""
    words = [int(seed)] + [zlib.crc32(str(s).encode()) for s in stream]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def stream_rng(seed: int, *stream) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *stream))
