"""Recognition backbone: conv feature extractor, causal self-attention context
encoder, per-horizon prediction heads and the gesture classifier."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .autodiff import DimensionError, Tensor, conv1d, layer_norm, matmul, softmax
from .data import ConfigurationError

CKPT_MAGIC = b"EMUP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def conv_out_length(length: int, width: int, stride: int) -> int:
    return (length - width) // stride + 1


@dataclass
class BackboneConfig:
    channels: int = 8
    window_length: int = 64
    conv_blocks: list = field(default_factory=lambda: [(32, 7, 2), (32, 5, 1), (32, 3, 1)])
    latent_dim: int = 32
    encoder_layers: int = 2
    encoder_heads: int = 2
    context_window: int = 17
    prediction_horizons: int = 4
    num_classes: int = 5

    def __post_init__(self):
        self.conv_blocks = [tuple(int(v) for v in b) for b in self.conv_blocks]
        if self.conv_blocks[-1][0] != self.latent_dim:
            raise ConfigurationError("last conv block must output latent_dim channels")
        if self.latent_dim % self.encoder_heads:
            raise ConfigurationError(f"latent_dim {self.latent_dim} not divisible by {self.encoder_heads} heads")
        lz = self.latent_length
        if lz < self.context_window + self.prediction_horizons:
            raise ConfigurationError(
                f"latent length {lz} < context_window {self.context_window} + horizons {self.prediction_horizons}"
            )

    @property
    def latent_length(self) -> int:
        n = self.window_length
        for _, w, s in self.conv_blocks:
            n = conv_out_length(n, w, s)
        return n

    # flat key=value text, canonical field order
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "conv_blocks":
                v = ",".join(":".join(str(x) for x in b) for b in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BackboneConfig":
        try:
            kv = dict(line.split("=", 1) for line in text.strip().splitlines())
        except ValueError:
            raise CheckpointError("malformed backbone config block") from None
        known = {f.name for f in fields(cls)}
        extra = set(kv) - known
        if extra:
            raise CheckpointError(f"unknown backbone config keys {sorted(extra)}")
        args = {}
        for k, v in kv.items():
            if k == "conv_blocks":
                args[k] = [tuple(int(x) for x in b.split(":")) for b in v.split(",")]
            else:
                args[k] = int(v)
        return cls(**args)


def parameter_manifest(cfg: BackboneConfig) -> list[tuple[str, tuple]]:
    """Canonical (name, shape) list of trainable parameters."""
    d = cfg.latent_dim
    out = []
    cin = cfg.channels
    for i, (o, w, _) in enumerate(cfg.conv_blocks):
        out += [(f"conv{i}.weight", (o, cin, w)), (f"conv{i}.bias", (o,))]
        cin = o
    out.append(("enc.pos", (cfg.latent_length, d)))
    for j in range(cfg.encoder_layers):
        p = f"enc.layer{j}."
        out += [
            (p + "ln1.gain", (d,)),
            (p + "ln1.bias", (d,)),
            (p + "attn.wq", (d, d)),
            (p + "attn.wk", (d, d)),
            (p + "attn.wv", (d, d)),
            (p + "attn.wo", (d, d)),
            (p + "ln2.gain", (d,)),
            (p + "ln2.bias", (d,)),
            (p + "ff1.weight", (d, 2 * d)),
            (p + "ff1.bias", (2 * d,)),
            (p + "ff2.weight", (2 * d, d)),
            (p + "ff2.bias", (d,)),
        ]
    out += [("enc.ln_out.gain", (d,)), ("enc.ln_out.bias", (d,))]
    for k in range(1, cfg.prediction_horizons + 1):
        out.append((f"head{k}.weight", (d, d)))
    out += [("cls.weight", (cfg.num_classes, d)), ("cls.bias", (cfg.num_classes,))]
    return out


def buffer_manifest(cfg: BackboneConfig) -> list[tuple[str, tuple]]:
    return [("norm.mean", (cfg.channels,)), ("norm.std", (cfg.channels,))]


def _fan_in(name: str, shape: tuple, cfg: BackboneConfig) -> int:
    if name.startswith("conv"):
        i = int(name[4 : name.index(".")])
        w = cfg.conv_blocks[i][1]
        cin = cfg.channels if i == 0 else cfg.conv_blocks[i - 1][0]
        return cin * w
    if name == "cls.weight" or name == "cls.bias":
        return cfg.latent_dim
    if name.endswith("ff2.weight") or name.endswith("ff2.bias"):
        return 2 * cfg.latent_dim
    return cfg.latent_dim


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis, causal."""
    n, dh = q.shape[-2], q.shape[-1]
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    mask = np.tril(np.ones((n, n), dtype=bool))
    return matmul(softmax(scores, axis=-1, mask=mask), v)


class Backbone:
    def __init__(self, cfg: BackboneConfig, seed: int = 0, provenance: dict | None = None):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, shape in parameter_manifest(cfg):
            if ".ln" in name:
                vals = np.ones(shape) if name.endswith("gain") else np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(_fan_in(name, shape, cfg))
                vals = rng.uniform(-bound, bound, size=shape)
            self.params[name] = Tensor(vals, requires_grad=True, name=name)
        self.buffers = {"norm.mean": np.zeros(cfg.channels), "norm.std": np.ones(cfg.channels)}
        self.provenance: dict[str, str] = dict(provenance or {})

    # -- helpers -----------------------------------------------------------
    def copy(self) -> "Backbone":
        m = Backbone.__new__(Backbone)
        m.cfg = self.cfg
        m.params = {k: Tensor(p.values.copy(), requires_grad=True, name=k) for k, p in self.params.items()}
        m.buffers = {k: v.copy() for k, v in self.buffers.items()}
        m.provenance = dict(self.provenance)
        return m

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: p.grad for k, p in self.params.items()}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.values for k, p in self.params.items()}

    # -- forward -----------------------------------------------------------
    def _check_window(self, x: np.ndarray | Tensor) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        want = (self.cfg.channels, self.cfg.window_length)
        if x.shape[-2:] != want or x.ndim not in (2, 3):
            raise DimensionError(f"window shape {x.shape} does not match (channels, L) = {want}")
        return x

    def extract_features(self, x) -> Tensor:
        """``channels x L`` (or batched) -> latents ``L_z x d`` (or batched)."""
        h = self._check_window(x)
        for i, (_, _, stride) in enumerate(self.cfg.conv_blocks):
            h = conv1d(h, self.params[f"conv{i}.weight"], stride)
            h = (h + self.params[f"conv{i}.bias"].reshape(-1, 1)).relu()
        return h.swapaxes(-1, -2)

    def encode_sequence(self, z: Tensor) -> Tensor:
        """Run the causal encoder over ``(batch x) n x d`` and return the
        output at the last position."""
        cfg = self.cfg
        n, d = z.shape[-2], z.shape[-1]
        H = cfg.encoder_heads
        dh = d // H
        P = self.params
        h = z + P["enc.pos"][:n]
        lead = h.shape[:-2]
        for j in range(cfg.encoder_layers):
            p = f"enc.layer{j}."
            a = layer_norm(h, P[p + "ln1.gain"], P[p + "ln1.bias"])

            def split(t):
                return t.reshape(*lead, n, H, dh).swapaxes(-2, -3)

            q = split(matmul(a, P[p + "attn.wq"]))
            k = split(matmul(a, P[p + "attn.wk"]))
            v = split(matmul(a, P[p + "attn.wv"]))
            att = causal_attention(q, k, v).swapaxes(-2, -3).reshape(*lead, n, d)
            h = h + matmul(att, P[p + "attn.wo"])
            a = layer_norm(h, P[p + "ln2.gain"], P[p + "ln2.bias"])
            f = (matmul(a, P[p + "ff1.weight"]) + P[p + "ff1.bias"]).relu()
            h = h + matmul(f, P[p + "ff2.weight"]) + P[p + "ff2.bias"]
        h = layer_norm(h, P["enc.ln_out.gain"], P["enc.ln_out.bias"])
        return h[..., n - 1, :]

    def encode_context(self, z: Tensor, upto: int) -> Tensor:
        lz = z.shape[-2]
        if not 1 <= upto <= lz:
            raise IndexError(f"upto={upto} outside [1, {lz}]")
        return self.encode_sequence(z[..., :upto, :])

    def predict_future(self, c: Tensor, k: int) -> Tensor:
        K = self.cfg.prediction_horizons
        if not 1 <= k <= K:
            raise IndexError(f"horizon {k} outside [1, {K}]")
        w = self.params[f"head{k}.weight"]
        if c.ndim == 1:
            return matmul(w, c.reshape(-1, 1)).reshape(-1)
        return matmul(c, w.swapaxes(0, 1))

    def classify(self, x) -> Tensor:
        z = self.extract_features(x)
        pooled = z.mean(axis=-2)
        w = self.params["cls.weight"]
        if pooled.ndim == 1:
            return matmul(w, pooled.reshape(-1, 1)).reshape(-1) + self.params["cls.bias"]
        return matmul(pooled, w.swapaxes(0, 1)) + self.params["cls.bias"]


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

_DTYPES = {"f4": "<f4", "f8": "<f8"}


def _blob(text: str) -> bytes:
    b = text.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_checkpoint(model: Backbone, dtype: str = "f8") -> bytes:
    items = [(n, model.params[n].values) for n, _ in parameter_manifest(model.cfg)]
    items += [(n, model.buffers[n]) for n, _ in buffer_manifest(model.cfg)]
    prov = "".join(f"{k}={model.provenance[k]}\n" for k in sorted(model.provenance))
    out = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), _blob(model.cfg.to_text()), _blob(prov)]
    out.append(struct.pack("<I", len(items)))
    for name, arr in items:
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb + dtype.encode() + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in items:
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> Backbone:
    try:
        return _decode(buf)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None


def _decode(buf: bytes) -> Backbone:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint format_version {version}, expected {CKPT_VERSION}")
    pos = 6

    def read_blob():
        nonlocal pos
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        s = buf[pos : pos + n].decode("utf-8")
        pos += n
        return s

    cfg = BackboneConfig.from_text(read_blob())
    prov_text = read_blob()
    prov = dict(line.split("=", 1) for line in prov_text.splitlines() if line)
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    manifest = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + ln].decode("utf-8")
        pos += ln
        dtype = buf[pos : pos + 2].decode()
        ndim = buf[pos + 2]
        pos += 3
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        if dtype not in _DTYPES:
            raise CheckpointError(f"parameter {name!r}: unknown dtype {dtype!r}")
        manifest.append((name, dtype, tuple(shape)))
    expected = parameter_manifest(cfg) + buffer_manifest(cfg)
    exp_names = [n for n, _ in expected]
    got_names = [n for n, _, _ in manifest]
    if got_names != exp_names:
        missing = [n for n in exp_names if n not in got_names] + [n for n in got_names if n not in exp_names]
        bad = missing[0] if missing else next(a for a, b in zip(got_names, exp_names) if a != b)
        raise CheckpointError(f"manifest mismatch at parameter {bad!r}")
    for (name, _, shape), (_, want) in zip(manifest, expected):
        if shape != tuple(want):
            raise CheckpointError(f"parameter {name!r}: shape {shape} does not match config {tuple(want)}")
    arrays = {}
    for name, dtype, shape in manifest:
        n = int(np.prod(shape))
        size = n * int(dtype[1])
        if pos + size > len(buf):
            raise CheckpointError(f"parameter {name!r}: payload truncated")
        arrays[name] = np.frombuffer(buf, dtype=_DTYPES[dtype], count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += size
    model = Backbone.__new__(Backbone)
    model.cfg = cfg
    model.params = {n: Tensor(arrays[n], requires_grad=True, name=n) for n, _ in parameter_manifest(cfg)}
    model.buffers = {n: arrays[n] for n, _ in buffer_manifest(cfg)}
    model.provenance = prov
    return model


def save_checkpoint(model: Backbone, path, dtype: str = "f8") -> None:
    Path(path).write_bytes(encode_checkpoint(model, dtype))


def load_checkpoint(path) -> Backbone:
    return decode_checkpoint(Path(path).read_bytes())
