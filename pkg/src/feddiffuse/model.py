"""UNet-style noise predictor over an explicit flat parameter vector.

The parameter vector is laid out in construction order encoder -> bottleneck ->
decoder, so each segment is one contiguous index range.  The network itself is
evaluated with torch, using views into the flat vector; gradients come from
torch's reverse-mode autodiff and land in a single flat gradient.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import NoiseSchedule, RNG, draw_noise, q_sample
from .errors import ConfigurationError, NumericError

SEGMENTS = ("encoder", "bottleneck", "decoder")
CHECKPOINT_MAGIC = b"FDDCKPT1"


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    base_channels: int = 16
    depth: int = 3
    emb_dim: int = 32
    image_size: int = 28
    pad: int = 2  # zero padding per side; 28 + 2*2 = 32 downsamples exactly three times
    groups: int = 8
    dtype: str = "float32"

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if self.emb_dim < 2 or self.emb_dim % 2:
            raise ConfigurationError(f"emb_dim must be a positive even integer, got {self.emb_dim}")
        if min(self.in_channels, self.base_channels, self.image_size, self.groups) < 1 or self.pad < 0:
            raise ConfigurationError(f"invalid model config {self}")
        if self.padded_size % (2 ** self.depth):
            raise ConfigurationError(
                f"image side {self.image_size} + 2*pad {self.pad} = {self.padded_size} "
                f"is not divisible by 2**depth = {2 ** self.depth}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def padded_size(self) -> int:
        return self.image_size + 2 * self.pad

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.image_size, self.image_size)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.depth)]

    @property
    def time_dim(self) -> int:
        return 4 * self.base_channels


@dataclass(frozen=True)
class SegmentLayout:
    encoder: tuple[int, int]
    bottleneck: tuple[int, int]
    decoder: tuple[int, int]

    def __post_init__(self):
        ranges = [self.encoder, self.bottleneck, self.decoder]
        if ranges[0][0] != 0 or any(a[1] != b[0] for a, b in zip(ranges, ranges[1:])):
            raise ConfigurationError(f"segment ranges must tile [0, P) in order: {ranges}")
        if any(stop <= start for start, stop in ranges):
            raise ConfigurationError(f"segment ranges must be nonempty: {ranges}")

    @classmethod
    def from_sizes(cls, encoder: int, bottleneck: int, decoder: int) -> "SegmentLayout":
        return cls((0, encoder), (encoder, encoder + bottleneck),
                   (encoder + bottleneck, encoder + bottleneck + decoder))

    @property
    def total(self) -> int:
        return self.decoder[1]

    def range(self, segment: str) -> tuple[int, int]:
        if segment not in SEGMENTS:
            raise ValueError(f"unknown segment {segment!r}; expected one of {SEGMENTS}")
        return getattr(self, segment)

    def slice(self, segment: str) -> slice:
        return slice(*self.range(segment))

    def size(self, segment: str) -> int:
        start, stop = self.range(segment)
        return stop - start

    def sizes(self) -> dict[str, int]:
        return {s: self.size(s) for s in SEGMENTS}


# ---------------------------------------------------------------------------
# parameter inventory


def _block_specs(prefix, cin, cout, tdim):
    specs = [
        (f"{prefix}.gn1.weight", (cin,), "ones"),
        (f"{prefix}.gn1.bias", (cin,), "zeros"),
        (f"{prefix}.conv1.weight", (cout, cin, 3, 3), "kaiming"),
        (f"{prefix}.conv1.bias", (cout,), "zeros"),
        (f"{prefix}.temb.weight", (cout, tdim), "kaiming"),
        (f"{prefix}.temb.bias", (cout,), "zeros"),
        (f"{prefix}.gn2.weight", (cout,), "ones"),
        (f"{prefix}.gn2.bias", (cout,), "zeros"),
        (f"{prefix}.conv2.weight", (cout, cout, 3, 3), "kaiming"),
        (f"{prefix}.conv2.bias", (cout,), "zeros"),
    ]
    if cin != cout:
        specs += [(f"{prefix}.skip.weight", (cout, cin, 1, 1), "kaiming"),
                  (f"{prefix}.skip.bias", (cout,), "zeros")]
    return specs


def parameter_specs(cfg: ModelConfig) -> dict[str, list[tuple[str, tuple, str]]]:
    """Named parameter shapes per segment, in construction order."""
    ch, tdim, base = cfg.channels, cfg.time_dim, cfg.base_channels
    enc = [
        ("time.lin1.weight", (tdim, cfg.emb_dim), "kaiming"),
        ("time.lin1.bias", (tdim,), "zeros"),
        ("time.lin2.weight", (tdim, tdim), "kaiming"),
        ("time.lin2.bias", (tdim,), "zeros"),
        ("init.weight", (base, cfg.in_channels, 3, 3), "kaiming"),
        ("init.bias", (base,), "zeros"),
    ]
    cin = base
    for i, c in enumerate(ch):
        enc += _block_specs(f"enc{i}", cin, c, tdim)
        enc += [(f"down{i}.weight", (c, c, 3, 3), "kaiming"), (f"down{i}.bias", (c,), "zeros")]
        cin = c
    bot = _block_specs("bot0", ch[-1], ch[-1], tdim) + _block_specs("bot1", ch[-1], ch[-1], tdim)
    dec = []
    prev = ch[-1]
    for j, c in enumerate(reversed(ch)):
        dec += [(f"up{j}.weight", (c, prev, 3, 3), "kaiming"), (f"up{j}.bias", (c,), "zeros")]
        dec += _block_specs(f"dec{j}", 2 * c, c, tdim)
        prev = c
    dec += [
        ("out.gn.weight", (base,), "ones"),
        ("out.gn.bias", (base,), "zeros"),
        ("out.weight", (cfg.in_channels, base, 1, 1), "kaiming"),
        ("out.bias", (cfg.in_channels,), "zeros"),
    ]
    return {"encoder": enc, "bottleneck": bot, "decoder": dec}


@lru_cache(maxsize=32)
def parameter_count(cfg: ModelConfig) -> int:
    return sum(math.prod(shape) for specs in parameter_specs(cfg).values() for _, shape, _ in specs)


def segment_layout(cfg: ModelConfig) -> SegmentLayout:
    specs = parameter_specs(cfg)
    sizes = [sum(math.prod(shape) for _, shape, _ in specs[s]) for s in SEGMENTS]
    return SegmentLayout.from_sizes(*sizes)


@lru_cache(maxsize=32)
def _offsets(cfg: ModelConfig):
    out, pos = [], 0
    for seg in SEGMENTS:
        for name, shape, init in parameter_specs(cfg)[seg]:
            n = math.prod(shape)
            out.append((name, pos, shape, init))
            pos += n
    return out


# ---------------------------------------------------------------------------
# denoiser


@dataclass(frozen=True, eq=False)
class Denoiser:
    config: ModelConfig
    params: np.ndarray
    layout: SegmentLayout

    def __post_init__(self):
        params = np.array(self.params, dtype=np.float64)
        if params.ndim != 1 or params.size != self.layout.total:
            raise ValueError(f"parameter vector of length {params.size} does not match layout total {self.layout.total}")
        if params.size != parameter_count(self.config):
            raise ValueError(f"parameter vector of length {params.size} does not match config "
                             f"(expected {parameter_count(self.config)})")
        params.flags.writeable = False
        object.__setattr__(self, "params", params)

    @property
    def num_params(self) -> int:
        return self.params.size

    def with_params(self, params: np.ndarray) -> "Denoiser":
        return Denoiser(self.config, params, self.layout)

    @cached_property
    def _torch_params(self) -> dict[str, torch.Tensor]:
        flat = torch.tensor(self.params, dtype=getattr(torch, self.config.dtype))
        return unflatten(self.config, flat)

    def __call__(self, xt: np.ndarray, t) -> np.ndarray:
        return forward(self, xt, t)


def build_denoiser(config: ModelConfig | None = None, rng: np.random.Generator | int = 0) -> Denoiser:
    """Build a denoiser with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) kernels and zero biases.

    This is torch's default Kaiming-uniform bound (a = sqrt(5)).  The larger
    ReLU-gain bound sqrt(6 / fan_in) inflates activations through the residual
    sums and slows early training markedly.
    """
    config = config or ModelConfig()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = np.empty(parameter_count(config), dtype=np.float64)
    for name, pos, shape, init in _offsets(config):
        n = math.prod(shape)
        if init == "kaiming":
            fan_in = math.prod(shape[1:])
            bound = 1.0 / math.sqrt(fan_in)
            params[pos:pos + n] = rng.uniform(-bound, bound, n)
        elif init == "ones":
            params[pos:pos + n] = 1.0
        else:
            params[pos:pos + n] = 0.0
    return Denoiser(config, params, segment_layout(config))


def unflatten(cfg: ModelConfig, flat: torch.Tensor) -> dict[str, torch.Tensor]:
    return {name: flat.narrow(0, pos, math.prod(shape)).view(shape)
            for name, pos, shape, _ in _offsets(cfg)}


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding: ``[sin(t w_0..w_{d/2-1}), cos(t w_0..w_{d/2-1})]``, w_i = 10000^(-2i/d).

    Scalar ``t`` gives a vector of length ``dim``; a vector of timesteps gives
    one row per timestep.
    """
    if dim < 2 or dim % 2:
        raise ConfigurationError(f"embedding dimension must be a positive even integer, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("timesteps must be non-negative")
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    angles = t[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def _group_norm(x, p, prefix, groups):
    return F.group_norm(x, math.gcd(groups, x.shape[1]), p[f"{prefix}.weight"], p[f"{prefix}.bias"])


def _res_block(x, temb, p, prefix, groups):
    h = F.silu(_group_norm(x, p, f"{prefix}.gn1", groups))
    h = F.conv2d(h, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"], padding=1)
    h = h + F.linear(temb, p[f"{prefix}.temb.weight"], p[f"{prefix}.temb.bias"])[:, :, None, None]
    h = F.silu(_group_norm(h, p, f"{prefix}.gn2", groups))
    h = F.conv2d(h, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"], padding=1)
    if f"{prefix}.skip.weight" in p:
        x = F.conv2d(x, p[f"{prefix}.skip.weight"], p[f"{prefix}.skip.bias"])
    return x + h


def apply_unet(cfg: ModelConfig, p: dict[str, torch.Tensor], x: torch.Tensor, t: np.ndarray) -> torch.Tensor:
    """Evaluate the network on torch inputs; ``p`` maps parameter names to tensors."""
    g = cfg.groups
    emb = torch.as_tensor(time_embedding(t, cfg.emb_dim), dtype=x.dtype)
    temb = F.linear(emb, p["time.lin1.weight"], p["time.lin1.bias"])
    temb = F.linear(F.silu(temb), p["time.lin2.weight"], p["time.lin2.bias"])
    temb = F.silu(temb)

    if cfg.pad:
        x = F.pad(x, (cfg.pad,) * 4)
    h = F.conv2d(x, p["init.weight"], p["init.bias"], padding=1)
    skips = []
    for i in range(cfg.depth):
        h = _res_block(h, temb, p, f"enc{i}", g)
        skips.append(h)
        h = F.conv2d(h, p[f"down{i}.weight"], p[f"down{i}.bias"], stride=2, padding=1)
    h = _res_block(h, temb, p, "bot0", g)
    h = _res_block(h, temb, p, "bot1", g)
    for j in range(cfg.depth):
        h = h.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)  # nearest-neighbour x2
        h = F.conv2d(h, p[f"up{j}.weight"], p[f"up{j}.bias"], padding=1)
        h = torch.cat([h, skips.pop()], dim=1)
        h = _res_block(h, temb, p, f"dec{j}", g)
    h = F.silu(_group_norm(h, p, "out.gn", g))
    out = F.conv2d(h, p["out.weight"], p["out.bias"])
    if cfg.pad:
        out = out[..., cfg.pad:-cfg.pad, cfg.pad:-cfg.pad]
    return out


def _check_input(d: Denoiser, xt: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
    xt = np.asarray(xt)
    if xt.ndim != 4 or xt.shape[1:] != d.config.image_shape:
        raise ValueError(f"expected input of shape (n, {', '.join(map(str, d.config.image_shape))}), got {xt.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (xt.shape[0],))
    if np.any(t < 1):
        raise ValueError("timesteps must be >= 1")
    return xt, t


def forward(d: Denoiser, xt: np.ndarray, t) -> np.ndarray:
    """Predicted noise for a batch ``xt`` of shape (n, c, h, w) at timesteps ``t``."""
    xt, t = _check_input(d, xt, t)
    dtype = getattr(torch, d.config.dtype)
    with torch.no_grad():
        out = apply_unet(d.config, d._torch_params, torch.as_tensor(xt, dtype=dtype), t)
    return out.numpy().astype(np.float64)


def loss_gradient_at(d: Denoiser, batch: np.ndarray, t: np.ndarray, eps: np.ndarray,
                     sched: NoiseSchedule) -> tuple[float, np.ndarray]:
    """Loss and exact flat gradient for given (t, eps) draws."""
    batch, t = _check_input(d, batch, t)
    xt = q_sample(batch, t, eps, sched)
    dtype = getattr(torch, d.config.dtype)
    flat = torch.tensor(d.params, dtype=dtype, requires_grad=True)
    pred = apply_unet(d.config, unflatten(d.config, flat), torch.as_tensor(xt, dtype=dtype), t)
    target = torch.as_tensor(eps, dtype=dtype)
    loss = (target - pred).square().flatten(1).sum(dim=1).mean()
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} (batch size {len(batch)}, t range [{t.min()}, {t.max()}], "
                           f"max |param| {np.max(np.abs(d.params)):.3g})")
    (grad,) = torch.autograd.grad(loss, flat)
    return value, grad.numpy().astype(np.float64)


def loss_gradient(d: Denoiser, batch: np.ndarray, sched: NoiseSchedule, rng: RNG) -> tuple[float, np.ndarray]:
    """Mean L_simple over ``batch`` and its gradient w.r.t. the flat parameters."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    t, eps = draw_noise(sched, batch.shape[0], batch.shape[1:], rng)
    return loss_gradient_at(d, batch, t, eps, sched)


# ---------------------------------------------------------------------------
# segments


def read_segment(params: np.ndarray, layout: SegmentLayout, segment: str) -> np.ndarray:
    return np.array(params[layout.slice(segment)], dtype=np.float64)


def write_segment(params: np.ndarray, layout: SegmentLayout, segment: str, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (layout.size(segment),):
        raise ValueError(f"{segment} segment expects {layout.size(segment)} values, got shape {values.shape}")
    out = np.array(params, dtype=np.float64)
    out[layout.slice(segment)] = values
    return out


def segment_mask(layout: SegmentLayout, segments) -> np.ndarray:
    mask = np.zeros(layout.total, dtype=bool)
    for s in segments:
        mask[layout.slice(s)] = True
    return mask


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(d: Denoiser, path) -> None:
    """Write magic, a JSON header (config, P, layout) and the little-endian float64 parameters."""
    header = json.dumps({
        "config": asdict(d.config),
        "num_params": d.num_params,
        "layout": {s: list(d.layout.range(s)) for s in SEGMENTS},
    }, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(d.params.astype("<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Denoiser:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a denoiser checkpoint (bad magic {data[:8]!r})")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    body = data[12 + hlen:]
    n = header["num_params"]
    if len(body) != 8 * n:
        raise ValueError(f"{path}: expected {8 * n} bytes of parameters, found {len(body)}")
    config = ModelConfig(**header["config"])
    layout = SegmentLayout(**{s: tuple(r) for s, r in header["layout"].items()})
    return Denoiser(config, np.frombuffer(body, dtype="<f8"), layout)
