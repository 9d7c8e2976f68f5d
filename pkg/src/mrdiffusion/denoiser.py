"""Conditional noise estimator ``eps(x_t, cond, t) = E(F(x_t) + G(cond), H(t))``.

* ``F``: single 3x3 conv lifting the noisy state to ``C`` channels.
* ``G``: 3x3 conv followed by ``n_rrdb`` residual-in-residual dense blocks,
  encoding the under-sampled image.
* ``H``: learned lookup table, one row per training step.
* ``E``: U-Net. Every residual block adds a linear projection of ``H(t)``
  per channel. Stride-2 convs go down; nearest upsampling followed by the
  next block's 3x3 conv goes up; skips are concatenated.

The output head is zero-initialised, so a fresh network predicts 0.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as nnf
from torch import nn

from .errors import InvalidInputError

__all__ = [
    "ConditionalDenoiser",
    "DenoiserConfig",
    "forward",
    "grads",
    "init_params",
    "map_timestep",
    "mse_eps_loss",
    "param_count",
    "realized_count",
]


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 1, 2)
    n_rrdb: int = 2
    time_embed_dim: int | None = None  # 4 * base_channels when unset
    T_max: int = 50
    in_h: int = 64
    in_w: int = 64
    depth: int | None = None  # must equal len(channel_multipliers) when given

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        if self.depth is None:
            object.__setattr__(self, "depth", len(self.channel_multipliers))
        if self.time_embed_dim is None:
            object.__setattr__(self, "time_embed_dim", 4 * self.base_channels)
        self.validate()

    def validate(self):
        if self.base_channels < 1:
            raise InvalidInputError("base_channels must be >= 1")
        if self.depth != len(self.channel_multipliers) or self.depth < 1:
            raise InvalidInputError(
                f"depth {self.depth} must equal len(channel_multipliers) = {len(self.channel_multipliers)}"
            )
        if any(m < 1 for m in self.channel_multipliers):
            raise InvalidInputError("channel multipliers must be >= 1")
        if self.n_rrdb < 0 or self.time_embed_dim < 1 or self.T_max < 1:
            raise InvalidInputError("n_rrdb >= 0, time_embed_dim >= 1 and T_max >= 1 required")
        div = 2 ** (self.depth - 1)
        if self.in_h % div or self.in_w % div or self.in_h < 1 or self.in_w < 1:
            raise InvalidInputError(
                f"input {self.in_h}x{self.in_w} must be divisible by {div} for depth {self.depth}"
            )

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d


def _groups(ch: int) -> int:
    return max(g for g in range(1, min(8, ch) + 1) if ch % g == 0)


def _conv3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = _conv3(cin, cout)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = _conv3(cout, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(nnf.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(nnf.silu(self.norm2(h)))
        return h + self.skip(x)


class RRDB(nn.Module):
    """Three densely connected convs, growth ``C // 2``, residual scale 0.2."""

    def __init__(self, ch: int, scale: float = 0.2):
        super().__init__()
        g = max(ch // 2, 1)
        self.c1 = _conv3(ch, g)
        self.c2 = _conv3(ch + g, g)
        self.c3 = _conv3(ch + 2 * g, ch)
        self.scale = scale

    def forward(self, x):
        x1 = nnf.silu(self.c1(x))
        x2 = nnf.silu(self.c2(torch.cat([x, x1], 1)))
        x3 = self.c3(torch.cat([x, x1, x2], 1))
        return x + self.scale * x3


class ConditionalDenoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        C, D = cfg.base_channels, cfg.time_embed_dim
        chs = cfg.channels
        self.f_head = _conv3(1, C)
        self.g_head = _conv3(1, C)
        self.g_blocks = nn.ModuleList(RRDB(C) for _ in range(cfg.n_rrdb))
        self.h_table = nn.Embedding(cfg.T_max, D)

        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        cin = C
        for i, ch in enumerate(chs[:-1]):
            self.enc.append(ResBlock(cin, ch, D))
            self.down.append(_conv3(ch, ch, stride=2))
            cin = ch
        self.bottom = ResBlock(cin, chs[-1], D)
        cin = chs[-1]
        self.dec = nn.ModuleList()
        for ch in reversed(chs[:-1]):
            self.dec.append(ResBlock(cin + ch, ch, D))
            cin = ch
        self.out_norm = nn.GroupNorm(_groups(cin), cin)
        self.out_conv = _conv3(cin, 1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def encode_condition(self, cond):
        h = self.g_head(cond)
        for blk in self.g_blocks:
            h = blk(h)
        return h

    def forward(self, x_t, cond, t):
        """``x_t``, ``cond``: (B, H, W); ``t``: (B,) integer steps in [1, T_max]."""
        t = torch.as_tensor(t, device=x_t.device).long().reshape(-1)
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > self.cfg.T_max):
            raise InvalidInputError(f"t outside [1, {self.cfg.T_max}]: {t.tolist()}")
        if x_t.shape != cond.shape:
            raise InvalidInputError(f"x_t {tuple(x_t.shape)} and cond {tuple(cond.shape)} differ")
        if t.numel() == 1 and x_t.shape[0] != 1:
            t = t.expand(x_t.shape[0])
        temb = self.h_table(t - 1)
        h = self.f_head(x_t[:, None]) + self.encode_condition(cond[:, None])
        skips = []
        for blk, down in zip(self.enc, self.down):
            h = blk(h, temb)
            skips.append(h)
            h = down(h)
        h = self.bottom(h, temb)
        for blk in self.dec:
            h = nnf.interpolate(h, scale_factor=2, mode="nearest")
            h = blk(torch.cat([h, skips.pop()], 1), temb)
        return self.out_conv(nnf.silu(self.out_norm(h)))[:, 0]


def init_params(cfg: DenoiserConfig, seed: int = 0, dtype=torch.float32) -> ConditionalDenoiser:
    """Deterministically initialised network (PyTorch's fan-in uniform for convs)."""
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ConditionalDenoiser(cfg)
    return model.to(dtype)


def forward(p: ConditionalDenoiser, x_t, cond, t):
    return p(x_t, cond, t)


def mse_eps_loss(p: ConditionalDenoiser, x_t, cond, t, eps):
    """Mean squared error between ``eps`` and the network's estimate."""
    if eps.shape != x_t.shape:
        raise InvalidInputError(f"eps {tuple(eps.shape)} and x_t {tuple(x_t.shape)} differ")
    return torch.mean((eps - p(x_t, cond, t)) ** 2)


def grads(p: ConditionalDenoiser, x_t, cond, t, eps) -> dict[str, torch.Tensor]:
    """Gradients of :func:`mse_eps_loss` for every named parameter."""
    names, params = zip(*p.named_parameters())
    loss = mse_eps_loss(p, x_t, cond, t, eps)
    gs = torch.autograd.grad(loss, params, allow_unused=True)
    return {
        n: torch.zeros_like(w) if g is None else g for n, w, g in zip(names, params, gs)
    }


def map_timestep(t: int, T_infer: int, T_max: int) -> int:
    """Table row for inference step ``t`` when sampling with a different step count."""
    if T_infer == T_max:
        return t
    return min(max(int(round(t * T_max / T_infer)), 1), T_max)


def _conv_n(cin, cout, k=3):
    return cin * cout * k * k + cout


def _res_n(cin, cout, d):
    n = 2 * cin + _conv_n(cin, cout) + d * cout + cout + 2 * cout + _conv_n(cout, cout)
    return n + (_conv_n(cin, cout, 1) if cin != cout else 0)


def param_count(cfg: DenoiserConfig) -> int:
    """Closed-form parameter count of :class:`ConditionalDenoiser`."""
    C, D = cfg.base_channels, cfg.time_embed_dim
    g = max(C // 2, 1)
    rrdb = _conv_n(C, g) + _conv_n(C + g, g) + _conv_n(C + 2 * g, C)
    n = 2 * _conv_n(1, C) + cfg.n_rrdb * rrdb + cfg.T_max * D
    chs = cfg.channels
    cin = C
    for ch in chs[:-1]:
        n += _res_n(cin, ch, D) + _conv_n(ch, ch)
        cin = ch
    n += _res_n(cin, chs[-1], D)
    cin = chs[-1]
    for ch in reversed(chs[:-1]):
        n += _res_n(cin + ch, ch, D)
        cin = ch
    return n + 2 * cin + _conv_n(cin, 1)


def realized_count(p: nn.Module) -> int:
    return sum(w.numel() for w in p.parameters())
