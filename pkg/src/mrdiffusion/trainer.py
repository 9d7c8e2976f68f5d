"""Training loop: sample (pair, t, eps), noise, regress eps, AdamW step.

Checkpoint layout (little-endian)::

    b"DCMR" | version u32 | header length u64 | header (canonical JSON) | payload

The header carries the config snapshot, the step counter, the numpy RNG
states and a tensor directory (name, dtype, shape, offset, nbytes) into the
raw payload that follows it.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .denoiser import ConditionalDenoiser, DenoiserConfig, init_params
from .errors import (
    DataError,
    FormatError,
    IncompatibleCheckpointError,
    InvalidInputError,
    NumericalError,
)
from .formats import DatasetManifest, atomic_write_bytes, atomic_write_text, load_pairs
from .schedule import DiffusionSchedule, build_schedule

log = logging.getLogger(__name__)

CKPT_MAGIC = b"DCMR"
CKPT_VERSION = 1
CKPT_NAME = "checkpoint.dcmr"
LOSS_LOG_NAME = "loss_log.csv"

# independent per-purpose RNG streams derived from the root seed
STREAMS = ("order", "t", "eps", "augment")
_STREAM_IDS = {name: i + 1 for i, name in enumerate(STREAMS)}

_DTYPES = {
    "float32": (torch.float32, np.dtype("<f4")),
    "float64": (torch.float64, np.dtype("<f8")),
    "int64": (torch.int64, np.dtype("<i8")),
}
_TORCH_TO_NAME = {v[0]: k for k, v in _DTYPES.items()}


@dataclass(frozen=True)
class TrainConfig:
    T: int = 50
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    seed: int = 0
    flip_prob: float = 0.5
    grad_clip: float | None = 1.0
    early_stop: bool = False
    plateau_epochs: int = 5
    plateau_rel: float = 0.01

    def __post_init__(self):
        if self.T < 1 or self.epochs < 0 or self.batch_size < 1:
            raise InvalidInputError("T >= 1, epochs >= 0 and batch_size >= 1 required")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise InvalidInputError("learning_rate and weight_decay must be >= 0")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise InvalidInputError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise InvalidInputError("grad_clip must be positive or None")

    def to_dict(self) -> dict:
        return asdict(self)


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    return {name: np.random.default_rng([seed, sid]) for name, sid in _STREAM_IDS.items()}


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.learning_rate,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=cfg.weight_decay,
    )


def flip_pairs(under: np.ndarray, full: np.ndarray, rng: np.random.Generator, p: float):
    """Random horizontal/vertical flips, the same draw applied to both members of a pair."""
    under, full = under.copy(), full.copy()
    draws = rng.random((len(under), 2)) < p
    for i, (hflip, vflip) in enumerate(draws):
        if hflip:
            under[i], full[i] = under[i][:, ::-1], full[i][:, ::-1]
        if vflip:
            under[i], full[i] = under[i][::-1], full[i][::-1]
    return under, full


def train_step(
    model: ConditionalDenoiser,
    opt: torch.optim.Optimizer,
    under: np.ndarray,
    full: np.ndarray,
    sched: DiffusionSchedule,
    rngs: dict[str, np.random.Generator],
    grad_clip: float | None = 1.0,
    step: int = 0,
) -> float:
    """One optimisation step on a batch of (under, full) pairs; returns the batch loss."""
    n = len(full)
    if n == 0:
        raise InvalidInputError("empty batch")
    t = rngs["t"].integers(1, sched.T + 1, size=n)
    eps = rngs["eps"].standard_normal(full.shape).astype(np.float32)
    ab = sched.alpha_bars[t].astype(np.float32)[:, None, None]
    x_t = np.sqrt(ab) * full + np.sqrt(1.0 - ab) * eps

    dtype = next(model.parameters()).dtype
    x_t, cond, eps_t = (torch.from_numpy(np.ascontiguousarray(a)).to(dtype) for a in (x_t, under, eps))
    opt.zero_grad(set_to_none=True)
    loss = torch.mean((eps_t - model(x_t, cond, torch.from_numpy(t))) ** 2)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at step {step}, t={t.tolist()}")
    loss.backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    opt.step()
    return value


@dataclass
class Checkpoint:
    denoiser: DenoiserConfig
    train: TrainConfig
    state: dict[str, torch.Tensor]
    optimizer: dict[str, torch.Tensor] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    loss_history: list[tuple[int, int, float]] = field(default_factory=list)

    def model(self) -> ConditionalDenoiser:
        model = init_params(self.denoiser, seed=self.train.seed)
        dtype = next(iter(self.state.values())).dtype if self.state else torch.float32
        model = model.to(dtype)
        model.load_state_dict(self.state)
        model.eval()
        return model

    def epoch_losses(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for _, ep, loss in self.loss_history:
            by_epoch.setdefault(ep, []).append(loss)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def _snapshot(model, opt, dcfg, tcfg, rngs, step, epoch, history) -> Checkpoint:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    moments = {}
    names = {id(p): n for n, p in model.named_parameters()}
    for p, st in opt.state.items():
        name = names[id(p)]
        moments[f"exp_avg.{name}"] = st["exp_avg"].detach().clone()
        moments[f"exp_avg_sq.{name}"] = st["exp_avg_sq"].detach().clone()
        moments[f"step.{name}"] = torch.as_tensor(st["step"], dtype=torch.float64).reshape(1).clone()
    rng_state = {k: r.bit_generator.state for k, r in rngs.items()}
    return Checkpoint(dcfg, tcfg, state, moments, rng_state, step, epoch, list(history))


def restore_optimizer(opt: torch.optim.Optimizer, model: torch.nn.Module, ckpt: Checkpoint) -> None:
    for name, p in model.named_parameters():
        key = f"exp_avg.{name}"
        if key in ckpt.optimizer:
            opt.state[p] = {
                "step": ckpt.optimizer[f"step.{name}"].reshape(()).to(torch.float32),
                "exp_avg": ckpt.optimizer[key].clone(),
                "exp_avg_sq": ckpt.optimizer[f"exp_avg_sq.{name}"].clone(),
            }


def _write_loss_log(path, history) -> None:
    lines = ["step,epoch,loss\n"] + [f"{s},{e},{l!r}\n" for s, e, l in history]
    atomic_write_text(path, "".join(lines))


def _plateaued(epoch_means: list[float], window: int, rel: float) -> bool:
    if len(epoch_means) <= window:
        return False
    before = min(epoch_means[:-window])
    recent = min(epoch_means[-window:])
    return (before - recent) < rel * before


def fit(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    dcfg: DenoiserConfig,
    out=None,
) -> Checkpoint:
    """Train for ``cfg.epochs`` epochs, checkpointing into ``out`` after each one."""
    if len(manifest) == 0:
        raise InvalidInputError("training manifest is empty")
    under_all, full_all = load_pairs(manifest)
    if under_all.shape[1:] != (dcfg.in_h, dcfg.in_w):
        raise InvalidInputError(
            f"slices are {under_all.shape[1:]}, denoiser expects {(dcfg.in_h, dcfg.in_w)}"
        )
    if dcfg.T_max != cfg.T:
        raise InvalidInputError(f"denoiser T_max {dcfg.T_max} must equal training T {cfg.T}")
    return fit_arrays(under_all, full_all, cfg, dcfg, out)


def fit_arrays(under_all, full_all, cfg: TrainConfig, dcfg: DenoiserConfig, out=None) -> Checkpoint:
    sched = build_schedule(cfg.T)
    model = init_params(dcfg, seed=cfg.seed)
    model.train()
    opt = make_optimizer(model, cfg)
    rngs = make_rngs(cfg.seed)
    out = Path(out) if out is not None else None
    n = len(full_all)
    history: list[tuple[int, int, float]] = []
    step = 0
    ckpt = _snapshot(model, opt, dcfg, cfg, rngs, step, 0, history)
    if out is not None:
        save_checkpoint(ckpt, out / CKPT_NAME)
        _write_loss_log(out / LOSS_LOG_NAME, history)
    epoch_means: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rngs["order"].permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            under, full = flip_pairs(under_all[idx], full_all[idx], rngs["augment"], cfg.flip_prob)
            step += 1
            loss = train_step(model, opt, under, full, sched, rngs, cfg.grad_clip, step)
            losses.append(loss)
            history.append((step, epoch, loss))
        epoch_means.append(float(np.mean(losses)))
        log.info("epoch %d/%d  loss %.5f", epoch, cfg.epochs, epoch_means[-1])
        ckpt = _snapshot(model, opt, dcfg, cfg, rngs, step, epoch, history)
        if out is not None:
            save_checkpoint(ckpt, out / CKPT_NAME)
            _write_loss_log(out / LOSS_LOG_NAME, history)
        if cfg.early_stop and _plateaued(epoch_means, cfg.plateau_epochs, cfg.plateau_rel):
            log.info("loss plateau after epoch %d, stopping", epoch)
            break
    model.eval()
    return ckpt


# -- checkpoint serialisation -------------------------------------------------


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors: list[tuple[str, torch.Tensor]] = [(f"model.{k}", v) for k, v in ckpt.state.items()]
    tensors += [(f"opt.{k}", v) for k, v in ckpt.optimizer.items()]
    hist = np.asarray(ckpt.loss_history, dtype=np.float64).reshape(-1, 3)
    tensors.append(("loss_history", torch.from_numpy(hist)))

    directory, chunks, offset = [], [], 0
    for name, tensor in tensors:
        tensor = tensor.detach().cpu().contiguous()
        if tensor.dtype not in _TORCH_TO_NAME:
            raise InvalidInputError(f"unsupported tensor dtype {tensor.dtype} for {name}")
        dname = _TORCH_TO_NAME[tensor.dtype]
        raw = tensor.numpy().astype(_DTYPES[dname][1], copy=False).tobytes()
        directory.append(
            {"name": name, "dtype": dname, "shape": list(tensor.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = _canonical(
        {
            "config": {"denoiser": ckpt.denoiser.to_dict(), "train": ckpt.train.to_dict()},
            "epoch": ckpt.epoch,
            "rng_state": ckpt.rng_state,
            "step": ckpt.step,
            "tensors": directory,
        }
    )
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) + header + b"".join(chunks)


def _config_diff(name: str, stored: dict, expected: dict) -> None:
    for key in sorted(set(stored) | set(expected)):
        if stored.get(key) != expected.get(key):
            raise IncompatibleCheckpointError(
                f"checkpoint {name} config differs in field {key!r}: "
                f"file has {stored.get(key)!r}, expected {expected.get(key)!r}"
            )


def decode_checkpoint(
    buf: bytes,
    source: str = "<bytes>",
    expected_denoiser: DenoiserConfig | None = None,
    expected_train: TrainConfig | None = None,
) -> Checkpoint:
    prefix = len(CKPT_MAGIC) + 12
    if len(buf) < prefix:
        raise FormatError(f"{source}: truncated checkpoint header")
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r}")
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise IncompatibleCheckpointError(f"{source}: checkpoint version {version}, expected {CKPT_VERSION}")
    if len(buf) < prefix + hlen:
        raise FormatError(f"{source}: truncated checkpoint header")
    try:
        header = json.loads(buf[prefix : prefix + hlen].decode("utf-8"))
        dcfg_d = header["config"]["denoiser"]
        tcfg_d = header["config"]["train"]
        directory = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{source}: corrupt checkpoint header: {exc}") from exc
    if expected_denoiser is not None:
        _config_diff("denoiser", dcfg_d, expected_denoiser.to_dict())
    if expected_train is not None:
        _config_diff("train", tcfg_d, expected_train.to_dict())
    try:
        dcfg = DenoiserConfig(**{**dcfg_d, "channel_multipliers": tuple(dcfg_d["channel_multipliers"])})
        tcfg = TrainConfig(**tcfg_d)
    except (TypeError, InvalidInputError) as exc:
        raise IncompatibleCheckpointError(f"{source}: unusable config: {exc}") from exc

    payload = memoryview(buf)[prefix + hlen :]
    state, moments, history = {}, {}, []
    for entry in directory:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise FormatError(f"{source}: tensor {entry['name']!r} extends past end of file")
        torch_dtype, np_dtype = _DTYPES[entry["dtype"]]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=np_dtype).reshape(entry["shape"])
        tensor = torch.from_numpy(arr.copy())
        name = entry["name"]
        if name.startswith("model."):
            state[name[6:]] = tensor
        elif name.startswith("opt."):
            moments[name[4:]] = tensor
        elif name == "loss_history":
            history = [(int(s), int(e), float(l)) for s, e, l in arr]
    return Checkpoint(
        dcfg, tcfg, state, moments, header.get("rng_state", {}), header["step"], header["epoch"], history
    )


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    try:
        atomic_write_bytes(path, encode_checkpoint(ckpt))
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path, expected_denoiser=None, expected_train=None) -> Checkpoint:
    path = Path(path)
    if path.is_dir():
        path = path / CKPT_NAME
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf, str(path), expected_denoiser, expected_train)
