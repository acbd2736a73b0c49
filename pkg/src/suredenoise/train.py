"""Training loop: Adam, the two-phase learning-rate schedule, checkpoints,
and CSV loss logs.

The recipe follows the usual setup for this kind of denoiser: batches of 64
patches, Adam at 1e-4 for the first half of training and 1e-5 afterwards,
50 epochs by default. Everything is seeded: one master seed fans out into
named streams (init / shuffle+noise / probes) so runs are bit-reproducible.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PatchSet, batches
from .loss import NoiseModel, SureConfig, mc_divergence, mse_loss, sure_loss
from .model import Denoiser, DenoiserConfig
from .numerics import RngStream, Tensor

# named sub-stream ids fanned out from the master seed
STREAM_INIT = 1
STREAM_DATA = 2
STREAM_PROBE = 3
STREAM_EVAL = 4


class CheckpointError(Exception):
    """Malformed, truncated, or incompatible checkpoint file."""


class NumericError(Exception):
    """Non-finite loss encountered during training."""


@dataclass
class TrainConfig:
    loss_kind: str = "sure"          # "sure" or "mse"
    sigma_255: float = 25.0
    epochs: int = 50
    batch_size: int = 64
    lr_initial: float = 1e-4
    lr_after_drop: float = 1e-5
    drop_epoch: int = 25             # last epoch at the initial rate
    seed: int = 0
    probes_per_sample: int = 1
    probe_dist: str = "gaussian"
    epsilon: float | None = None     # None: per-batch adaptive
    checkpoint_every: int = 0        # 0: final checkpoint only
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.loss_kind not in ("sure", "mse"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if not 1 <= self.drop_epoch < self.epochs + 1:
            raise ValueError("drop_epoch must be in [1, epochs]")
        if self.lr_initial <= 0 or self.lr_after_drop <= 0:
            raise ValueError("learning rates must be > 0")


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """1-based epoch -> learning rate. Epochs 1..drop_epoch use lr_initial,
    later epochs use lr_after_drop."""
    if not 1 <= epoch <= config.epochs:
        raise ValueError(f"epoch {epoch} outside 1..{config.epochs}")
    return config.lr_initial if epoch <= config.drop_epoch else config.lr_after_drop


class Adam:
    """Standard Adam with bias correction."""

    def __init__(self, params: list[Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                raise ValueError("parameter has no gradient; call backward first")
            if g.shape != p.data.shape:
                raise ValueError("gradient shape mismatch")
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** self.t)
            v_hat = self.v[i] / (1 - b2 ** self.t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# -- checkpoint format ---------------------------------------------------------
#
# magic "SDCK" | version u32 | config json (u32 len + utf8)
# | n_params u32 | per tensor: u64 count + little-endian float32 values
# | has_adam u8 [ t u64 | m blobs | v blobs ]
# | epoch u32 | step u64 | rng json (u32 len + utf8) | crc32 u32 of all prior bytes

_CKPT_MAGIC = b"SDCK"
_CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: DenoiserConfig
    params: list[np.ndarray]            # flat float32 arrays in parameters() order
    epoch: int = 0
    step: int = 0
    adam_t: int | None = None
    adam_m: list[np.ndarray] | None = None
    adam_v: list[np.ndarray] | None = None
    rng_states: dict = field(default_factory=dict)

    @classmethod
    def of(cls, model: Denoiser, opt: Adam | None = None, epoch: int = 0,
           step: int = 0, rng_states: dict | None = None) -> "Checkpoint":
        return cls(
            config=model.config,
            params=[p.data.reshape(-1).astype("<f4") for p in model.parameters()],
            epoch=epoch,
            step=step,
            adam_t=opt.t if opt else None,
            adam_m=[m.reshape(-1).astype("<f4") for m in opt.m] if opt else None,
            adam_v=[v.reshape(-1).astype("<f4") for v in opt.v] if opt else None,
            rng_states=rng_states or {},
        )

    def restore_into(self, model: Denoiser) -> None:
        if model.config != self.config:
            raise CheckpointError(
                f"checkpoint config {self.config} does not match model {model.config}")
        model.set_parameters(self.params)


def _blob(arrays: list[np.ndarray]) -> bytes:
    parts = []
    for a in arrays:
        flat = np.asarray(a).reshape(-1).astype("<f4")
        parts.append(struct.pack("<Q", flat.size))
        parts.append(flat.tobytes())
    return b"".join(parts)


def checkpoint_save(path, ckpt: Checkpoint) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    cfg_json = json.dumps({
        "depth": ckpt.config.depth, "width": ckpt.config.width,
        "kernel": ckpt.config.kernel, "in_channels": ckpt.config.in_channels,
    }, sort_keys=True).encode()
    rng_json = json.dumps(ckpt.rng_states, sort_keys=True, default=str).encode()
    body = [
        _CKPT_MAGIC,
        struct.pack("<I", _CKPT_VERSION),
        struct.pack("<I", len(cfg_json)), cfg_json,
        struct.pack("<I", len(ckpt.params)), _blob(ckpt.params),
    ]
    if ckpt.adam_t is not None:
        body.append(b"\x01")
        body.append(struct.pack("<Q", ckpt.adam_t))
        body.append(_blob(ckpt.adam_m))
        body.append(_blob(ckpt.adam_v))
    else:
        body.append(b"\x00")
    body.append(struct.pack("<IQ", ckpt.epoch, ckpt.step))
    body.append(struct.pack("<I", len(rng_json)))
    body.append(rng_json)
    payload = b"".join(body)
    payload += struct.pack("<I", zlib.crc32(payload))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def arrays(self, n: int) -> list[np.ndarray]:
        out = []
        for _ in range(n):
            count = self.u64()
            out.append(np.frombuffer(self.take(count * 4), dtype="<f4").copy())
        return out


def checkpoint_load(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise CheckpointError("truncated checkpoint")
    if zlib.crc32(buf[:-4]) != struct.unpack("<I", buf[-4:])[0]:
        raise CheckpointError("checksum mismatch (corrupted checkpoint)")
    r = _Reader(buf[:-4])
    if r.take(4) != _CKPT_MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint file")
    version = r.u32()
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = json.loads(r.take(r.u32()))
    config = DenoiserConfig(**cfg)
    n_params = r.u32()
    params = r.arrays(n_params)
    adam_t = adam_m = adam_v = None
    if r.take(1) == b"\x01":
        adam_t = r.u64()
        adam_m = r.arrays(n_params)
        adam_v = r.arrays(n_params)
    epoch = r.u32()
    step = r.u64()
    rng_states = json.loads(r.take(r.u32()))
    return Checkpoint(config=config, params=params, epoch=epoch, step=step,
                      adam_t=adam_t, adam_m=adam_m, adam_v=adam_v,
                      rng_states=rng_states)


# -- training loop ---------------------------------------------------------------

@dataclass
class LogRow:
    step: int
    epoch: int
    loss: float
    lr: float


def write_loss_log(rows: list[LogRow], path) -> None:
    lines = ["step,epoch,loss,lr"]
    for r in rows:
        lines.append(f"{r.step},{r.epoch},{r.loss!r},{r.lr!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def train(model: Denoiser, data: PatchSet, config: TrainConfig
          ) -> tuple[Denoiser, list[LogRow]]:
    """Run the full schedule. Deterministic given config.seed."""
    if len(data) == 0:
        raise ValueError("empty PatchSet")
    noise = NoiseModel.from_255(config.sigma_255)
    data_rng = RngStream(config.seed, STREAM_DATA)
    probe_rng = RngStream(config.seed, STREAM_PROBE)
    sure_cfg = SureConfig(rng=probe_rng, epsilon=config.epsilon,
                          probe_dist=config.probe_dist,
                          probes_per_sample=config.probes_per_sample)
    opt = Adam(model.parameters())
    rows: list[LogRow] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        lr = lr_at_epoch(config, epoch)
        for batch in batches(data, config.batch_size, data_rng, noise,
                             include_clean=(config.loss_kind == "mse"),
                             dtype=model.dtype):
            step += 1
            fy = model(batch.noisy)
            if config.loss_kind == "mse":
                loss = mse_loss(batch.clean, fy)
            else:
                div = mc_divergence(model, batch.noisy, sure_cfg, fy=fy)
                loss = sure_loss(batch.noisy, fy, div, noise)
            value = loss.item()
            if not np.isfinite(value):
                if config.checkpoint_path:
                    checkpoint_save(str(config.checkpoint_path) + ".diagnostic",
                                    Checkpoint.of(model, opt, epoch, step))
                raise NumericError(
                    f"non-finite loss {value} at step {step} (epoch {epoch})")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            rows.append(LogRow(step=step, epoch=epoch, loss=value, lr=lr))
        if (config.checkpoint_path and config.checkpoint_every
                and epoch % config.checkpoint_every == 0):
            checkpoint_save(config.checkpoint_path,
                            Checkpoint.of(model, opt, epoch, step,
                                          rng_states=_rng_snapshot(data_rng, probe_rng)))
    if config.checkpoint_path:
        checkpoint_save(config.checkpoint_path,
                        Checkpoint.of(model, opt, config.epochs, step,
                                      rng_states=_rng_snapshot(data_rng, probe_rng)))
    if config.log_path:
        write_loss_log(rows, config.log_path)
    return model, rows


def _rng_snapshot(data_rng: RngStream, probe_rng: RngStream) -> dict:
    return {"data": data_rng.state(), "probe": probe_rng.state()}
