"""U-shaped segmentation network built from large-kernel scan blocks.

Encoder: depthwise stride-2 stem, then one LM block per stage (each block
halves the spatial extents and doubles the channels). Decoder: stride-2
transposed convolutions, skip concatenation, residual conv blocks, and a
1x1 head producing class logits at input resolution.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .blocks import KernelSpec, LMBlock, LMBlockConfig
from .errors import CheckpointError, ConfigError, ShapeError
from .tensor import Tensor

_MAGIC = b"LKMU1"


def _norm_schedule(schedule, rank: int):
    out = []
    for k in schedule:
        if isinstance(k, int):
            out.append((k,) * rank)
        else:
            t = tuple(int(v) for v in k)
            if len(t) != rank:
                raise ConfigError(f"kernel {t} has rank {len(t)}, expected {rank}")
            out.append(t)
    return out


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 4
    stages: int = 3
    stem_channels: int = 16
    kernel_schedule: tuple = (8, 4, 4)
    use_pim: bool = True
    use_pam: bool = True
    use_bim: bool = True
    state_dim: int = 4
    rank: int = 2  # spatial rank: 2 or 3

    def validate(self, input_spatial=None) -> None:
        """Check internal consistency and, optionally, input compatibility."""
        if self.rank not in (2, 3):
            raise ConfigError(f"spatial rank must be 2 or 3, got {self.rank}")
        if len(self.kernel_schedule) != self.stages:
            raise ConfigError(
                f"kernel schedule length {len(self.kernel_schedule)} != "
                f"stages {self.stages}")
        if self.stem_channels % self.in_channels:
            raise ConfigError("stem channels must be a multiple of input channels")
        _norm_schedule(self.kernel_schedule, self.rank)
        if input_spatial is not None:
            if len(input_spatial) != self.rank:
                raise ConfigError(
                    f"input rank {len(input_spatial)} != config rank {self.rank}")
            # stem halves once; each stage halves once more (floor, pad 1, k 3)
            ext = [(e + 2 - 3) // 2 + 1 for e in input_spatial]
            for _ in range(self.stages):
                if any(e < 2 for e in ext):
                    raise ConfigError(f"input {input_spatial} too small for "
                                      f"{self.stages} stages")
                ext = [(e + 2 - 3) // 2 + 1 for e in ext]

    def canonical(self) -> str:
        d = asdict(self)
        d["kernel_schedule"] = [list(k) if not isinstance(k, int) else k
                                for k in self.kernel_schedule]
        return json.dumps(d, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


class ResBlock:
    """Two 3x3 convolutions with SiLU and an additive shortcut."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        def u(shape, fan):
            s = 1.0 / np.sqrt(fan)
            return T.tensor(rng.uniform(-s, s, shape), requires_grad=True)

        self.conv_a = u((c_out, c_in, 3, 3), c_in * 9)
        self.conv_b = u((c_out, c_out, 3, 3), c_out * 9)
        self.shortcut = u((c_out, c_in, 1, 1), c_in) if c_in != c_out else None
        self.scale = T.tensor(np.ones(c_out), requires_grad=True)

    def named_params(self, prefix: str = "") -> dict:
        out = {prefix + "conv_a": self.conv_a, prefix + "conv_b": self.conv_b,
               prefix + "scale": self.scale}
        if self.shortcut is not None:
            out[prefix + "shortcut"] = self.shortcut
        return out

    def forward(self, x: Tensor) -> Tensor:
        h = T.silu(T.conv2d(x, self.conv_a, stride=1, padding=1))
        h = T.conv2d(h, self.conv_b, stride=1, padding=1)
        sc = x if self.shortcut is None else T.conv2d(x, self.shortcut)
        out = T.silu(T.add(h, sc))
        return T.mul(out, T.reshape(self.scale, (self.scale.size, 1, 1)))


class Model:
    """Trainable network; parameters live in a flat name -> Tensor table."""

    def __init__(self, cfg: ModelConfig, seed: int):
        if cfg.rank != 2:
            raise ConfigError("only 2D networks are constructed at desk scale")
        cfg.validate()
        self.cfg = cfg
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        C0 = cfg.stem_channels
        g = cfg.in_channels
        s = 1.0 / np.sqrt((C0 // g) * 9)
        self.stem_w = T.tensor(rng.uniform(-s, s, (C0, 1, 3, 3)), requires_grad=True)
        self.stem_scale = T.tensor(np.ones(C0), requires_grad=True)

        schedule = _norm_schedule(cfg.kernel_schedule, cfg.rank)
        self.blocks = []
        ch = C0
        for l in range(cfg.stages):
            bc = LMBlockConfig(channels=ch, kernel=KernelSpec(schedule[l]),
                               use_pim=cfg.use_pim, use_pam=cfg.use_pam,
                               use_bim=cfg.use_bim, state_dim=cfg.state_dim)
            self.blocks.append(LMBlock(bc, rng))
            ch *= 2

        # decoder mirrors the encoder; one extra upsample undoes the stem
        self.up_w = []
        self.dec_blocks = []
        for l in range(cfg.stages):
            c_hi = ch        # below-skip channels
            c_skip = ch // 2
            su = 1.0 / np.sqrt(c_hi * 4)
            self.up_w.append(T.tensor(rng.uniform(-su, su, (c_hi, c_skip, 2, 2)),
                                      requires_grad=True))
            self.dec_blocks.append(ResBlock(2 * c_skip, c_skip, rng))
            ch //= 2
        su = 1.0 / np.sqrt(C0 * 4)
        self.final_up = T.tensor(rng.uniform(-su, su, (C0, C0, 2, 2)),
                                 requires_grad=True)
        self.final_block = ResBlock(C0, C0, rng)
        sh = 1.0 / np.sqrt(C0)
        self.head = T.tensor(rng.uniform(-sh, sh, (cfg.num_classes, C0, 1, 1)),
                             requires_grad=True)

    def named_params(self) -> dict:
        out = {"stem_w": self.stem_w, "stem_scale": self.stem_scale,
               "final_up": self.final_up, "head": self.head}
        for l, b in enumerate(self.blocks):
            out.update(b.named_params(f"enc{l}."))
        for l, (w, rb) in enumerate(zip(self.up_w, self.dec_blocks)):
            out[f"dec{l}.up_w"] = w
            out.update(rb.named_params(f"dec{l}."))
        out.update(self.final_block.named_params("final."))
        return out

    def forward(self, x) -> Tensor:
        """[B, C_in, H, W] (or unbatched) -> logits [B, classes, H, W]."""
        if not isinstance(x, Tensor):
            x = T.tensor(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected [B,{self.cfg.in_channels},H,W], got {x.shape}")
        H, W = x.shape[2], x.shape[3]

        f = T.conv2d(x, self.stem_w, stride=2, padding=1,
                     groups=self.cfg.in_channels)
        f = T.mul(f, T.reshape(self.stem_scale, (self.stem_scale.size, 1, 1)))

        skips = []
        for b in self.blocks:
            pre, f = b.forward(f)
            skips.append(pre)

        for w, rb, skip in zip(self.up_w, self.dec_blocks, reversed(skips)):
            f = T.conv_transpose2d(f, w, stride=2)
            if f.shape[2:] != skip.shape[2:]:
                f = f[:, :, :skip.shape[2], :skip.shape[3]]
            f = rb.forward(T.concat([f, skip], axis=1))

        f = T.conv_transpose2d(f, self.final_up, stride=2)
        if f.shape[2:] != (H, W):
            f = f[:, :, :H, :W]
        f = self.final_block.forward(f)
        logits = T.conv2d(f, self.head)
        if squeeze:
            logits = T.reshape(logits, logits.shape[1:])
        return logits


def build_model(cfg: ModelConfig, seed: int) -> Model:
    return Model(cfg, seed)


def predict_mask(model: Model, x) -> np.ndarray:
    """Per-pixel argmax class; exact ties break toward the lower index."""
    with T.no_grad():
        logits = model.forward(x)
    return np.argmax(logits.data, axis=-3).astype(np.int64)


# ---------------------------------------------------------------------------
# checkpoint serialization


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    for e in arr.shape:
        fh.write(struct.pack("<Q", e))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_record(fh):
    raw = fh.read(4)
    if len(raw) < 4:
        raise CheckpointError("truncated record header")
    (nlen,) = struct.unpack("<I", raw)
    name = fh.read(nlen)
    if len(name) < nlen:
        raise CheckpointError("truncated record name")
    raw = fh.read(4)
    if len(raw) < 4:
        raise CheckpointError(f"truncated rank for {name.decode()!r}")
    (rank,) = struct.unpack("<I", raw)
    shape = []
    for _ in range(rank):
        raw = fh.read(8)
        if len(raw) < 8:
            raise CheckpointError(f"truncated extents for {name.decode()!r}")
        shape.append(struct.unpack("<Q", raw)[0])
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(8 * count)
    if len(raw) < 8 * count:
        raise CheckpointError(f"truncated data for {name.decode()!r}")
    return name.decode(), np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def save_checkpoint(model: Model, path, optimizer_state: dict | None = None,
                    epoch: int = 0, rng_state: dict | None = None) -> None:
    """Binary checkpoint: magic, config digest, epoch, RNG state, then
    name-sorted parameter records followed by optimizer records."""
    params = model.named_params()
    opt_records = {}
    if optimizer_state is not None:
        opt_records["adam.step"] = np.asarray(float(optimizer_state.get("step", 0)))
        for kind in ("m", "v"):
            for name, arr in sorted(optimizer_state.get(kind, {}).items()):
                opt_records[f"adam.{kind}.{name}"] = np.asarray(arr)
    rng_bytes = json.dumps(rng_state or {}, sort_keys=True).encode()

    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        digest = model.cfg.digest().encode()
        fh.write(struct.pack("<I", len(digest)))
        fh.write(digest)
        fh.write(struct.pack("<Q", int(epoch)))
        fh.write(struct.pack("<I", len(rng_bytes)))
        fh.write(rng_bytes)
        fh.write(struct.pack("<Q", len(params)))
        for name in sorted(params):
            _write_record(fh, name, params[name].data)
        fh.write(struct.pack("<Q", len(opt_records)))
        for name in sorted(opt_records):
            _write_record(fh, name, opt_records[name])


def load_checkpoint(path, cfg: ModelConfig, seed: int = 0):
    """Rebuild a model from cfg and restore parameters from a checkpoint.

    Returns (model, optimizer_state, epoch, rng_state). The stored config
    digest must match cfg; any truncation or bad field raises
    CheckpointError without producing a partial model.
    """
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise CheckpointError("bad magic string")
        raw = fh.read(4)
        if len(raw) < 4:
            raise CheckpointError("truncated digest length")
        (dlen,) = struct.unpack("<I", raw)
        digest = fh.read(dlen).decode()
        if digest != cfg.digest():
            raise CheckpointError("config digest mismatch")
        raw = fh.read(8)
        if len(raw) < 8:
            raise CheckpointError("truncated epoch")
        (epoch,) = struct.unpack("<Q", raw)
        raw = fh.read(4)
        if len(raw) < 4:
            raise CheckpointError("truncated rng length")
        (rlen,) = struct.unpack("<I", raw)
        try:
            rng_state = json.loads(fh.read(rlen).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"bad rng state: {e}") from e

        raw = fh.read(8)
        if len(raw) < 8:
            raise CheckpointError("truncated parameter count")
        (n,) = struct.unpack("<Q", raw)
        records = {}
        for _ in range(n):
            name, arr = _read_record(fh)
            records[name] = arr
        raw = fh.read(8)
        if len(raw) < 8:
            raise CheckpointError("truncated optimizer record count")
        (n_opt,) = struct.unpack("<Q", raw)
        opt_raw = {}
        for _ in range(n_opt):
            name, arr = _read_record(fh)
            opt_raw[name] = arr

    model = Model(cfg, seed)
    params = model.named_params()
    if set(records) != set(params):
        raise CheckpointError("parameter table does not match the config")
    for name, p in params.items():
        arr = records[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: "
                                  f"{arr.shape} vs {p.shape}")
        p.data = arr.astype(p.data.dtype)

    opt_state = None
    if opt_raw:
        opt_state = {"step": int(opt_raw.pop("adam.step", np.asarray(0.0))),
                     "m": {}, "v": {}}
        for name, arr in opt_raw.items():
            if name.startswith("adam.m."):
                opt_state["m"][name[len("adam.m."):]] = arr
            elif name.startswith("adam.v."):
                opt_state["v"][name[len("adam.v."):]] = arr
            else:
                raise CheckpointError(f"unknown optimizer record {name!r}")
    return model, opt_state, int(epoch), rng_state
