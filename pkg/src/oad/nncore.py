"""Small numpy network core with hand-written backward passes.

Layers keep whatever they need for backward in ``self.cache`` during
``forward``. Arithmetic runs in float64; layer outputs are stored in the
network dtype (float32 by default, float64 for gradient checks).
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CheckpointError, NumericError


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.cache = None

    def _need_cache(self):
        if self.cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a forward cache")
        return self.cache


class Conv2d(Layer):
    """3x3 convolution, stride 1, zero padding 1."""

    def __init__(self, in_ch, out_ch, rng=None, dtype=np.float32):
        super().__init__()
        fan_in = in_ch * 9
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["w"] = (rng.standard_normal((out_ch, in_ch, 3, 3)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["b"] = np.zeros(out_ch, dtype=dtype)

    @staticmethod
    def _im2col(x):
        b, c, h, w = x.shape
        xp = np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
        return cols.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)

    def forward(self, x):
        b, c, h, w = x.shape
        if c != self.params["w"].shape[1]:
            raise ValueError(f"conv expects {self.params['w'].shape[1]} channels, got {c}")
        cols = self._im2col(x)
        wmat = self.params["w"].astype(np.float64).reshape(len(self.params["b"]), -1)
        out = cols @ wmat.T + self.params["b"].astype(np.float64)
        self.cache = (cols, x.shape)
        return out.reshape(b, h, w, -1).transpose(0, 3, 1, 2)

    def backward(self, dout, need_dx=True):
        cols, (b, c, h, w) = self._need_cache()
        dout = np.asarray(dout, dtype=np.float64)
        o = dout.shape[1]
        dmat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
        self.grads["w"] = (dmat.T @ cols).reshape(self.params["w"].shape)
        self.grads["b"] = dmat.sum(axis=0)
        if not need_dx:
            return None
        # input gradient is a same-padded convolution with the flipped kernel
        flipped = self.params["w"].astype(np.float64)[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx = self._im2col(dout) @ flipped.reshape(c, -1).T
        return dx.reshape(b, h, w, c).transpose(0, 3, 1, 2)


class ReLU(Layer):
    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        self.cache = x > 0
        return np.where(self.cache, x, 0.0)

    def backward(self, dout):
        return np.where(self._need_cache(), dout, 0.0)


class MaxPool2d(Layer):
    """2x2 max pool, stride 2, trailing odd row/column dropped.

    Ties route the gradient to the first maximum in row-major order.
    """

    def forward(self, x):
        b, c, h, w = x.shape
        ho, wo = h // 2, w // 2
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} too small to pool")
        win = np.asarray(x, dtype=np.float64)[:, :, : 2 * ho, : 2 * wo]
        win = win.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
        arg = win.argmax(axis=-1)
        self.cache = (arg, x.shape)
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        arg, (b, c, h, w) = self._need_cache()
        ho, wo = arg.shape[2:]
        d = np.zeros((b, c, ho, wo, 4))
        np.put_along_axis(d, arg[..., None], np.asarray(dout, dtype=np.float64)[..., None], axis=-1)
        d = d.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * ho, 2 * wo)
        dx = np.zeros((b, c, h, w))
        dx[:, :, : 2 * ho, : 2 * wo] = d
        return dx


class GlobalAvgPool(Layer):
    def forward(self, x):
        self.cache = x.shape
        return np.asarray(x, dtype=np.float64).mean(axis=(2, 3))

    def backward(self, dout):
        b, c, h, w = self._need_cache()
        return np.broadcast_to(np.asarray(dout, dtype=np.float64)[:, :, None, None] / (h * w),
                               (b, c, h, w)).copy()


class Linear(Layer):
    def __init__(self, d_in, d_out, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["w"] = (rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in)).astype(dtype)
        self.params["b"] = np.zeros(d_out, dtype=dtype)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.params["w"].shape[0]:
            raise ValueError(f"linear expects {self.params['w'].shape[0]} inputs, got {x.shape[-1]}")
        self.cache = x
        return x @ self.params["w"].astype(np.float64) + self.params["b"].astype(np.float64)

    def backward(self, dout):
        x = self._need_cache()
        dout = np.asarray(dout, dtype=np.float64)
        self.grads["w"] = x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["w"].astype(np.float64).T


class Sequential:
    """Named chain of layers; parameters are addressed as ``"<layer>.<param>"``."""

    def __init__(self, layers, dtype=np.float32):
        self.layers = list(layers)  # (name, layer) pairs
        self.dtype = np.dtype(dtype)

    def forward(self, x):
        out = np.asarray(x, dtype=self.dtype)
        for name, layer in self.layers:
            out = layer.forward(out).astype(self.dtype)
            _check_finite(out, f"output of {name}")
        return out

    __call__ = forward

    def backward(self, dout, need_dx=True):
        """Backpropagate ``dout``; with ``need_dx=False`` the first conv skips its input gradient."""
        d = np.asarray(dout, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i][1]
            if i == 0 and not need_dx and isinstance(layer, Conv2d):
                return layer.backward(d, need_dx=False)
            d = layer.backward(d)
        return d

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for n, layer in self.layers:
            for k, v in layer.params.items():
                g = layer.grads.get(k)
                out[f"{n}.{k}"] = np.zeros(v.shape) if g is None else g
        return out

    def set_parameters(self, values: dict):
        for n, layer in self.layers:
            for k in layer.params:
                key = f"{n}.{k}"
                if key in values:
                    arr = np.asarray(values[key])
                    if arr.shape != layer.params[k].shape:
                        raise ValueError(f"{key}: shape {arr.shape} != {layer.params[k].shape}")
                    layer.params[k] = arr.astype(self.dtype)

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for _, layer in self.layers:
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(self.dtype)
        return self


@dataclass
class EncoderConfig:
    in_channels: int = 1
    blocks: list[int] = field(default_factory=lambda: [8, 16, 32])
    d_z: int = 16

    @property
    def d_h(self) -> int:
        return self.blocks[-1]

    def check_input(self, h, w):
        for _ in self.blocks:
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ValueError(f"{len(self.blocks)} pooling blocks too deep for this input size")


def build_encoder(config: EncoderConfig, rng=None, dtype=np.float32) -> Sequential:
    if not config.blocks:
        raise ValueError("encoder needs at least one block")
    rng = rng if rng is not None else np.random.default_rng(0)
    layers, c = [], config.in_channels
    for i, out_ch in enumerate(config.blocks):
        layers += [(f"conv{i}", Conv2d(c, out_ch, rng, dtype)), (f"relu{i}", ReLU()),
                   (f"pool{i}", MaxPool2d())]
        c = out_ch
    layers.append(("gap", GlobalAvgPool()))
    return Sequential(layers, dtype)


def build_head(d_h: int, d_z: int, rng=None, dtype=np.float32) -> Sequential:
    rng = rng if rng is not None else np.random.default_rng(0)
    return Sequential([("fc0", Linear(d_h, d_h, rng, dtype)), ("relu", ReLU()),
                       ("fc1", Linear(d_h, d_z, rng, dtype))], dtype)


class IdentityEncoder(Sequential):
    """Pass-through encoder with no parameters."""

    def __init__(self, dtype=np.float64):
        super().__init__([], dtype)


def l2_normalize(u):
    u = np.asarray(u, dtype=np.float64)
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError("cannot normalize a zero vector")
    return u / norms


def l2_normalize_backward(u, dz):
    """Gradient w.r.t. ``u`` of a loss whose gradient w.r.t. u/|u| is ``dz``."""
    u = np.asarray(u, dtype=np.float64)
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    z = u / norms
    return (dz - z * np.sum(dz * z, axis=-1, keepdims=True)) / norms


# -- optimizers ----------------------------------------------------------------

class SGD:
    def __init__(self, lr=0.01, momentum=0.0):
        self.lr, self.momentum = lr, momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> dict:
        new = {}
        for k, p in params.items():
            g = np.asarray(grads[k], dtype=np.float64)
            if g.shape != p.shape:
                raise ValueError(f"{k}: gradient shape {g.shape} != {p.shape}")
            v = self.momentum * self.velocity.get(k, 0.0) + g
            self.velocity[k] = v
            new[k] = _check_finite(p.astype(np.float64) - self.lr * v, f"update of {k}").astype(p.dtype)
        return new

    def state(self):
        return {f"sgd.v/{k}": v for k, v in self.velocity.items()}

    def load_state(self, state):
        self.velocity = {k[len("sgd.v/"):]: np.asarray(v, dtype=np.float64)
                         for k, v in state.items() if k.startswith("sgd.v/")}


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        new = {}
        for k, p in params.items():
            g = np.asarray(grads[k], dtype=np.float64)
            if g.shape != p.shape:
                raise ValueError(f"{k}: gradient shape {g.shape} != {p.shape}")
            m = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            new[k] = _check_finite(p.astype(np.float64) - upd, f"update of {k}").astype(p.dtype)
        return new

    def state(self):
        out = {"adam.t": np.array([self.t], dtype=np.uint64)}
        out.update({f"adam.m/{k}": v for k, v in self.m.items()})
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state):
        self.t = int(state.get("adam.t", [0])[0])
        self.m = {k[7:]: np.asarray(v, dtype=np.float64) for k, v in state.items() if k.startswith("adam.m/")}
        self.v = {k[7:]: np.asarray(v, dtype=np.float64) for k, v in state.items() if k.startswith("adam.v/")}


def make_optimizer(name: str, lr: float, momentum: float = 0.9):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr, momentum)
    raise ValueError(f"unknown optimizer {name!r}")


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"CLPD"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<u8"), 4: np.dtype("<i8")}
_TAGS = {np.dtype(v).str: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    rng: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        blob = json.dumps(self.config, sort_keys=True).encode("utf-8")
        buf.write(MAGIC + struct.pack("<IQ", VERSION, len(blob)) + blob)
        for section in (self.params, self.optimizer, self.rng):
            _write_section(buf, section)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        r = _Reader(data)
        if r.take(4) != MAGIC:
            raise CheckpointError("bad magic: not a CLPD checkpoint")
        version, n = struct.unpack("<IQ", r.take(12))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        try:
            config = json.loads(r.take(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt config blob: {exc}") from None
        sections = [_read_section(r) for _ in range(3)]
        if r.pos != len(data):
            raise CheckpointError("trailing bytes after checkpoint")
        return cls(config, *sections)


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def _write_section(buf, records):
    buf.write(struct.pack("<I", len(records)))
    for name in sorted(records):
        arr = np.asarray(records[name])
        if arr.dtype.kind == "f":
            arr = arr.astype("<f4" if arr.dtype.itemsize <= 4 else "<f8")
        elif arr.dtype.kind == "u":
            arr = arr.astype("<u8")
        else:
            arr = arr.astype("<i8")
        key = name.encode("utf-8")
        buf.write(struct.pack("<I", len(key)) + key)
        buf.write(struct.pack("<BI", _TAGS[arr.dtype.str], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


def _read_section(r):
    (count,) = struct.unpack("<I", r.take(4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", r.take(4))
        name = r.take(n).decode("utf-8")
        tag, rank = struct.unpack("<BI", r.take(5))
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for {name}")
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        dt = _DTYPES[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(r.take(size), dtype=dt).reshape(shape).copy()
    return out


def save_checkpoint(path, ckpt: Checkpoint):
    with open(path, "wb") as fh:
        fh.write(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())


def rng_state(rng: np.random.Generator) -> dict[str, np.ndarray]:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise ValueError("only PCG64 generators can be checkpointed")
    words = []
    for v in (st["state"]["state"], st["state"]["inc"]):
        words += [v >> 64, v & (2**64 - 1)]
    words += [st["has_uint32"], st["uinteger"]]
    return {"rng.pcg64": np.array(words, dtype=np.uint64)}


def restore_rng(state: dict) -> np.random.Generator:
    w = [int(x) for x in state["rng.pcg64"]]
    bg = np.random.PCG64()
    bg.state = {"bit_generator": "PCG64",
                "state": {"state": (w[0] << 64) | w[1], "inc": (w[2] << 64) | w[3]},
                "has_uint32": w[4], "uinteger": w[5]}
    return np.random.Generator(bg)


def encoder_config_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)
