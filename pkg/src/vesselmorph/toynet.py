"""Small full-resolution convolutional nets, hand-written backprop and Adam.

A net is an ordered list of layers: 3x3 convolutions (zero padding, stride 1)
and pointwise activations. Inputs are ``(batch, channels, h, w)`` arrays;
a ``(channels, h, w)`` input is treated as a batch of one.

Checkpoint layout (all integers little-endian)::

    b"VMCK"  u16 version=1  u16 net_count
    per net:
        u16 name_len  name (utf-8)
        u16 in_channels  u16 layer_count
        per layer: u8 kind (1 conv, 2 relu, 3 sigmoid, 4 linear)
                   conv only: u16 in_channels  u16 out_channels
    payload, nets in the same order, convs in layer order:
        weights (out, in, 3, 3) then bias (out), float64 LE
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .core import FormatError, Rng

CKPT_MAGIC = b"VMCK"
CKPT_VERSION = 1
LAYER_CODES = {"conv": 1, "relu": 2, "sigmoid": 3, "linear": 4}
_CODE_LAYERS = {v: k for k, v in LAYER_CODES.items()}

_net_ids = itertools.count()


@dataclass
class Layer:
    kind: str
    cin: int = 0
    cout: int = 0


@dataclass
class ToyNet:
    layers: list[Layer]
    params: list[np.ndarray]
    in_channels: int
    version: int = 0
    uid: int = field(default_factory=lambda: next(_net_ids))

    @property
    def out_channels(self) -> int:
        for layer in reversed(self.layers):
            if layer.kind == "conv":
                return layer.cout
        return self.in_channels

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def set_params(self, params):
        if len(params) != len(self.params) or any(
            p.shape != q.shape for p, q in zip(params, self.params)
        ):
            raise ValueError("parameter shapes do not match the architecture")
        self.params = [np.array(p, dtype=np.float64) for p in params]
        self.version += 1

    def copy(self) -> "ToyNet":
        return ToyNet(
            [Layer(l.kind, l.cin, l.cout) for l in self.layers],
            [p.copy() for p in self.params],
            self.in_channels,
        )


def build_net(spec, rng: Rng | None = None, zero=False) -> ToyNet:
    """Build from a compact spec such as ``[("conv", 1, 8), "relu", ("conv", 8, 1), "sigmoid"]``.

    Weights and biases are uniform in ``[-a, a]`` with ``a = 1/sqrt(9 * cin)``
    drawn from ``rng``, or all zero with ``zero=True``.
    """
    layers, params = [], []
    channels = None
    for item in spec:
        if isinstance(item, str):
            if item not in ("relu", "sigmoid", "linear"):
                raise ValueError(f"unknown layer {item!r}")
            layers.append(Layer(item))
            continue
        kind, cin, cout = item
        if kind != "conv":
            raise ValueError(f"unknown layer {kind!r}")
        if channels is not None and cin != channels:
            raise ValueError(f"conv expects {cin} channels but previous layer gives {channels}")
        channels = cout
        layers.append(Layer("conv", cin, cout))
        if zero:
            params += [np.zeros((cout, cin, 3, 3)), np.zeros(cout)]
        else:
            if rng is None:
                raise ValueError("rng required for random init")
            a = 1.0 / np.sqrt(9.0 * cin)
            w = (2.0 * rng.uniform(cout * cin * 9) - 1.0) * a
            b = (2.0 * rng.uniform(cout) - 1.0) * a
            params += [w.reshape(cout, cin, 3, 3), b]
    first = next(l for l in layers if l.kind == "conv")
    return ToyNet(layers, params, first.cin)


def _arch(cin, hidden, depth):
    spec = [("conv", cin, hidden), "relu"]
    for _ in range(depth - 2):
        spec += [("conv", hidden, hidden), "relu"]
    return spec + [("conv", hidden, 1), "sigmoid"]


def intensity_encoder(rng=None, zero=False, hidden=8):
    return build_net(_arch(1, hidden, 3), rng, zero)


def structure_encoder(rng=None, zero=False, hidden=8):
    return build_net(_arch(4, hidden, 3), rng, zero)


def shared_decoder(rng=None, zero=False, hidden=8):
    return build_net(_arch(1, hidden, 2), rng, zero)


def task_net(rng=None, zero=False, hidden=8):
    return build_net(_arch(2, hidden, 3), rng, zero)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def _im2col(x):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # b, c, h, w, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)


def _col2im(dcols, shape):
    b, c, h, w = shape
    d = dcols.reshape(b, h, w, c, 3, 3).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((b, c, h + 2, w + 2))
    for ki in range(3):
        for kj in range(3):
            dxp[:, :, ki : ki + h, kj : kj + w] += d[..., ki, kj]
    return dxp[:, :, 1:-1, 1:-1]


@dataclass
class Cache:
    net_uid: int
    net_version: int
    input_shape: tuple
    entries: list


def forward(net: ToyNet, x):
    """Run the net; returns ``(output, cache)``. Output keeps the input's batch layout."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"input must be (batch, channels, h, w), got shape {x.shape}")
    if x.shape[1] != net.in_channels:
        raise ValueError(f"net expects {net.in_channels} input channels, got {x.shape[1]}")

    entries = []
    params = iter(net.params)
    a = x
    for layer in net.layers:
        if layer.kind == "conv":
            w, bias = next(params), next(params)
            cols = _im2col(a)
            b, _, h, wd = a.shape
            out = cols @ w.reshape(layer.cout, -1).T + bias
            entries.append((cols, a.shape))
            a = out.reshape(b, h, wd, layer.cout).transpose(0, 3, 1, 2)
        elif layer.kind == "relu":
            entries.append(a > 0)
            a = np.maximum(a, 0.0)
        elif layer.kind == "sigmoid":
            a = expit(a)
            entries.append(a)
        else:
            entries.append(None)
    out = a[0] if single else a
    return out, Cache(net.uid, net.version, x.shape if not single else x.shape[1:], entries)


def backward(net: ToyNet, cache: Cache, grad_out):
    """Backprop ``grad_out`` through the cached forward pass.

    Returns ``(param_grads, grad_input)`` with ``param_grads`` aligned to
    ``net.params``.
    """
    if cache.net_uid != net.uid or cache.net_version != net.version:
        raise RuntimeError("stale cache: the net changed since this forward pass")
    g = np.asarray(grad_out, dtype=np.float64)
    single = len(cache.input_shape) == 3
    if single:
        g = g[None]

    grads = [None] * len(net.params)
    pi = len(net.params)
    for layer, entry in zip(reversed(net.layers), reversed(cache.entries)):
        if layer.kind == "conv":
            pi -= 2
            cols, in_shape = entry
            w = net.params[pi]
            gm = g.transpose(0, 2, 3, 1).reshape(-1, layer.cout)
            grads[pi] = (gm.T @ cols).reshape(w.shape)
            grads[pi + 1] = gm.sum(axis=0)
            g = _col2im(gm @ w.reshape(layer.cout, -1), in_shape)
        elif layer.kind == "relu":
            g = g * entry
        elif layer.kind == "sigmoid":
            g = g * entry * (1.0 - entry)
    return grads, (g[0] if single else g)


# --------------------------------------------------------------------------
# Optimisation
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns new parameter arrays and mutates ``state``."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient shapes disagree")
    if any(p.shape != m.shape for p, m in zip(params, state.m)):
        raise ValueError("optimizer state does not match parameter shapes")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        out.append(p - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps))
    return out


@dataclass(frozen=True)
class LrSchedule:
    initial: float
    decay: float = 0.5
    period: int = 3

    def __post_init__(self):
        if not (self.initial > 0):
            raise ValueError(f"initial rate must be > 0, got {self.initial}")
        if self.period < 1:
            raise ValueError(f"decay period must be >= 1, got {self.period}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return schedule.initial * schedule.decay ** (epoch // schedule.period)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(path, nets: dict[str, ToyNet]) -> None:
    head = [struct.pack("<4sHH", CKPT_MAGIC, CKPT_VERSION, len(nets))]
    payload = []
    for name, net in nets.items():
        raw = name.encode("utf-8")
        head.append(struct.pack("<H", len(raw)) + raw)
        head.append(struct.pack("<HH", net.in_channels, len(net.layers)))
        for layer in net.layers:
            head.append(struct.pack("<B", LAYER_CODES[layer.kind]))
            if layer.kind == "conv":
                head.append(struct.pack("<HH", layer.cin, layer.cout))
        payload += [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.params]
    Path(path).write_bytes(b"".join(head + payload))


def load_checkpoint(path) -> dict[str, ToyNet]:
    data = Path(path).read_bytes()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError(f"{path}: truncated checkpoint header")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    magic, version, count = take("<4sHH")
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    descs = []
    for _ in range(count):
        (nlen,) = take("<H")
        if pos + nlen > len(data):
            raise FormatError(f"{path}: truncated checkpoint header")
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        in_ch, nlayers = take("<HH")
        spec = []
        for _ in range(nlayers):
            (code,) = take("<B")
            kind = _CODE_LAYERS.get(code)
            if kind is None:
                raise FormatError(f"{path}: unknown layer code {code}")
            spec.append(("conv", *take("<HH")) if kind == "conv" else kind)
        descs.append((name, in_ch, spec))

    nets = {}
    for name, in_ch, spec in descs:
        net = build_net(spec, zero=True)
        if net.in_channels != in_ch:
            raise FormatError(f"{path}: net {name!r} channel count disagrees with its layers")
        params = []
        for p in net.params:
            nbytes = 8 * p.size
            if pos + nbytes > len(data):
                raise FormatError(f"{path}: truncated parameter payload for {name!r}")
            params.append(np.frombuffer(data, "<f8", p.size, pos).reshape(p.shape).copy())
            pos += nbytes
        net.params = params
        nets[name] = net
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes after payload")
    return nets
