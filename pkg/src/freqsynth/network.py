"""Frequency-supervised synthesis network.

A base network maps the input volume to C feature channels V. A 3x3x3
convolution plus channel softmax produces per-voxel low/high probabilities
that gate V into V_l and V_h. The low head maps V_l straight to the
low-frequency prediction; V_h first passes through a symmetric factorized
block (three branches of three 1D convolutions, one branch per cyclic axis
order) before the high head. The final prediction is their sum.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ArgumentError, FormatError, ShapeError
from .tensor import Tensor

BRANCH_ORDERS = (
    ("depth", "height", "width"),
    ("height", "width", "depth"),
    ("width", "depth", "height"),
)


@dataclass
class ModelConfig:
    base_kind: str = "UNET"
    channels: int = 32
    depth: int = 2
    fc_layers: int = 4
    refine_k: int = 13
    # False builds the plain baseline: base network + one linear head, no bands
    frequency: bool = True

    def __post_init__(self):
        self.base_kind = self.base_kind.upper()
        if self.base_kind not in ("UNET", "FCNET"):
            raise ArgumentError(f"base_kind must be UNET or FCNET, got {self.base_kind!r}")
        if self.refine_k % 2 == 0:
            raise ArgumentError(f"refine_k must be odd, got {self.refine_k}")
        if self.channels < 1 or self.depth < 0 or self.fc_layers < 1:
            raise ArgumentError(f"invalid model sizes in {self}")

    def to_text(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            kind = types[key]
            if kind in ("int", int):
                values[key] = int(value)
            elif kind in ("bool", bool):
                values[key] = value == "True"
            else:
                values[key] = value
        return cls(**values)


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class ParamStore:
    """Ordered name -> Tensor mapping with He-initialized conv creation."""

    def __init__(self, rng, dtype, init="he"):
        self.rng = rng
        self.dtype = dtype
        self.init = init
        self.params = OrderedDict()

    def conv(self, name, cout, cin, kshape):
        shape = (cout, cin) + tuple(kshape)
        if self.init == "zeros":
            w = np.zeros(shape, dtype=self.dtype)
        else:
            w = he_normal(self.rng, shape, cin * int(np.prod(kshape)), self.dtype)
        self.params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True)

    def __getitem__(self, name):
        return self.params[name]


def conv_layer(params, name, x):
    return T.conv3d(x, params[f"{name}.weight"], params[f"{name}.bias"])


def unet_encoder_params(store, prefix, in_ch, channels, depth):
    cin = in_ch
    for level in range(depth + 1):
        width = channels * 2**level
        store.conv(f"{prefix}{level}.conv0", width, cin, (3, 3, 3))
        store.conv(f"{prefix}{level}.conv1", width, width, (3, 3, 3))
        cin = width


def unet_encoder_forward(params, prefix, x, depth):
    """Returns the feature map at every level, finest first."""
    skips = []
    h = x
    for level in range(depth + 1):
        if level:
            h = T.max_pool3d(h, 2)
        h = T.relu(conv_layer(params, f"{prefix}{level}.conv0", h))
        h = T.relu(conv_layer(params, f"{prefix}{level}.conv1", h))
        skips.append(h)
    return skips


def check_divisible(shape, factor, what):
    for axis, n in zip(("depth", "height", "width"), shape):
        if n % factor:
            raise ShapeError(f"{what}: {axis} axis extent {n} is not divisible by {factor}")


class SynthesisModel:
    def __init__(self, config=None, seed=0, dtype=np.float32, init="he"):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        store = ParamStore(np.random.default_rng(seed), self.dtype, init)
        cfg = self.config
        c = cfg.channels
        if cfg.base_kind == "UNET":
            unet_encoder_params(store, "enc", 1, c, cfg.depth)
            for level in reversed(range(cfg.depth)):
                width = c * 2**level
                store.conv(f"dec{level}.conv0", width, width * 3, (3, 3, 3))
                store.conv(f"dec{level}.conv1", width, width, (3, 3, 3))
        else:
            for i in range(cfg.fc_layers):
                store.conv(f"fc{i}", c, 1 if i == 0 else c, (3, 3, 3))
        if cfg.frequency:
            store.conv("decomp", 2, c, (3, 3, 3))
            for b, order in enumerate(BRANCH_ORDERS):
                for j, axis in enumerate(order):
                    shape = [1, 1, 1]
                    shape[T.AXES[axis] - 1] = cfg.refine_k
                    store.conv(f"refine.b{b}.{j}", c, c, shape)
                    # kept as (Cout, Cin, k) for conv1d_axis
                    w = store.params[f"refine.b{b}.{j}.weight"]
                    w.data = np.ascontiguousarray(w.data.reshape(c, c, cfg.refine_k))
            store.conv("head_low", 1, c, (3, 3, 3))
            store.conv("head_high", 1, c, (3, 3, 3))
        else:
            store.conv("head", 1, c, (3, 3, 3))
        self.params = store.params

    # ------------------------------------------------------------ parameters
    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    # ---------------------------------------------------------------- forward
    def _as_input(self, x):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[0] != 1:
            raise ShapeError(f"model input must be (1,D,H,W), got shape {x.shape}")
        return x

    def base_forward(self, x):
        """Feature tensor V of shape (C, D, H, W)."""
        x = self._as_input(x)
        cfg = self.config
        if cfg.base_kind == "FCNET":
            h = x
            for i in range(cfg.fc_layers):
                h = T.relu(conv_layer(self.params, f"fc{i}", h))
            return h
        check_divisible(x.shape[1:], 2**cfg.depth, "UNET input")
        skips = unet_encoder_forward(self.params, "enc", x, cfg.depth)
        h = skips[-1]
        for level in reversed(range(cfg.depth)):
            h = T.concat([T.upsample3d(h, 2), skips[level]], axis=0)
            h = T.relu(conv_layer(self.params, f"dec{level}.conv0", h))
            h = T.relu(conv_layer(self.params, f"dec{level}.conv1", h))
        return h

    def decomposition_forward(self, V):
        """(P, V_l, V_h): probability maps and the gated feature streams."""
        if V.shape[0] != self.config.channels:
            raise ShapeError(f"features have {V.shape[0]} channels, decomposition expects "
                             f"{self.config.channels}")
        P = T.softmax_channels(conv_layer(self.params, "decomp", V))
        V_l = P[0:1] * V
        V_h = P[1:2] * V
        return P, V_l, V_h

    def refinement_forward(self, V_h, nonlinearity=True):
        return refinement_forward(self.params, V_h, nonlinearity)

    def forward(self, x):
        """(y_low, y_high, y) for frequency models; (None, None, y) for the baseline."""
        V = self.base_forward(x)
        if not self.config.frequency:
            return None, None, conv_layer(self.params, "head", V)
        _, V_l, V_h = self.decomposition_forward(V)
        y_low = conv_layer(self.params, "head_low", V_l)
        y_high = conv_layer(self.params, "head_high", self.refinement_forward(V_h))
        return y_low, y_high, y_low + y_high

    __call__ = forward

    def predict(self, x):
        """Forward pass without graph recording; returns numpy arrays."""
        with T.no_grad():
            y_low, y_high, y = self.forward(x)
        unwrap = lambda t: None if t is None else t.data  # noqa: E731
        return unwrap(y_low), unwrap(y_high), y.data


def refinement_forward(params, V_h, nonlinearity=True, prefix="refine", branches=(0, 1, 2)):
    """Sum over branches of three chained axis convolutions (ReLU between them)."""
    out = None
    for b in branches:
        h = V_h
        for j, axis in enumerate(BRANCH_ORDERS[b]):
            name = f"{prefix}.b{b}.{j}"
            h = T.conv1d_axis(h, params[f"{name}.weight"], axis, params[f"{name}.bias"])
            if nonlinearity and j < 2:
                h = T.relu(h)
        out = h if out is None else out + h
    return out


# ------------------------------------------------------------ parameter counts
ARRANGEMENTS = ("STACK3D", "LARGE_KERNEL", "FACTORIZED_1D")


def _arrangement(name):
    key = name.upper().replace("-", "_")
    aliases = {"STACK": "STACK3D", "LARGE": "LARGE_KERNEL", "FACTORIZED": "FACTORIZED_1D"}
    key = aliases.get(key, key)
    if key not in ARRANGEMENTS:
        raise ArgumentError(f"unknown arrangement {name!r}; expected one of {ARRANGEMENTS}")
    return key


def param_count(arrangement, layers=3, channels=32, k=3):
    """Weight count (biases excluded) of a context block.

    STACK3D and LARGE_KERNEL are ``layers`` dense k^3 convolutions; FACTORIZED_1D
    is one symmetric block of nine 1D convolutions.
    """
    arrangement = _arrangement(arrangement)
    if layers < 1 or channels < 1 or k < 1:
        raise ArgumentError("layers, channels and k must be positive")
    if k % 2 == 0:
        raise ArgumentError(f"k must be odd, got {k}")
    if arrangement == "FACTORIZED_1D":
        return 9 * channels * channels * k
    return layers * channels * channels * k**3


def build_arrangement(arrangement, layers=3, channels=32, k=3):
    """Instantiate the weight tensors of a context block (used to cross-check counts)."""
    arrangement = _arrangement(arrangement)
    store = ParamStore(None, np.float32, init="zeros")
    if arrangement == "FACTORIZED_1D":
        for b, order in enumerate(BRANCH_ORDERS):
            for j, axis in enumerate(order):
                shape = [1, 1, 1]
                shape[T.AXES[axis] - 1] = k
                store.conv(f"refine.b{b}.{j}", channels, channels, shape)
    else:
        for i in range(layers):
            store.conv(f"conv{i}", channels, channels, (k, k, k))
    return store.params


def count_weights(params, prefix=""):
    """Total elements of all ``*.weight`` arrays whose name starts with ``prefix``."""
    return sum(p.size for name, p in params.items()
               if name.startswith(prefix) and name.endswith(".weight"))


# ------------------------------------------------------------------ checkpoint
CKPT_MAGIC = b"FSC1"
CKPT_VERSION = 1


def save_checkpoint(model, path):
    """Binary checkpoint: magic, version, config text, then named f32 tensors."""
    text = model.config.to_text().encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(text)), text,
              struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, dtype=np.float32):
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"checkpoint truncated, needed {n} bytes", pos)
        out = raw[pos:pos + n]
        pos += n
        return out

    if take(4) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, text_len = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    config = ModelConfig.from_text(take(text_len).decode("utf-8"))
    model = SynthesisModel(config, dtype=dtype, init="zeros")
    (count,) = struct.unpack("<I", take(4))
    for _ in range(count):
        offset = pos
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        data = np.frombuffer(take(4 * int(np.prod(shape))), dtype="<f4").reshape(shape)
        if name not in model.params or model.params[name].shape != shape:
            raise FormatError(f"unexpected tensor {name!r} with shape {shape}", offset)
        model.params[name].data = data.astype(dtype)
    return model
