"""Layer stack, architecture strings, tdBN and inference-time BN folding.

Architecture strings are dash-separated tokens::

    16C3-AP2-32C3-AP2-FC

``<n>C<k>`` is an n-channel k x k convolution (stride 1, same padding)
followed by tdBN and a LIF population, ``AP<k>`` a k x k average pool and
the final ``FC`` a linear readout whose per-step output is the logit O(t).
"""
from __future__ import annotations

import copy
import io
import json
import re
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .errors import ShapeError
from .lif import LifConfig, readout_accumulate, run_lif
from .ndgrad import Tensor

SNN_TINY = "16C3-AP2-32C3-AP2-FC"
SNN_5 = "16C3-64C5-AP2-128C5-AP2-256C5-AP2-512C3-AP2-FC"
VGGSNN = "64C3-128C3-AP2-256C3-256C3-AP2-512C3-512C3-AP2-512C3-512C3-AP2-FC"

CHECKPOINT_FORMAT = "tetsnn-checkpoint"
CHECKPOINT_VERSION = 1


class ArchError(ValueError):
    pass


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int

    def __str__(self):
        return f"{self.out_channels}C{self.kernel}"


@dataclass(frozen=True)
class AvgPool:
    stride: int

    def __str__(self):
        return f"AP{self.stride}"


@dataclass(frozen=True)
class FC:
    def __str__(self):
        return "FC"


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple

    def __str__(self):
        return "-".join(str(layer) for layer in self.layers)

    @property
    def convs(self) -> list:
        return [layer for layer in self.layers if isinstance(layer, Conv)]


_CONV = re.compile(r"^(\d+)C(\d+)$")
_POOL = re.compile(r"^AP(\d+)$")


def parse_arch(s: str) -> ArchSpec:
    if not s or not s.strip():
        raise ArchError("empty architecture string")
    tokens = s.strip().split("-")
    layers = []
    for pos, tok in enumerate(tokens, start=1):
        if tok == "":
            raise ArchError(f"empty token at position {pos} (stray dash) in {s!r}")
        if m := _CONV.match(tok):
            n, k = int(m.group(1)), int(m.group(2))
            if n < 1 or k < 1:
                raise ArchError(f"token {pos} {tok!r}: counts must be positive")
            if k % 2 == 0:
                raise ArchError(f"token {pos} {tok!r}: kernel must be odd to keep the spatial size")
            layers.append(Conv(n, k))
        elif m := _POOL.match(tok):
            k = int(m.group(1))
            if k < 1:
                raise ArchError(f"token {pos} {tok!r}: pool size must be positive")
            layers.append(AvgPool(k))
        elif tok == "FC":
            if pos != len(tokens):
                raise ArchError(f"token {pos} 'FC' must be the last token")
            layers.append(FC())
        else:
            raise ArchError(f"unknown token {pos} {tok!r}")
    if not isinstance(layers[-1], FC):
        raise ArchError(f"architecture {s!r} must end with FC")
    return ArchSpec(tuple(layers))


# ---------------------------------------------------------------------------
# tdBN
# ---------------------------------------------------------------------------

class TdbnParams:
    """Per-channel affine plus running mean/variance over (time, batch, space)."""

    def __init__(self, channels: int, init_scale: float = 1.0, eps: float = 1e-5,
                 momentum: float = 0.1, dtype=np.float64):
        self.gamma = Tensor(np.full(channels, init_scale, dtype=dtype), requires_grad=True, name="bn_gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name="bn_beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def alpha(self) -> np.ndarray:
        return np.sqrt(self.running_var + self.eps)


def tdbn_forward(x: Tensor, params: TdbnParams, training: bool) -> Tensor:
    """x is (T, B, C, H, W) or (T, B, C); statistics are shared over every axis but C."""
    x = nd.as_tensor(x)
    if x.ndim < 3 or x.shape[2] != params.channels:
        raise ShapeError(f"tdBN expects channel axis 2 of size {params.channels}, got input {x.shape}")
    axes = (0, 1) + tuple(range(3, x.ndim))
    bshape = (1, 1, params.channels) + (1,) * (x.ndim - 3)
    gamma = nd.reshape(params.gamma, bshape)
    beta = nd.reshape(params.beta, bshape)
    if training:
        out, mu, var = nd.batch_norm(x, gamma, beta, axes=axes, eps=params.eps)
        n = x.size // params.channels
        unbiased = var.reshape(-1) * (n / max(n - 1, 1))
        m = params.momentum
        params.running_mean = (1 - m) * params.running_mean + m * mu.reshape(-1)
        params.running_var = (1 - m) * params.running_var + m * unbiased
        return out
    shift = params.running_mean.reshape(bshape)
    inv = (1.0 / params.alpha).reshape(bshape)
    return nd.add(nd.mul(nd.mul(nd.sub(x, shift), inv), gamma), beta)


def fold_bn(w: np.ndarray, b: np.ndarray, params: TdbnParams) -> tuple[np.ndarray, np.ndarray]:
    """Merge eval-mode BN into the preceding convolution's weight and bias."""
    alpha = params.alpha
    if np.any(~(alpha > 0)):
        raise ValueError("running standard deviation must be positive to fold BN")
    ratio = params.gamma.data / alpha
    w_hat = w * ratio.reshape((-1,) + (1,) * (w.ndim - 1))
    b_hat = params.beta.data + (b - params.running_mean) * ratio
    return w_hat, b_hat


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class ConvBlock:
    """Conv -> tdBN -> LIF. After ``fold`` the BN is gone and the bias is live."""

    def __init__(self, in_channels: int, spec: Conv, rng, v_th: float, dtype):
        k = spec.kernel
        fan_in = in_channels * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.out_channels, in_channels, k, k))
        self.spec = spec
        self.weight = Tensor(w.astype(dtype), requires_grad=True, name="conv_weight")
        # a bias in front of BN is cancelled exactly; it is kept as a buffer for folding
        self.bias = np.zeros(spec.out_channels, dtype=dtype)
        self.bn: TdbnParams | None = TdbnParams(spec.out_channels, init_scale=v_th, dtype=dtype)

    @property
    def folded(self) -> bool:
        return self.bn is None

    def parameters(self) -> list[Tensor]:
        if self.folded:
            return [self.weight]
        return [self.weight, self.bn.gamma, self.bn.beta]

    def currents(self, x: Tensor, training: bool) -> Tensor:
        t, b = x.shape[:2]
        flat = nd.reshape(x, (t * b,) + x.shape[2:])
        if self.folded:
            h = nd.conv2d(flat, self.weight, self.bias)
        else:
            h = nd.conv2d(flat, self.weight)
            if np.any(self.bias):
                h = nd.add(h, self.bias.reshape(1, -1, 1, 1))
        h = nd.reshape(h, (t, b) + h.shape[1:])
        if not self.folded:
            h = tdbn_forward(h, self.bn, training)
        return h

    def fold(self):
        w_hat, b_hat = fold_bn(self.weight.data, self.bias, self.bn)
        self.weight = Tensor(w_hat, requires_grad=True, name="conv_weight")
        self.bias = b_hat
        self.bn = None


class Readout:
    def __init__(self, in_features: int, num_classes: int, rng, dtype):
        w = rng.normal(0.0, np.sqrt(2.0 / in_features), size=(num_classes, in_features))
        self.weight = Tensor(w.astype(dtype), requires_grad=True, name="fc_weight")
        self.bias = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True, name="fc_bias")

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        t, b = x.shape[:2]
        flat = nd.reshape(x, (t * b, -1))
        out = nd.linear(flat, self.weight, self.bias)
        return nd.reshape(out, (t, b, -1))


def _pool(x: Tensor, k: int) -> Tensor:
    t, b = x.shape[:2]
    out = nd.avg_pool2d(nd.reshape(x, (t * b,) + x.shape[2:]), k)
    return nd.reshape(out, (t, b) + out.shape[1:])


class SpikingNet:
    """A feed-forward spiking CNN unrolled over T timesteps.

    Static images (B, C, H, W) are fed unchanged at every step; sequences
    (T, B, C, H, W) are fed step by step.
    """

    def __init__(self, arch: str | ArchSpec, input_shape: tuple, num_classes: int,
                 lif: LifConfig | None = None, seed: int = 0, dtype=np.float64, T: int = 4):
        self.T = int(T)
        self.arch = parse_arch(arch) if isinstance(arch, str) else arch
        self.input_shape = tuple(int(v) for v in input_shape)
        self.num_classes = int(num_classes)
        self.lif = lif or LifConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c, h, w = self.input_shape
        self.layers = []
        for spec in self.arch.layers:
            if isinstance(spec, Conv):
                self.layers.append(ConvBlock(c, spec, rng, self.lif.v_th, self.dtype))
                c = spec.out_channels
            elif isinstance(spec, AvgPool):
                h, w = h // spec.stride, w // spec.stride
                if h == 0 or w == 0:
                    raise ShapeError(f"{spec} reduces input {self.input_shape} to nothing")
                self.layers.append(spec)
            else:
                self.layers.append(Readout(c * h * w, self.num_classes, rng, self.dtype))

    @property
    def folded(self) -> bool:
        return any(isinstance(l, ConvBlock) and l.folded for l in self.layers)

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self.layers:
            if hasattr(layer, "parameters"):
                params.extend(layer.parameters())
        return params

    def bn_layers(self) -> list[TdbnParams]:
        return [l.bn for l in self.layers if isinstance(l, ConvBlock) and l.bn is not None]

    def prepare_input(self, x, T: int | None = None) -> Tensor:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=self.dtype)
        if x.ndim == 4:
            T = self.T if T is None else T
            if T is None or T < 1:
                raise ValueError("static input needs T >= 1")
            x = np.broadcast_to(x, (T,) + x.shape)
        elif x.ndim != 5:
            raise ShapeError(f"expected (B, C, H, W) or (T, B, C, H, W), got {x.shape}")
        elif T is not None and x.shape[0] != T:
            raise ShapeError(f"sequence length {x.shape[0]} does not match T={T}")
        if x.shape[2:] != self.input_shape:
            raise ShapeError(f"input sample shape {x.shape[2:]} does not match network input {self.input_shape}")
        return Tensor(x)

    def forward(self, x, T: int | None = None, training: bool = False,
                record: list | None = None) -> Tensor:
        """Return per-step logits O with shape (T, B, num_classes).

        If ``record`` is a list, the spike tensor of every LIF block is
        appended to it as a numpy array (T, B, C, H, W).
        """
        h = self.prepare_input(x, T)
        for layer in self.layers:
            if isinstance(layer, ConvBlock):
                h = run_lif(layer.currents(h, training), self.lif)
                if record is not None:
                    record.append(h.data.copy())
            elif isinstance(layer, AvgPool):
                h = _pool(h, layer.stride)
            else:
                h = readout_accumulate(layer(h)).O
        return h

    __call__ = forward

    def fold(self) -> "SpikingNet":
        """Copy of this network with every tdBN merged into its convolution."""
        net = copy.deepcopy(self)
        for layer in net.layers:
            if isinstance(layer, ConvBlock) and not layer.folded:
                layer.fold()
        return net

    def copy(self) -> "SpikingNet":
        return copy.deepcopy(self)

    def with_lif(self, lif: LifConfig) -> "SpikingNet":
        net = copy.deepcopy(self)
        net.lif = lif
        return net

    # -- checkpointing ------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ConvBlock):
                out[f"layer{i}.weight"] = layer.weight.data
                out[f"layer{i}.bias"] = layer.bias
                if layer.bn is not None:
                    out[f"layer{i}.bn_gamma"] = layer.bn.gamma.data
                    out[f"layer{i}.bn_beta"] = layer.bn.beta.data
                    out[f"layer{i}.bn_mean"] = layer.bn.running_mean
                    out[f"layer{i}.bn_var"] = layer.bn.running_var
            elif isinstance(layer, Readout):
                out[f"layer{i}.weight"] = layer.weight.data
                out[f"layer{i}.bias"] = layer.bias.data
        return out

    def meta(self) -> dict:
        bn = self.bn_layers()
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "arch": str(self.arch),
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "lif": asdict(self.lif),
            "dtype": self.dtype.name,
            "folded": self.folded,
            "T": self.T,
            "bn_eps": bn[0].eps if bn else 1e-5,
            "bn_momentum": bn[0].momentum if bn else 0.1,
        }


def save_checkpoint(net: SpikingNet, path) -> None:
    """Write a numpy ``.npz``-compatible zip with fixed timestamps.

    Entries are ``__meta__.npy`` (a JSON string) and one ``layer<i>.<name>.npy``
    per tensor; the byte stream depends only on the network contents.
    """
    entries = {"__meta__": np.array(json.dumps(net.meta(), sort_keys=True))}
    entries.update(net.state_arrays())
    with zipfile.ZipFile(Path(path), "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(entries):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(entries[key]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path) -> SpikingNet:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"].ravel()[0]))
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    net = SpikingNet(meta["arch"], tuple(meta["input_shape"]), meta["num_classes"],
                     LifConfig(**meta["lif"]), seed=0, dtype=np.dtype(meta["dtype"]), T=meta["T"])
    for i, layer in enumerate(net.layers):
        if isinstance(layer, ConvBlock):
            layer.weight.data = arrays[f"layer{i}.weight"].copy()
            layer.bias = arrays[f"layer{i}.bias"].copy()
            if meta["folded"]:
                layer.bn = None
            else:
                layer.bn.gamma.data = arrays[f"layer{i}.bn_gamma"].copy()
                layer.bn.beta.data = arrays[f"layer{i}.bn_beta"].copy()
                layer.bn.running_mean = arrays[f"layer{i}.bn_mean"].copy()
                layer.bn.running_var = arrays[f"layer{i}.bn_var"].copy()
                layer.bn.eps = meta["bn_eps"]
                layer.bn.momentum = meta["bn_momentum"]
        elif isinstance(layer, Readout):
            layer.weight.data = arrays[f"layer{i}.weight"].copy()
            layer.bias.data = arrays[f"layer{i}.bias"].copy()
    return net
