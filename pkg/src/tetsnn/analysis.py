"""Loss-landscape scans and spike-count energy estimates.

Landscape directions are filter-normalized: every conv filter (and every
row of the readout matrix) of a random Gaussian direction is rescaled to
the norm of the matching filter of the trained weights. Biases and tdBN
parameters are never perturbed.

Energy follows the add/mult accounting for SNN inference: the first layer
sees real-valued input and pays one multiply-accumulate per in-bound
synapse per step, every later layer pays one add per incoming spike per
outgoing connection. Bias additions and neuron-internal work (leak,
threshold compare) are not counted.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import objective as obj
from .data import LabeledFrames
from .errors import NonFiniteError
from .lif import HEAVISIDE
from .net import AvgPool, ConvBlock, Readout, SpikingNet
from .trainer import outputs

ADD_PJ = 0.9
MULT_PJ = 4.6

LANDSCAPE_COLUMNS = ("alpha", "beta", "loss_sdt", "loss_tet")
ENERGY_COLUMNS = ("layer", "name", "op", "events", "count", "energy_pj")

_LOSSES = {obj.SDT: obj.loss_sdt, obj.TET: obj.loss_tet}


# ---------------------------------------------------------------------------
# landscape
# ---------------------------------------------------------------------------

@dataclass
class LandscapeGrid:
    alphas: np.ndarray
    betas: np.ndarray
    values: dict            # loss kind -> (n, n), indexed [alpha, beta]
    flags: dict             # loss kind -> (n, n) bool, True where non-finite
    directions: tuple       # (d1, d2), each a list of arrays matching the perturbed weights
    span: float
    seed: int

    @property
    def resolution(self) -> int:
        return len(self.alphas)

    @property
    def center(self) -> int:
        return self.resolution // 2

    def center_value(self, kind: str) -> float:
        return float(self.values[kind][self.center, self.center])

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LANDSCAPE_COLUMNS)
        sdt = self.values.get(obj.SDT)
        tet = self.values.get(obj.TET)
        for i, a in enumerate(self.alphas):
            for j, b in enumerate(self.betas):
                w.writerow([repr(float(a)), repr(float(b)),
                            "" if sdt is None else repr(float(sdt[i, j])),
                            "" if tet is None else repr(float(tet[i, j]))])
        return buf.getvalue()


def perturbed_weights(net: SpikingNet) -> list:
    """Conv kernels and the readout matrix, in layer order."""
    out = []
    for layer in net.layers:
        if isinstance(layer, (ConvBlock, Readout)):
            out.append(layer.weight)
    return out


def filter_normalized_direction(weights, rng) -> list:
    """Gaussian direction with each filter rescaled to the weight filter's norm."""
    dirs = []
    for w in weights:
        d = rng.standard_normal(w.shape)
        flat_d = d.reshape(w.shape[0], -1)
        flat_w = w.data.reshape(w.shape[0], -1)
        dn = np.linalg.norm(flat_d, axis=1, keepdims=True)
        wn = np.linalg.norm(flat_w, axis=1, keepdims=True)
        flat_d *= wn / np.where(dn > 0, dn, 1.0)
        dirs.append(d)
    return dirs


def grid_axis(resolution: int, span: float) -> np.ndarray:
    """Symmetric coordinates with an exact 0 in the middle."""
    m = resolution // 2
    if m == 0:
        return np.zeros(1)
    return span * np.arange(-m, m + 1) / m


def landscape_scan(net: SpikingNet, data: LabeledFrames, kinds=(obj.SDT, obj.TET), resolution: int = 21,
                   span: float = 0.5, seed: int = 0, T: int | None = None) -> LandscapeGrid:
    """Evaluate the losses on ``theta + a*d1 + b*d2`` over a square grid.

    Evaluation is in eval mode (running BN statistics) on the fixed
    ``data``, so the center cell equals the unperturbed evaluation loss
    exactly. Non-finite cells are flagged and the scan goes on.
    """
    if resolution < 1 or resolution % 2 == 0:
        raise ValueError(f"resolution must be a positive odd number, got {resolution}")
    if span < 0:
        raise ValueError("span must be >= 0")
    for k in kinds:
        if k not in _LOSSES:
            raise ValueError(f"cannot scan loss kind {k!r}")
    probe = net.copy()
    weights = perturbed_weights(probe)
    theta = [w.data.copy() for w in weights]
    rng = np.random.default_rng(seed)
    d1 = filter_normalized_direction(weights, rng)
    d2 = filter_normalized_direction(weights, rng)
    axis = grid_axis(resolution, span)
    values = {k: np.empty((resolution, resolution)) for k in kinds}
    y = data.labels
    with np.errstate(all="ignore"):
        for i, a in enumerate(axis):
            for j, b in enumerate(axis):
                for w, t0, u, v in zip(weights, theta, d1, d2):
                    w.data = t0 + a * u + b * v
                try:
                    O = outputs(probe, data, T)
                except NonFiniteError:
                    O = None
                for k in kinds:
                    ok = O is not None and np.isfinite(O).all()
                    values[k][i, j] = _LOSSES[k](O, y) if ok else np.nan
    flags = {k: ~np.isfinite(v) for k, v in values.items()}
    return LandscapeGrid(axis, axis.copy(), values, flags, (d1, d2), float(span), int(seed))


def disk_mask(resolution: int, radius_cells: float) -> np.ndarray:
    c = resolution // 2
    i, j = np.mgrid[:resolution, :resolution]
    return (i - c) ** 2 + (j - c) ** 2 <= radius_cells ** 2


def sharpness_index(grid: LandscapeGrid, radius_cells: float, kind: str = obj.TET) -> float:
    """Mean of (value - center) over the cells within ``radius_cells`` of the center.

    Flagged (non-finite) cells are left out of the mean.
    """
    if radius_cells < 0 or radius_cells > grid.center:
        raise ValueError(f"radius {radius_cells} does not fit a {grid.resolution}x{grid.resolution} grid")
    vals = grid.values[kind]
    mask = disk_mask(grid.resolution, radius_cells) & ~grid.flags[kind]
    if not mask.any():
        return float("nan")
    return float(np.mean(vals[mask] - grid.center_value(kind)))


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------

@dataclass
class EnergyReport:
    adds: int
    mults: int
    batch: int
    T: int
    per_layer: list = field(default_factory=list)

    @property
    def energy_pj(self) -> float:
        return ADD_PJ * self.adds + MULT_PJ * self.mults

    @property
    def energy_pj_per_sample(self) -> float:
        return self.energy_pj / self.batch

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=ENERGY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.per_layer:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        w.writerow({"layer": "total", "name": "", "op": "add", "events": "", "count": self.adds,
                    "energy_pj": repr(ADD_PJ * self.adds)})
        w.writerow({"layer": "total", "name": "", "op": "mult", "events": "", "count": self.mults,
                    "energy_pj": repr(MULT_PJ * self.mults)})
        return buf.getvalue()


def _taps(n: int, k: int) -> np.ndarray:
    """For each of n input positions, how many same-padded outputs it reaches."""
    p = k // 2
    i = np.arange(n)
    return np.minimum(i + p, n - 1) - np.maximum(i - p, 0) + 1


def conv_fanout(out_channels: int, k: int, h: int, w: int) -> np.ndarray:
    """(h, w) count of synapses leaving each input position of one channel."""
    return out_channels * np.outer(_taps(h, k), _taps(w, k))


def _sum_pool(x: np.ndarray, k: int) -> np.ndarray:
    *lead, h, w = x.shape
    h2, w2 = h // k, w // k
    x = x[..., :h2 * k, :w2 * k].reshape(*lead, h2, k, w2, k)
    return x.sum(axis=(-3, -1))


def energy_estimate(net: SpikingNet, x, T: int | None = None) -> EnergyReport:
    """Count synaptic operations of one eval-mode forward pass.

    An unfolded network is folded first. Sigmoid mode is rejected since it
    emits no spikes to gate the adds.
    """
    if net.lif.activation != HEAVISIDE:
        raise ValueError("energy estimate needs the Heaviside (spiking) activation")
    folded = net if net.folded else net.fold()
    h = folded.prepare_input(x, T)
    T, batch = h.shape[:2]
    spikes = []
    folded.forward(h, training=False, record=spikes)

    per_layer = []
    adds = mults = 0
    events = None          # per-position input counts feeding the next synaptic layer
    block = 0
    for idx, layer in enumerate(folded.layers):
        if isinstance(layer, AvgPool):
            events = _sum_pool(events, layer.stride)
            continue
        if isinstance(layer, ConvBlock):
            name = str(layer.spec)
            hh, ww = events.shape[-2:] if events is not None else folded.input_shape[1:]
            fan = conv_fanout(layer.spec.out_channels, layer.spec.kernel, hh, ww)
        else:
            name = "FC"
            fan = layer.weight.shape[0]
        if events is None:
            # first synaptic layer: real-valued input, every in-bound synapse multiplies
            n_in = T * batch * int(np.prod(folded.input_shape))
            per_channel = T * batch * folded.input_shape[0]
            count = int(per_channel * np.sum(fan)) if np.ndim(fan) else n_in * int(fan)
            mults += count
            per_layer.append({"layer": idx, "name": name, "op": "mult", "events": n_in,
                              "count": count, "energy_pj": MULT_PJ * count})
        else:
            per_pos = events.sum(axis=(0, 1, 2))
            n_events = int(per_pos.sum())
            count = int(np.sum(per_pos * fan)) if np.ndim(fan) else n_events * int(fan)
            adds += count
            per_layer.append({"layer": idx, "name": name, "op": "add", "events": n_events,
                              "count": count, "energy_pj": ADD_PJ * count})
        if isinstance(layer, ConvBlock):
            events = spikes[block].astype(np.int64)
            block += 1
    return EnergyReport(adds=adds, mults=mults, batch=int(batch), T=int(T), per_layer=per_layer)
