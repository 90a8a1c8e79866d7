"""Dataset ingestion: CIFAR-10 binary batches, synthetic templates, DVS events.

CIFAR-10 binary records are 3073 bytes: one label byte followed by 1024 red,
1024 green and 1024 blue bytes, each plane a row-major 32 x 32 image.

Event fixtures are text files with one event per line ``t x y p`` (integer
microseconds, pixel column, pixel row, polarity 0/1). Optional header lines
``# sensor W H`` and ``# duration D`` set the sensor size and stream length.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class LabeledFrames:
    frames: np.ndarray   # (N, C, H, W) or (N, T, C, H, W) for event data
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.frames) != len(self.labels):
            raise DataError(f"{len(self.frames)} frames but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return self.frames.shape[1:]

    @property
    def is_sequence(self) -> bool:
        return self.frames.ndim == 5

    def subset(self, idx) -> "LabeledFrames":
        return LabeledFrames(self.frames[idx], self.labels[idx], self.num_classes)

    def batches(self, batch_size: int, shuffle: bool = False, seed: int = 0,
                epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Yield ``(x, y, indices)``; the order depends only on (seed, epoch)."""
        order = np.arange(len(self))
        if shuffle:
            order = np.random.default_rng([seed, epoch]).permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            x = self.frames[idx]
            if x.ndim == 5:
                x = np.swapaxes(x, 0, 1)  # to (T, B, C, H, W)
            yield x, self.labels[idx], idx


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------

def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise DataError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD} (truncated file?)")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    return rec[:, 1:].reshape((-1,) + CIFAR_SHAPE).copy(), rec[:, 0].astype(np.int64)


def write_cifar_batch(path, images: np.ndarray, labels: Sequence[int]) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(-1, 3072)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    Path(path).write_bytes(np.concatenate([labels, images], axis=1).tobytes())


def standardize(frames: np.ndarray, mean=CIFAR_MEAN, std=CIFAR_STD) -> np.ndarray:
    m = np.asarray(mean).reshape(1, -1, 1, 1)
    s = np.asarray(std).reshape(1, -1, 1, 1)
    return (frames - m) / s


def _select(frames, labels, class_subset):
    if class_subset is None:
        return frames, labels, 10
    class_subset = list(class_subset)
    keep = np.isin(labels, class_subset)
    remap = {c: i for i, c in enumerate(class_subset)}
    return frames[keep], np.array([remap[int(l)] for l in labels[keep]], dtype=np.int64), len(class_subset)


def load_cifar10(directory, class_subset: Sequence[int] | None = None, normalize: bool = True,
                 expected_counts: tuple[int, int] | None = None) -> tuple[LabeledFrames, LabeledFrames]:
    """Load train and test splits from the standard binary batch files.

    Pixels are scaled to [0, 1] and, if ``normalize``, standardized per
    channel. A ``class_subset`` keeps only those labels, renumbered 0..n-1
    in the order given. Missing train batches are skipped so small fixture
    directories work; ``expected_counts`` enforces exact record counts.
    """
    d = Path(directory)
    train_files = [d / f for f in CIFAR_TRAIN_FILES if (d / f).exists()]
    if not train_files:
        raise DataError(f"{d}: no CIFAR-10 training batches found")
    if not (d / CIFAR_TEST_FILE).exists():
        raise DataError(f"{d}: missing {CIFAR_TEST_FILE}")
    parts = [read_cifar_batch(f) for f in train_files]
    tr_x = np.concatenate([p[0] for p in parts])
    tr_y = np.concatenate([p[1] for p in parts])
    te_x, te_y = read_cifar_batch(d / CIFAR_TEST_FILE)
    if expected_counts is not None and (len(tr_y), len(te_y)) != tuple(expected_counts):
        raise DataError(f"record count mismatch: got {len(tr_y)}/{len(te_y)}, expected {expected_counts}")
    out = []
    for x, y in ((tr_x, tr_y), (te_x, te_y)):
        x = x.astype(np.float64) / 255.0
        if normalize:
            x = standardize(x)
        x, y, k = _select(x, y, class_subset)
        out.append(LabeledFrames(x, y, k))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# synthetic templates
# ---------------------------------------------------------------------------

def synthetic_patterns(num_classes: int, samples_per_class: int, size=(1, 8, 8),
                       noise: float = 0.0, seed: int = 0, shift: int = 0) -> LabeledFrames:
    """Class templates plus seeded Gaussian noise, clipped to [0, 1].

    Each class has one fixed random template; ``shift`` additionally rolls
    each sample by up to that many pixels. Samples are interleaved by class.
    """
    if num_classes < 1 or samples_per_class < 1 or noise < 0:
        raise ValueError("num_classes and samples_per_class must be positive, noise non-negative")
    if isinstance(size, int):
        size = (1, size, size)
    rng = np.random.default_rng(seed)
    templates = rng.uniform(0.0, 1.0, size=(num_classes,) + tuple(size))
    labels = np.tile(np.arange(num_classes), samples_per_class)
    frames = templates[labels] + noise * rng.standard_normal((len(labels),) + tuple(size))
    if shift:
        for i, s in enumerate(rng.integers(-shift, shift + 1, size=(len(labels), 2))):
            frames[i] = np.roll(frames[i], tuple(s), axis=(1, 2))
    return LabeledFrames(np.clip(frames, 0.0, 1.0), labels, num_classes)


def nearest_template_accuracy(data: LabeledFrames, templates: np.ndarray) -> float:
    flat = data.frames.reshape(len(data), -1)
    t = templates.reshape(len(templates), -1)
    d = ((flat[:, None, :] - t[None]) ** 2).sum(axis=-1)
    return float((d.argmin(axis=1) == data.labels).mean())


def split(data: LabeledFrames, test_fraction: float, seed: int) -> tuple[LabeledFrames, LabeledFrames]:
    """Seeded shuffle then split; the first ``1 - test_fraction`` goes to train."""
    order = np.random.default_rng(seed).permutation(len(data))
    n_test = int(round(len(data) * test_fraction))
    return data.subset(np.sort(order[n_test:])), data.subset(np.sort(order[:n_test]))


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------

@dataclass
class EventStream:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    sensor_size: tuple = (128, 128)   # (width, height)
    duration: float | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        self.x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        self.p = np.asarray(self.p, dtype=np.int64).reshape(-1)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise DataError("event fields have different lengths")
        if n:
            if np.any(np.diff(self.t) < 0):
                raise DataError("event timestamps must be non-decreasing")
            w, h = self.sensor_size
            if self.x.min() < 0 or self.x.max() >= w or self.y.min() < 0 or self.y.max() >= h:
                raise DataError(f"event coordinates outside sensor {w}x{h}")
            if not np.isin(self.p, (0, 1)).all():
                raise DataError("polarity must be 0 or 1")

    def __len__(self):
        return len(self.t)

    @property
    def span(self) -> float:
        if self.duration is not None:
            return float(self.duration)
        return float(self.t[-1] + 1) if len(self) else 1.0


def read_events(path) -> EventStream:
    sensor, duration, rows = (128, 128), None, []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "sensor":
                sensor = (int(parts[1]), int(parts[2]))
            elif parts and parts[0] == "duration":
                duration = float(parts[1])
            continue
        fields = line.split()
        if len(fields) != 4:
            raise DataError(f"{path}:{lineno}: expected 't x y p', got {line!r}")
        try:
            rows.append([int(v) for v in fields])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer field in {line!r}") from None
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return EventStream(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], sensor, duration)


def write_events(path, stream: EventStream) -> None:
    lines = [f"# sensor {stream.sensor_size[0]} {stream.sensor_size[1]}"]
    if stream.duration is not None:
        lines.append(f"# duration {stream.duration:g}")
    lines += [f"{t} {x} {y} {p}" for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p)]
    Path(path).write_text("\n".join(lines) + "\n")


def _area_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) overlap weights; each source pixel's mass sums to 1."""
    edges_src = np.arange(src + 1) * (dst / src)
    m = np.zeros((dst, src))
    for j in range(src):
        lo, hi = edges_src[j], edges_src[j + 1]
        for i in range(int(np.floor(lo)), min(dst, int(np.ceil(hi)))):
            m[i, j] = max(0.0, min(hi, i + 1) - max(lo, i))
    return m / (dst / src)


def accumulate_event_frames(stream: EventStream, T: int, out_size: tuple | None = None) -> np.ndarray:
    """Bin events into T equal time slices of per-polarity counts: (T, 2, H, W).

    ``out_size=(H', W')`` area-sums the counts onto a coarser grid; totals
    are conserved (values become fractional for non-integer ratios).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    w, h = stream.sensor_size
    frames = np.zeros((T, 2, h, w))
    if len(stream):
        bins = np.minimum((stream.t * T / stream.span).astype(np.int64), T - 1)
        np.add.at(frames, (bins, stream.p, stream.y, stream.x), 1.0)
    if out_size is not None and tuple(out_size) != (h, w):
        ry, rx = _area_matrix(h, out_size[0]), _area_matrix(w, out_size[1])
        frames = np.einsum("ih,tchw,jw->tcij", ry, frames, rx)
    return frames


def load_event_fixture(directory, T: int, out_size: tuple | None = None) -> LabeledFrames:
    """Read ``labels.txt`` (``filename label`` per line) and the event files it names."""
    d = Path(directory)
    index = d / "labels.txt"
    if not index.exists():
        raise DataError(f"{d}: missing labels.txt")
    frames, labels = [], []
    for lineno, line in enumerate(index.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{index}:{lineno}: expected 'filename label'")
        frames.append(accumulate_event_frames(read_events(d / parts[0]), T, out_size))
        labels.append(int(parts[1]))
    if not frames:
        raise DataError(f"{index}: no samples listed")
    return LabeledFrames(np.stack(frames), np.array(labels), int(max(labels)) + 1)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _flip(img, rng, p):
    return img[..., ::-1].copy() if rng.random() < p else img


def _crop_pad(img, rng, pixels):
    h, w = img.shape[-2:]
    if pixels < 0 or pixels >= min(h, w):
        raise ValueError(f"crop padding {pixels} invalid for {h}x{w} frames")
    if pixels == 0:
        return img
    pad = [(0, 0)] * (img.ndim - 2) + [(pixels, pixels), (pixels, pixels)]
    padded = np.pad(img, pad)
    dy, dx = rng.integers(0, 2 * pixels + 1, size=2)
    return padded[..., dy:dy + h, dx:dx + w]


def _roll(img, rng, max_shift):
    h, w = img.shape[-2:]
    if max_shift < 0 or max_shift >= min(h, w):
        raise ValueError(f"roll shift {max_shift} invalid for {h}x{w} frames")
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    return np.roll(img, (int(dy), int(dx)), axis=(-2, -1))


AUGMENTATIONS = {"horizontal_flip": _flip, "crop_pad": _crop_pad, "roll": _roll}


def augment(frames: np.ndarray, ops: Sequence[tuple[str, float]], seed: int, epoch: int,
            indices: Sequence[int]) -> np.ndarray:
    """Apply ``ops`` (name, parameter) in order to each sample.

    Sample ``i`` draws from a generator seeded with ``(seed, epoch,
    indices[i])`` so results do not depend on batch composition. Sequence
    samples (T, C, H, W) receive the same transform at every step.
    """
    out = np.empty_like(frames)
    for i, idx in enumerate(indices):
        rng = np.random.default_rng([seed, epoch, int(idx)])
        img = frames[i]
        for name, arg in ops:
            if name not in AUGMENTATIONS:
                raise ValueError(f"unknown augmentation {name!r}")
            img = AUGMENTATIONS[name](img, rng, arg if name == "horizontal_flip" else int(arg))
        out[i] = img
    return out
