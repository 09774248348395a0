"""Gridded sequence data: containers, GSQ1 files, augmentation and a synthetic generator.

A :class:`GridSequence` holds ``T x H x W x C`` float32 frames normalized to
``[0, 1]``.  Samples pair an input sequence with the target sequence that
immediately follows it.  The synthetic generator advects Gaussian blobs with
a constant per-sample velocity and smooths them with a binomial kernel, so a
small model can learn the dynamics in minutes on a CPU.
"""

import math
import os
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigurationError, FormatError, ShapeError, StatisticsError
from .kvconfig import check_keys, format_kv, read_kv, to_list

SPLITS = ("train", "validation", "test")
TRANSFORMS = ("identity", "mirror_h", "mirror_v", "rot90", "rot180", "rot270")

GSQ_MAGIC = b"GSQ1"
_GSQ_HEADER = struct.Struct("<4s5I")
_MAX_FLOATS = 1 << 31


@dataclass(frozen=True, eq=False)
class GridSequence:
    frames: np.ndarray
    variable_names: tuple = ()
    step_minutes: int = 15

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float32, copy=True)
        if frames.ndim != 4 or min(frames.shape) < 1:
            raise ShapeError(f"frames must be a non-empty T x H x W x C array, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("frames contain non-finite values")
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise ValueError(f"frames must lie in [0, 1], got [{frames.min()}, {frames.max()}]")
        names = tuple(self.variable_names) or tuple(f"ch{i}" for i in range(frames.shape[-1]))
        if len(names) != frames.shape[-1]:
            raise ShapeError(f"{len(names)} variable names for {frames.shape[-1]} channels")
        if int(self.step_minutes) < 1:
            raise ValueError("step_minutes must be positive")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "variable_names", names)
        object.__setattr__(self, "step_minutes", int(self.step_minutes))

    @property
    def shape(self):
        return self.frames.shape

    def __len__(self):
        return self.frames.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GridSequence):
            return NotImplemented
        return (
            self.variable_names == other.variable_names
            and self.step_minutes == other.step_minutes
            and self.frames.shape == other.frames.shape
            and bool(np.array_equal(self.frames, other.frames))
        )

    __hash__ = None

    def channel_index(self, channel):
        return _channel_index(self.variable_names, channel)

    def replace_frames(self, frames, variable_names=None):
        return GridSequence(frames, variable_names or self.variable_names, self.step_minutes)


@dataclass(frozen=True, eq=False)
class SamplePair:
    input: GridSequence
    target: GridSequence
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigurationError(f"unknown split {self.split!r}")
        a, b = self.input, self.target
        if a.shape[1:] != b.shape[1:]:
            raise ShapeError(f"input {a.shape} and target {b.shape} differ in H, W or C")
        if a.variable_names != b.variable_names or a.step_minutes != b.step_minutes:
            raise ShapeError("input and target disagree on variables or time step")

    def __eq__(self, other):
        if not isinstance(other, SamplePair):
            return NotImplemented
        return self.split == other.split and self.input == other.input and self.target == other.target

    __hash__ = None


class Dataset:
    """Samples grouped by split; every sample shares the same shapes."""

    def __init__(self, samples, metadata=None):
        self.samples = list(samples)
        self.metadata = dict(metadata or {})
        if self.samples:
            ref = self.samples[0]
            for s in self.samples[1:]:
                if s.input.shape != ref.input.shape or s.target.shape != ref.target.shape:
                    raise ShapeError("all samples in a dataset must share shapes")
                if s.input.variable_names != ref.input.variable_names:
                    raise ShapeError("all samples in a dataset must share variables")
        self._index = {name: [i for i, s in enumerate(self.samples) if s.split == name] for name in SPLITS}

    def __len__(self):
        return len(self.samples)

    def split(self, name):
        if name not in SPLITS:
            raise ConfigurationError(f"unknown split {name!r}")
        return [self.samples[i] for i in self._index[name]]

    def count(self, name):
        return len(self._index[name])

    @property
    def variable_names(self):
        if not self.samples:
            return ()
        return self.samples[0].input.variable_names

    @property
    def step_minutes(self):
        return self.samples[0].input.step_minutes if self.samples else 15

    def arrays(self, name):
        """Stacked ``(inputs, targets)`` arrays of shape ``N x T x H x W x C`` for one split."""
        samples = self.split(name)
        if not samples:
            raise StatisticsError(f"split {name!r} is empty")
        x = np.stack([s.input.frames for s in samples])
        y = np.stack([s.target.frames for s in samples])
        return x, y


def _channel_index(names, channel):
    if isinstance(channel, (int, np.integer)):
        if not 0 <= channel < len(names):
            raise ConfigurationError(f"channel index {channel} out of range for {len(names)} channels")
        return int(channel)
    try:
        return list(names).index(channel)
    except ValueError:
        raise ConfigurationError(f"unknown variable {channel!r}; have {', '.join(names)}") from None


def channel_mean(dataset, split, channel):
    """Mean of one channel over every input and target frame and pixel in a split."""
    samples = dataset.split(split)
    if not samples:
        raise StatisticsError(f"split {split!r} is empty")
    c = _channel_index(dataset.variable_names, channel)
    total = 0.0
    count = 0
    for s in samples:
        for seq in (s.input, s.target):
            plane = seq.frames[..., c]
            total += float(plane.sum(dtype=np.float64))
            count += plane.size
    return total / count


# augmentation ---------------------------------------------------------------


def transform_array(a, transform):
    """Apply a spatial transform to an array whose last three axes are H, W, C."""
    h_axis, w_axis = a.ndim - 3, a.ndim - 2
    if transform == "identity":
        return a
    if transform == "mirror_h":
        return np.flip(a, axis=w_axis)
    if transform == "mirror_v":
        return np.flip(a, axis=h_axis)
    if transform in ("rot90", "rot180", "rot270"):
        k = {"rot90": 1, "rot180": 2, "rot270": 3}[transform]
        if k % 2 and a.shape[h_axis] != a.shape[w_axis]:
            raise ShapeError(f"{transform} needs a square grid, got {a.shape[h_axis]}x{a.shape[w_axis]}")
        return np.rot90(a, k=k, axes=(h_axis, w_axis))
    raise ConfigurationError(f"unknown transform {transform!r}")


def augment(sample, transform):
    return SamplePair(
        sample.input.replace_frames(transform_array(sample.input.frames, transform)),
        sample.target.replace_frames(transform_array(sample.target.frames, transform)),
        sample.split,
    )


# GSQ1 files -----------------------------------------------------------------


def write_gridseq(path, seq):
    t, h, w, c = seq.frames.shape
    with open(path, "wb") as fh:
        fh.write(_GSQ_HEADER.pack(GSQ_MAGIC, t, h, w, c, seq.step_minutes))
        fh.write(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())


def read_gridseq(path, variable_names=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_gridseq(blob, variable_names, source=str(path))


def decode_gridseq(blob, variable_names=None, source="<bytes>"):
    if len(blob) < _GSQ_HEADER.size:
        raise FormatError(f"{source}: header truncated ({len(blob)} bytes)", field="header")
    magic, t, h, w, c, step = _GSQ_HEADER.unpack_from(blob)
    if magic != GSQ_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {GSQ_MAGIC!r}", field="magic")
    for name, value in (("T", t), ("H", h), ("W", w), ("C", c), ("step_minutes", step)):
        if value == 0:
            raise FormatError(f"{source}: dimension {name} is zero", field=name)
    expected = t * h * w * c
    if expected > _MAX_FLOATS:
        raise FormatError(f"{source}: dimensions T*H*W*C = {expected} overflow the payload limit", field="T*H*W*C")
    payload = blob[_GSQ_HEADER.size:]
    found, rem = divmod(len(payload), 4)
    if found < expected or (found == expected and rem):
        raise FormatError(f"{source}: payload truncated, expected {expected} floats, found {found}", field="payload")
    if len(payload) != expected * 4:
        raise FormatError(f"{source}: {len(payload) - expected * 4} trailing bytes after payload", field="payload")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, h, w, c)
    if variable_names is not None and len(variable_names) != c:
        raise FormatError(f"{source}: {len(variable_names)} variable names for C={c}", field="C")
    try:
        return GridSequence(frames, tuple(variable_names or ()), step)
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}", field="payload") from None


# dataset directories -----------------------------------------------------------

MANIFEST = "dataset.txt"


def _sample_paths(root, split, i):
    base = os.path.join(root, split, f"{i:06d}")
    return base + "_input.gsq", base + "_target.gsq"


def save_dataset(dataset, root, extra=None):
    os.makedirs(root, exist_ok=True)
    manifest = {
        "variables": list(dataset.variable_names),
        "step_minutes": dataset.step_minutes,
    }
    for split in SPLITS:
        samples = dataset.split(split)
        manifest[f"n_{split}"] = len(samples)
        if samples:
            os.makedirs(os.path.join(root, split), exist_ok=True)
        for i, s in enumerate(samples):
            pin, pout = _sample_paths(root, split, i)
            write_gridseq(pin, s.input)
            write_gridseq(pout, s.target)
    manifest.update(extra or {})
    with open(os.path.join(root, MANIFEST), "w", encoding="utf-8") as fh:
        fh.write(format_kv(manifest))


def load_dataset(root, splits=SPLITS):
    manifest = read_kv(os.path.join(root, MANIFEST))
    names = tuple(to_list(manifest.get("variables", "")))
    samples = []
    for split in splits:
        for i in range(int(manifest.get(f"n_{split}", 0))):
            pin, pout = _sample_paths(root, split, i)
            samples.append(SamplePair(read_gridseq(pin, names), read_gridseq(pout, names), split))
    return Dataset(samples, metadata=manifest)


# synthetic generator -------------------------------------------------------------


@dataclass
class GeneratorConfig:
    n_samples: int = 64
    n_validation: int = 32
    n_test: int = 0
    height: int = 32
    width: int = 32
    t_in: int = 4
    t_out: int = 8
    n_blobs: int = 4
    velocity_min: float = 0.5
    velocity_max: float = 1.5
    velocity_jitter: float = 0.0
    diffusion: float = 0.5
    sigma_min: float = 2.0
    sigma_max: float = 5.0
    rain_sparsity: float = 0.8
    rain_sparsity_validation: float = -1.0
    rain_scale: float = 1.0
    variables: tuple = ("temperature", "crr_intensity")
    rain_variables: tuple = ("crr_intensity",)
    step_minutes: int = 15
    seed: int = 0

    def __post_init__(self):
        self.variables = tuple(self.variables)
        self.rain_variables = tuple(self.rain_variables)
        self.validate()

    def validate(self):
        for name in ("height", "width", "t_in", "t_out", "step_minutes"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("n_samples", "n_validation", "n_test", "n_blobs"):
            if int(getattr(self, name)) < 0:
                raise ConfigurationError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not self.variables:
            raise ConfigurationError("at least one variable is required")
        if len(set(self.variables)) != len(self.variables):
            raise ConfigurationError("variable names must be unique")
        missing = set(self.rain_variables) - set(self.variables)
        if missing:
            raise ConfigurationError(f"rain variables not among variables: {', '.join(sorted(missing))}")
        if not 0 <= self.velocity_min <= self.velocity_max:
            raise ConfigurationError("need 0 <= velocity_min <= velocity_max")
        if self.velocity_jitter < 0 or self.diffusion < 0:
            raise ConfigurationError("velocity_jitter and diffusion must be non-negative")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ConfigurationError("need 0 < sigma_min <= sigma_max")
        if not 0 <= self.rain_sparsity < 1:
            raise ConfigurationError("rain_sparsity must lie in [0, 1)")
        if self.rain_sparsity_validation >= 1:
            raise ConfigurationError("rain_sparsity_validation must be < 1 (negative means same as train)")
        if self.rain_scale <= 0:
            raise ConfigurationError("rain_scale must be positive")

    @classmethod
    def from_mapping(cls, mapping):
        check_keys(mapping, [f.name for f in fields(cls)], "generator config")
        kwargs = {}
        for f in fields(cls):
            if f.name not in mapping:
                continue
            raw = mapping[f.name]
            if f.name in ("variables", "rain_variables"):
                kwargs[f.name] = tuple(to_list(raw))
            elif isinstance(f.default, int):
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = float(raw)
        return cls(**kwargs)

    def to_mapping(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def sparsity_for(self, split):
        if split == "validation" and self.rain_sparsity_validation >= 0:
            return self.rain_sparsity_validation
        return self.rain_sparsity


_BINOMIAL = np.array([0.25, 0.5, 0.25])


def diffuse(field2d, rate):
    """``floor(rate)`` passes of the normalized 3x3 binomial kernel, then a fractional blend."""
    whole = int(math.floor(rate))
    frac = rate - whole
    out = field2d
    for _ in range(whole):
        out = _binomial_pass(out)
    if frac > 0:
        out = (1.0 - frac) * out + frac * _binomial_pass(out)
    return out


def _binomial_pass(a):
    p = np.pad(a, 1, mode="edge")
    rows = _BINOMIAL[0] * p[:-2, :] + _BINOMIAL[1] * p[1:-1, :] + _BINOMIAL[2] * p[2:, :]
    return _BINOMIAL[0] * rows[:, :-2] + _BINOMIAL[1] * rows[:, 1:-1] + _BINOMIAL[2] * rows[:, 2:]


def bilinear_shift(a, dy, dx):
    """Move ``a`` by ``(dy, dx)`` pixels with bilinear interpolation and edge replication."""
    if dy == 0 and dx == 0:
        return a
    h, w = a.shape
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bottom = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def _blob_canvas(rng, n_blobs, hc, wc, cfg, amplitude=(0.4, 1.0)):
    canvas = np.zeros((hc, wc))
    if n_blobs == 0:
        return canvas
    yy = np.arange(hc)[:, None]
    xx = np.arange(wc)[None, :]
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, hc), rng.uniform(0, wc)
        sigma = rng.uniform(cfg.sigma_min, cfg.sigma_max)
        amp = rng.uniform(*amplitude)
        canvas += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    return canvas


def _generate_sample(cfg, split, index):
    rng = np.random.default_rng([cfg.seed, SPLITS.index(split), index])
    n_frames = cfg.t_in + cfg.t_out
    speed = rng.uniform(cfg.velocity_min, cfg.velocity_max)
    angle = rng.uniform(0, 2 * np.pi)
    velocities = np.tile([speed * np.sin(angle), speed * np.cos(angle)], (n_frames, 1))
    if cfg.velocity_jitter > 0:
        velocities += rng.normal(0.0, cfg.velocity_jitter, size=velocities.shape)
    reach = float(np.abs(velocities).sum(axis=0).max()) if cfg.velocity_max > 0 or cfg.velocity_jitter > 0 else 0.0
    margin = int(math.ceil(reach)) + 2
    hc, wc = cfg.height + 2 * margin, cfg.width + 2 * margin
    crop = (slice(margin, margin + cfg.height), slice(margin, margin + cfg.width))
    sparsity = cfg.sparsity_for(split)

    frames = np.zeros((n_frames, cfg.height, cfg.width, len(cfg.variables)))
    for c, name in enumerate(cfg.variables):
        rain = name in cfg.rain_variables
        wetness = rng.uniform(0.0, 1.0) if rain else 1.0
        field2d = _blob_canvas(rng, cfg.n_blobs, hc, wc, cfg)
        for t in range(n_frames):
            if t > 0:
                field2d = bilinear_shift(field2d, *velocities[t - 1])
                if cfg.diffusion > 0:
                    field2d = diffuse(field2d, cfg.diffusion)
            plane = field2d[crop]
            if rain:
                cut = np.quantile(plane, sparsity, method="higher")
                plane = cfg.rain_scale * wetness * np.maximum(plane - cut, 0.0)
            frames[t, :, :, c] = plane
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def generate_synthetic(cfg):
    """Deterministic synthetic dataset; sample ``i`` of a split depends only on (seed, split, i)."""
    if not isinstance(cfg, GeneratorConfig):
        cfg = GeneratorConfig(**cfg)
    cfg.validate()
    counts = {"train": cfg.n_samples, "validation": cfg.n_validation, "test": cfg.n_test}
    samples = []
    for split in SPLITS:
        for i in range(counts[split]):
            frames = _generate_sample(cfg, split, i)
            samples.append(
                SamplePair(
                    GridSequence(frames[: cfg.t_in], cfg.variables, cfg.step_minutes),
                    GridSequence(frames[cfg.t_in:], cfg.variables, cfg.step_minutes),
                    split,
                )
            )
    meta = {f"generator.{k}": v for k, v in cfg.to_mapping().items()}
    return Dataset(samples, metadata=meta)
