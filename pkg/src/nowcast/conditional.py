"""Two-member forecaster dispatched on the peak rain rate of the input sequence."""

import struct

import numpy as np

from .errors import ConfigurationError, FormatError, ShapeError, StatisticsError
from .forecaster import build, decode_checkpoint, encode_checkpoint, fit
from .optim import Optimizer

# threshold tuned on normalized satellite rain rates; synthetic data should calibrate instead
REAL_DATA_THRESHOLD = 0.026
COND_MAGIC = b"CND1"
_HEAD = struct.Struct("<4sdI")


class ConditionalForecaster:
    """Uses ``dry_model`` when the input's peak rain rate is below ``threshold``, else ``wet_model``."""

    def __init__(self, threshold, dry_model, wet_model, channel):
        if not 0 < threshold < 1:
            raise ConfigurationError(f"threshold must lie in (0, 1), got {threshold}")
        a, b = dry_model.spec, wet_model.spec
        if (a.t_in, a.t_out, a.inputs, a.targets) != (b.t_in, b.t_out, b.inputs, b.targets):
            raise ConfigurationError("conditional members must share inputs, targets and sequence lengths")
        if isinstance(channel, str):
            if channel not in a.inputs:
                raise ConfigurationError(f"rain variable {channel!r} is not a model input")
            channel = a.inputs.index(channel)
        if not 0 <= channel < a.in_channels:
            raise ConfigurationError(f"rain channel {channel} out of range")
        self.threshold = float(threshold)
        self.dry_model = dry_model
        self.wet_model = wet_model
        self.channel = int(channel)
        self.training_log = {}

    @property
    def spec(self):
        return self.dry_model.spec

    @property
    def targets(self):
        return self.dry_model.spec.targets

    def member(self, branch):
        return self.dry_model if branch == "dry" else self.wet_model

    def route(self, x):
        """Boolean mask over a batch ``N x T x H x W x C``: True where the sample goes wet."""
        if x.shape[-1] <= self.channel:
            raise ConfigurationError(f"rain channel {self.channel} missing from input with {x.shape[-1]} channels")
        peaks = x[..., self.channel].reshape(len(x), -1).max(axis=1)
        return ~(peaks < self.threshold)

    def predict(self, seq):
        return self.member(dispatch(self, seq)).predict(seq)

    def predict_batch(self, x):
        x = np.asarray(x)
        wet = self.route(x)
        out = None
        for mask, model in ((~wet, self.dry_model), (wet, self.wet_model)):
            if not mask.any():
                continue
            y = model.predict_batch(x[mask])
            if out is None:
                out = np.empty((len(x),) + y.shape[1:], dtype=y.dtype)
            out[mask] = y
        return out


def dispatch(cf, seq):
    """``"dry"`` iff the rain channel's maximum over every input frame and pixel is below the threshold."""
    if seq.frames.shape[-1] <= cf.channel:
        raise ConfigurationError(f"rain channel {cf.channel} missing from input")
    peak = float(seq.frames[..., cf.channel].max())
    return "dry" if peak < cf.threshold else "wet"


def predict_conditional(cf, seq):
    return cf.predict(seq)


def sample_peaks(dataset, channel, split="train"):
    samples = dataset.split(split)
    if not samples:
        raise StatisticsError(f"split {split!r} is empty")
    c = samples[0].input.channel_index(channel)
    return np.array([float(s.input.frames[..., c].max()) for s in samples])


def calibrate_threshold(dataset, channel, split="train"):
    """Median of the per-sample input peaks, which splits the calibration set roughly in half."""
    return float(np.median(sample_peaks(dataset, channel, split)))


def train_conditional(dataset, mode, threshold, channel, train_cfg, opt_cfg, base=None, spec=None, seed=0):
    """Train both members on their routed share of the train split.

    ``from_pretrained`` copies ``base`` into both members; ``from_scratch``
    builds fresh members from ``spec`` (or ``base.spec``) with seeds ``seed``
    and ``seed + 1``.
    """
    if mode == "from_pretrained":
        if base is None:
            raise ConfigurationError("from_pretrained needs a base model")
        dry, wet = base.copy(), base.copy()
    elif mode == "from_scratch":
        spec = spec or (base.spec if base is not None else None)
        if spec is None:
            raise ConfigurationError("from_scratch needs a model spec")
        dry, wet = build(spec, seed), build(spec, seed + 1)
    else:
        raise ConfigurationError(f"unknown conditional mode {mode!r}")
    cf = ConditionalForecaster(threshold, dry, wet, channel)

    x, y = dataset.arrays("train")
    wet_mask = cf.route(x)
    val = None
    if dataset.count("validation"):
        vx, vy = dataset.arrays("validation")
        val = (vx, vy, cf.route(vx))
    counts = {"dry": int((~wet_mask).sum()), "wet": int(wet_mask.sum())}
    for branch, n in counts.items():
        if n == 0:
            raise ConfigurationError(f"the {branch} member receives no training samples at threshold {threshold}")
    logs = {}
    for branch, mask in (("dry", ~wet_mask), ("wet", wet_mask)):
        validation = None
        if val is not None:
            vmask = val[2] if branch == "wet" else ~val[2]
            if vmask.any():
                validation = (val[0][vmask], val[1][vmask])
        logs[branch] = fit(cf.member(branch), (x[mask], y[mask]), Optimizer(opt_cfg), train_cfg, validation)
    cf.training_log = {"counts": counts, "history": logs}
    return cf


def encode_conditional(cf):
    members = [encode_checkpoint(cf.dry_model), encode_checkpoint(cf.wet_model)]
    out = [_HEAD.pack(COND_MAGIC, cf.threshold, cf.channel)]
    for blob in members:
        out.append(struct.pack("<Q", len(blob)))
        out.append(blob)
    return b"".join(out)


def decode_conditional(blob, source="<bytes>"):
    if len(blob) < _HEAD.size:
        raise FormatError(f"{source}: conditional header truncated", field="header")
    magic, threshold, channel = _HEAD.unpack_from(blob)
    if magic != COND_MAGIC:
        raise FormatError(f"{source}: bad conditional magic {magic!r}", field="magic")
    pos = _HEAD.size
    members = []
    for name in ("dry", "wet"):
        if pos + 8 > len(blob):
            raise FormatError(f"{source}: truncated before {name} member", field=name)
        (n,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if pos + n > len(blob):
            raise FormatError(f"{source}: {name} member truncated", field=name)
        members.append(decode_checkpoint(blob[pos:pos + n], f"{source}[{name}]"))
        pos += n
    if pos != len(blob):
        raise FormatError(f"{source}: trailing bytes", field="payload")
    try:
        return ConditionalForecaster(threshold, members[0], members[1], channel)
    except (ConfigurationError, ShapeError) as exc:
        raise FormatError(f"{source}: {exc}", field="header") from None


def save_conditional(path, cf):
    with open(path, "wb") as fh:
        fh.write(encode_conditional(cf))


def load_conditional(path):
    with open(path, "rb") as fh:
        return decode_conditional(fh.read(), str(path))
