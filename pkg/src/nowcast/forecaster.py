"""Multiscale ConvGRU encoder-forecaster.

Encoder, per level ``l``: 3x3 embedding conv with a leaky rectifier, a ConvGRU
run over the input frames, then 2x mean pooling of every state to feed level
``l + 1``.  Forecaster, per step and from the deepest level upwards: a ConvGRU
started from the encoder's final state at that level, whose input is the
encoder state (skip connection) concatenated with the upsampled state of the
level below it.  A 1x1 conv and a logistic squash produce each output frame.
"""

import io
import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from . import nn
from .errors import ConfigurationError, FormatError, NumericError, ShapeError
from .griddata import GridSequence, transform_array
from .kvconfig import check_keys, format_kv, parse_kv, to_bool, to_list

GATE_TYPES = ("conv", "residual")
DEEP_CHANNELS = (32, 48, 64, 80)

CKPT_MAGIC = b"FCK1"


@dataclass(frozen=True)
class ForecasterSpec:
    levels: int = 3
    channels: tuple = DEEP_CHANNELS[:3]
    gate_type: str = "residual"
    t_in: int = 4
    t_out: int = 8
    height: int = 32
    width: int = 32
    inputs: tuple = ("temperature", "crr_intensity")
    targets: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "targets", tuple(self.targets) or tuple(self.inputs))
        if self.levels < 2:
            raise ConfigurationError(f"levels must be at least 2, got {self.levels}")
        if len(self.channels) != self.levels:
            raise ConfigurationError(f"{len(self.channels)} channel counts for {self.levels} levels")
        if min(self.channels) < 1:
            raise ConfigurationError("channel counts must be positive")
        if self.gate_type not in GATE_TYPES:
            raise ConfigurationError(f"gate_type must be one of {GATE_TYPES}, got {self.gate_type!r}")
        if self.t_in < 1 or self.t_out < 1:
            raise ConfigurationError("t_in and t_out must be positive")
        if not self.inputs:
            raise ConfigurationError("at least one input variable is required")
        missing = [t for t in self.targets if t not in self.inputs]
        if missing:
            raise ConfigurationError(f"targets not among inputs: {', '.join(missing)}")
        if self.height < 1 or self.width < 1:
            raise ConfigurationError("height and width must be positive")

    @property
    def in_channels(self):
        return len(self.inputs)

    @property
    def out_channels(self):
        return len(self.targets)

    @property
    def target_indices(self):
        return [self.inputs.index(t) for t in self.targets]

    def check_grid(self, h=None, w=None):
        h = self.height if h is None else h
        w = self.width if w is None else w
        f = 2 ** (self.levels - 1)
        if h % f or w % f:
            raise ShapeError(f"grid {h}x{w} is not divisible by 2^(levels-1) = {f}")

    def shallow(self):
        """The same model with its deepest level removed."""
        return replace(self, levels=self.levels - 1, channels=self.channels[:-1])

    def to_mapping(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_mapping(cls, m):
        check_keys(m, [f.name for f in fields(cls)], "model spec")
        kw = dict(m)
        for k in ("levels", "t_in", "t_out", "height", "width"):
            if k in kw:
                kw[k] = int(kw[k])
        if "channels" in kw:
            kw["channels"] = tuple(to_list(kw["channels"], int))
        for k in ("inputs", "targets"):
            if k in kw:
                kw[k] = tuple(to_list(kw[k]))
        return cls(**kw)


def deep_spec(**kw):
    kw.setdefault("channels", DEEP_CHANNELS)
    kw.setdefault("levels", len(kw["channels"]))
    return ForecasterSpec(**kw)


def shallow_spec(**kw):
    return deep_spec(**kw).shallow()


class Forecaster:
    def __init__(self, spec, params):
        self.spec = spec
        self.params = params
        self._rescope()

    def _rescope(self):
        L = self.spec.levels
        prefixes = [f"enc{l}.embed" for l in range(L)] + [f"enc{l}.gru" for l in range(L)]
        prefixes += [f"dec{l}.gru" for l in range(L)] + ["head"]
        self._p = {pre: self.params.scoped(pre) for pre in prefixes}

    @property
    def targets(self):
        return self.spec.targets

    @property
    def dtype(self):
        return self.params["head.w"].dtype

    def astype(self, dtype):
        return Forecaster(self.spec, self.params.astype(dtype))

    def copy(self):
        return Forecaster(self.spec, self.params.copy())

    def parameter_count(self):
        return self.params.count()

    # forward / backward ------------------------------------------------------

    def forward(self, x):
        """``x``: ``N x T_in x H x W x C_in`` -> outputs ``N x T_out x H x W x C_out`` and a cache."""
        spec = self.spec
        if x.ndim != 5 or x.shape[1] != spec.t_in or x.shape[-1] != spec.in_channels:
            raise ShapeError(
                f"expected input N x {spec.t_in} x H x W x {spec.in_channels}, got {x.shape}"
            )
        spec.check_grid(x.shape[2], x.shape[3])
        x = x.astype(self.dtype, copy=False)
        gt = spec.gate_type
        L = spec.levels
        n = x.shape[0]

        seq = [x[:, t] for t in range(spec.t_in)]
        enc_cache = []
        finals = []
        for l in range(L):
            emb, gru = self._p[f"enc{l}.embed"], self._p[f"enc{l}.gru"]
            h = np.zeros(seq[0].shape[:3] + (spec.channels[l],), dtype=self.dtype)
            states, level_cache = [], []
            for frame in seq:
                a, ce = nn.conv2d_forward(frame, emb["w"], emb["b"])
                h, cg = nn.gru_cell_forward(nn.leaky_relu(a), h, gru, gt)
                states.append(h)
                level_cache.append((ce, a, cg))
            finals.append(h)
            enc_cache.append(level_cache)
            if l < L - 1:
                seq = [nn.downsample2(s) for s in states]

        d = list(finals)
        head = self._p["head"]
        dec_cache = []
        outs = []
        for _ in range(spec.t_out):
            step = [None] * L
            for l in reversed(range(L)):
                if l == L - 1:
                    inp = finals[l]
                else:
                    inp = np.concatenate([nn.upsample2(d[l + 1]), finals[l]], axis=-1)
                d[l], step[l] = nn.gru_cell_forward(inp, d[l], self._p[f"dec{l}.gru"], gt)
            a, ch = nn.conv2d_forward(d[0], head["w"], head["b"])
            y = nn.sigmoid(a)
            outs.append(y)
            dec_cache.append((step, ch, y))
        return np.stack(outs, axis=1), (enc_cache, dec_cache, finals, n)

    def backward(self, dy, cache):
        """Accumulate parameter gradients for upstream gradient ``dy``; returns d(loss)/d(input)."""
        enc_cache, dec_cache, finals, n = cache
        spec = self.spec
        L = spec.levels
        P = self.params
        d_final = [np.zeros_like(h) for h in finals]
        dd = [np.zeros_like(h) for h in finals]

        for t in reversed(range(spec.t_out)):
            step, ch, y = dec_cache[t]
            da = dy[:, t] * y * (1 - y)
            dd0, dw, db = nn.conv2d_backward(da, ch)
            P.grads["head.w"] += dw
            P.grads["head.b"] += db
            dd[0] = dd[0] + dd0
            for l in range(L):
                dinp, dh_prev, g = nn.gru_cell_backward(dd[l], step[l])
                P.accumulate(f"dec{l}.gru", g)
                dd[l] = dh_prev
                if l == L - 1:
                    d_final[l] += dinp
                else:
                    cu = spec.channels[l + 1]
                    dd[l + 1] = dd[l + 1] + nn.upsample2_backward(dinp[..., :cu])
                    d_final[l] += dinp[..., cu:]
        for l in range(L):
            d_final[l] += dd[l]

        d_next = None
        for l in reversed(range(L)):
            dh = d_final[l]
            d_seq = []
            for t in reversed(range(spec.t_in)):
                if d_next is not None:
                    dh = dh + nn.downsample2_backward(d_next[t])
                ce, a, cg = enc_cache[l][t]
                de, dh, g = nn.gru_cell_backward(dh, cg)
                P.accumulate(f"enc{l}.gru", g)
                dx, dw, db = nn.conv2d_backward(nn.leaky_relu_backward(de, a), ce)
                P.grads[f"enc{l}.embed.w"] += dw
                P.grads[f"enc{l}.embed.b"] += db
                d_seq.append(dx)
            d_next = d_seq[::-1]
        return np.stack(d_next, axis=1)

    def loss_and_grad(self, x, y_true):
        """MSE over all output pixels; gradients are written into ``params.grads``."""
        y, cache = self.forward(x)
        target = y_true[..., self.spec.target_indices].astype(self.dtype, copy=False)
        if target.shape != y.shape:
            raise ShapeError(f"targets {y_true.shape} do not match outputs {y.shape}")
        diff = y - target
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss {loss}")
        self.params.zero_grad()
        self.backward(diff * (2.0 / diff.size), cache)
        return loss

    # prediction -----------------------------------------------------------------

    def predict_batch(self, x):
        y, _ = self.forward(np.asarray(x))
        return y.astype(np.float32)

    def predict(self, seq):
        spec = self.spec
        if len(seq) != spec.t_in:
            raise ShapeError(f"input has {len(seq)} frames, model expects {spec.t_in}")
        if seq.variable_names != spec.inputs:
            raise ShapeError(f"input variables {seq.variable_names} do not match model inputs {spec.inputs}")
        y = self.predict_batch(seq.frames[None])[0]
        return GridSequence(y, spec.targets, seq.step_minutes)


def build(spec, seed=0, dtype=np.float32):
    """Construct a forecaster with seeded fan-in scaled initialization."""
    spec.check_grid()
    rng = np.random.default_rng(seed)
    store = nn.ParameterStore()
    L = spec.levels
    for l in range(L):
        cin = spec.in_channels if l == 0 else spec.channels[l - 1]
        w, b = nn.init_conv(rng, 3, cin, spec.channels[l], dtype)
        store.add(f"enc{l}.embed.w", w)
        store.add(f"enc{l}.embed.b", b)
        for k, v in nn.init_gru(rng, spec.channels[l], spec.channels[l], spec.gate_type, dtype).items():
            store.add(f"enc{l}.gru.{k}", v)
    for l in range(L):
        cin = spec.channels[l] + (spec.channels[l + 1] if l < L - 1 else 0)
        for k, v in nn.init_gru(rng, cin, spec.channels[l], spec.gate_type, dtype).items():
            store.add(f"dec{l}.gru.{k}", v)
    w, b = nn.init_conv(rng, 1, spec.channels[0], spec.out_channels, dtype)
    store.add("head.w", w)
    store.add("head.b", b)
    return Forecaster(spec, store)


def parameter_count(model):
    """Total scalar parameters of a model or a bare :class:`ParameterStore`."""
    if isinstance(model, nn.ParameterStore):
        return model.count()
    return model.parameter_count()


def persistence_baseline(seq, t_out):
    """Repeat the last input frame ``t_out`` times."""
    if len(seq) < 1:
        raise ShapeError("persistence needs at least one input frame")
    frames = np.repeat(seq.frames[-1:], t_out, axis=0)
    return seq.replace_frames(frames)


class PersistenceModel:
    """Persistence wrapped in the ``predict`` interface used by evaluation."""

    def __init__(self, t_out, targets=None, inputs=None):
        self.t_out = t_out
        self.targets = tuple(targets) if targets else None
        self.inputs = tuple(inputs) if inputs else self.targets

    def predict_batch(self, x):
        """Repeat the last input frame; output channels follow ``targets`` looked up in ``inputs``."""
        x = np.asarray(x)
        out = np.repeat(x[:, -1:], self.t_out, axis=1)
        if self.targets is None or self.targets == self.inputs:
            return out
        if self.inputs is None:
            raise ConfigurationError("batch persistence with selected targets needs the input names")
        return out[..., [self.inputs.index(t) for t in self.targets]]

    def predict(self, seq):
        out = persistence_baseline(seq, self.t_out)
        if self.targets is None:
            return out
        idx = [seq.channel_index(t) for t in self.targets]
        return GridSequence(out.frames[..., idx], self.targets, seq.step_minutes)


# training ---------------------------------------------------------------------------


def stack_batch(batch):
    if not batch:
        raise ConfigurationError("empty batch")
    shape = (batch[0].input.shape, batch[0].target.shape)
    for s in batch:
        if (s.input.shape, s.target.shape) != shape:
            raise ShapeError("batch samples must share shapes")
    return np.stack([s.input.frames for s in batch]), np.stack([s.target.frames for s in batch])


def clip_by_norm(grads, cap):
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if cap and total > cap:
        scale = cap / total
        for g in grads.values():
            g *= scale
    return total


def train_step(model, batch, optimizer, clip=None):
    """One optimizer step on a batch of samples (or an ``(x, y)`` array pair); returns the pre-step loss."""
    x, y = stack_batch(batch) if isinstance(batch, list) else batch
    loss = model.loss_and_grad(x, y)
    if clip:
        clip_by_norm(model.params.grads, clip)
    optimizer.step(model.params.values, model.params.grads)
    return loss


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    augment: bool = False
    seed: int = 0
    clip: float = 0.0
    lr_schedule: str = "constant"
    patience: int = 3

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_schedule not in ("constant", "plateau"):
            raise ConfigurationError(f"lr_schedule must be constant or plateau, got {self.lr_schedule!r}")
        if self.clip < 0 or self.patience < 1:
            raise ConfigurationError("clip must be >= 0 and patience >= 1")

    @classmethod
    def from_mapping(cls, m):
        check_keys(m, [f.name for f in fields(cls)], "train config")
        kw = {}
        for f in fields(cls):
            if f.name in m:
                raw = m[f.name]
                if f.name == "augment":
                    kw[f.name] = to_bool(raw, "train.augment")
                elif f.name == "lr_schedule":
                    kw[f.name] = raw
                elif isinstance(f.default, float):
                    kw[f.name] = float(raw)
                else:
                    kw[f.name] = int(raw)
        return cls(**kw)


def validation_mse(model, x, y, batch_size=16):
    """Pooled MSE over all target pixels, accumulated in float64."""
    idx = model.spec.target_indices
    total = 0.0
    count = 0
    for i in range(0, len(x), batch_size):
        pred = model.predict_batch(x[i:i + batch_size]).astype(np.float64)
        diff = pred - y[i:i + batch_size][..., idx]
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


def fit(model, train, optimizer, cfg, validation=None, log=None):
    """Train on ``(x, y)`` arrays for ``cfg.epochs`` epochs; returns the per-epoch log."""
    x, y = train
    if len(x) == 0:
        raise ConfigurationError("no training samples")
    rng = np.random.default_rng(cfg.seed)
    square = x.shape[2] == x.shape[3]
    transforms = ["identity", "mirror_h", "mirror_v", "rot180"] + (["rot90", "rot270"] if square else [])
    history = [] if log is None else log
    best, stale = np.inf, 0
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            sel = order[i:i + cfg.batch_size]
            bx, by = x[sel], y[sel]
            if cfg.augment:
                tf = transforms[rng.integers(len(transforms))]
                bx, by = transform_array(bx, tf), transform_array(by, tf)
            losses.append(train_step(model, (bx, by), optimizer, cfg.clip or None))
            step += 1
        entry = {"epoch": epoch + 1, "step": step, "lr": optimizer.lr, "train_loss": float(np.mean(losses))}
        if validation is not None:
            entry["val_mse"] = validation_mse(model, *validation)
            if cfg.lr_schedule == "plateau":
                if entry["val_mse"] < best:
                    best, stale = entry["val_mse"], 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        optimizer.lr = optimizer.lr * 0.5
                        stale = 0
        history.append(entry)
    return history


# checkpoints ---------------------------------------------------------------------------


def encode_checkpoint(model):
    buf = io.BytesIO()
    header = format_kv(model.spec.to_mapping()).encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    names = model.params.names()
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        value = model.params[name]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_checkpoint(blob, source="<bytes>"):
    view = memoryview(blob)
    pos = 0

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(view):
            raise FormatError(f"{source}: truncated while reading {what}", field=what)
        out = view[pos:pos + nbytes]
        pos += nbytes
        return out

    if bytes(take(4, "magic")) != CKPT_MAGIC:
        raise FormatError(f"{source}: bad checkpoint magic", field="magic")
    (hlen,) = struct.unpack("<I", take(4, "header length"))
    try:
        spec = ForecasterSpec.from_mapping(parse_kv(bytes(take(hlen, "header")).decode("utf-8"), source))
    except (ConfigurationError, ValueError) as exc:
        raise FormatError(f"{source}: bad spec header: {exc}", field="header") from None
    (count,) = struct.unpack("<I", take(4, "parameter count"))
    store = nn.ParameterStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(nlen, "name")).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, f"{name} ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} shape"))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(4 * size, f"{name} data"), dtype="<f4").reshape(shape)
        store.add(name, data.astype(np.float32))
    if pos != len(view):
        raise FormatError(f"{source}: {len(view) - pos} trailing bytes", field="payload")
    reference = build(spec, 0)
    if reference.params.names() != store.names() or any(
        reference.params[k].shape != store[k].shape for k in store
    ):
        raise FormatError(f"{source}: parameters do not match the spec header", field="parameters")
    return Forecaster(spec, store)


def save_checkpoint(path, model):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), source=str(path))
