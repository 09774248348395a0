"""Per-variable MSE, evaluation reports, comparison tables and PGM prediction strips."""

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError, StatisticsError
from .griddata import GridSequence
from .kvconfig import parse_kv


def _arr(x):
    return x.frames if isinstance(x, GridSequence) else np.asarray(x)


def mse(pred, truth, channel=None):
    p, t = _arr(pred), _arr(truth)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} does not match truth {t.shape}")
    if channel is not None:
        if isinstance(channel, str):
            channel = truth.channel_index(channel) if isinstance(truth, GridSequence) else None
            if channel is None:
                raise ShapeError("channel names need GridSequence arguments")
        p, t = p[..., channel], t[..., channel]
    diff = p.astype(np.float64) - t.astype(np.float64)
    return float(np.mean(diff * diff))


def sharpness_by_lead_time(pred):
    """Mean spatial-gradient magnitude per lead time of ``N x T x H x W x C`` predictions.

    Central differences inside the grid, one-sided at the edges; the mean runs
    over samples, pixels and channels.  Falling values mean blurrier frames.
    """
    p = np.asarray(_arr(pred), dtype=np.float64)
    if p.ndim == 4:
        p = p[None]
    if p.ndim != 5 or min(p.shape[2:4]) < 2:
        raise ShapeError(f"need N x T x H x W x C predictions with H, W >= 2, got {p.shape}")
    gy, gx = np.gradient(p, axis=(2, 3))
    return np.hypot(gy, gx).mean(axis=(0, 2, 3, 4))


@dataclass
class MetricsReport:
    name: str
    per_variable: dict = field(default_factory=dict)
    n_samples: int = 0

    @property
    def aggregate(self):
        # unweighted mean over variables; not a leaderboard score
        if not self.per_variable:
            return float("nan")
        return float(np.mean(list(self.per_variable.values())))


def evaluate(model, dataset, split="validation", name=None, batch_size=16):
    """Per-variable MSE of ``model`` over every sample of ``split``.

    ``model`` needs ``predict_batch`` (``N x T_in x H x W x C`` in,
    ``N x T_out x H x W x C_out`` out) and ``targets`` naming its output
    channels.
    """
    samples = dataset.split(split)
    if not samples:
        raise StatisticsError(f"split {split!r} is empty")
    targets = tuple(model.targets)
    idx = [samples[0].target.channel_index(t) for t in targets]
    sums = np.zeros(len(targets))
    count = 0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        x = np.stack([s.input.frames for s in chunk])
        y = np.stack([s.target.frames for s in chunk])[..., idx].astype(np.float64)
        pred = np.asarray(model.predict_batch(x), dtype=np.float64)
        if pred.shape != y.shape:
            raise ShapeError(f"model output {pred.shape} does not match targets {y.shape}")
        sums += ((pred - y) ** 2).reshape(-1, len(targets)).sum(axis=0)
        count += y[..., 0].size
    per = {t: float(s / count) for t, s in zip(targets, sums)}
    return MetricsReport(name or type(model).__name__, per, len(samples))


def evaluate_predictions(preds, dataset, split="validation", name="predictions"):
    """Like :func:`evaluate`, for precomputed prediction sequences in split order."""
    samples = dataset.split(split)
    if not samples:
        raise StatisticsError(f"split {split!r} is empty")
    if len(preds) != len(samples):
        raise ShapeError(f"{len(preds)} predictions for {len(samples)} samples")
    targets = preds[0].variable_names
    idx = [samples[0].target.channel_index(t) for t in targets]
    sums = np.zeros(len(targets))
    count = 0
    for pred, s in zip(preds, samples):
        y = s.target.frames[..., idx].astype(np.float64)
        p = pred.frames.astype(np.float64)
        if p.shape != y.shape:
            raise ShapeError(f"prediction {p.shape} does not match target {y.shape}")
        sums += ((p - y) ** 2).reshape(-1, len(targets)).sum(axis=0)
        count += y[..., 0].size
    return MetricsReport(name, {t: float(v / count) for t, v in zip(targets, sums)}, len(samples))


def compare_table(reports):
    """Aligned text table, one row per report sorted by name; ``*`` marks each column minimum."""
    reports = sorted(reports, key=lambda r: r.name)
    variables = []
    for r in reports:
        for v in r.per_variable:
            if v not in variables:
                variables.append(v)
    columns = variables + ["aggregate"]
    values = [[r.per_variable.get(v) for v in variables] + [r.aggregate] for r in reports]
    best = []
    for j in range(len(columns)):
        present = [row[j] for row in values if row[j] is not None]
        best.append(min(present) if present else None)
    cells = [["model"] + columns]
    for r, row in zip(reports, values):
        line = [r.name]
        for j, v in enumerate(row):
            if v is None:
                line.append("-")
            else:
                line.append(f"{v:.6g}" + ("*" if v == best[j] else " "))
        cells.append(line)
    widths = [max(len(row[j]) for row in cells) for j in range(len(cells[0]))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if j == 0 else c.rjust(w) for j, (c, w) in enumerate(zip(row, widths))).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_report(report):
    lines = [f"model = {report.name}", f"samples = {report.n_samples}"]
    lines += [f"{v}.mse = {m!r}" for v, m in report.per_variable.items()]
    lines.append(f"aggregate = {report.aggregate!r}")
    return "\n".join(lines) + "\n"


def parse_report(text, source="<text>"):
    kv = parse_kv(text, source)
    per = {k[:-4]: float(v) for k, v in kv.items() if k.endswith(".mse")}
    if not per:
        raise FormatError(f"{source}: no '<variable>.mse' entries", field="mse")
    return MetricsReport(kv.get("model", "model"), per, int(kv.get("samples", 0)))


def write_report(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_report(report))


# rendering -------------------------------------------------------------------------


def to_gray(values):
    """Map ``[0, 1]`` to 8-bit gray, rounding half up (0.5 -> 128)."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, image):
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM", field="magic")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported", field="maxval")
    pixels = np.frombuffer(parts[4][: w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise FormatError(f"{path}: truncated pixel data", field="payload")
    return pixels.reshape(h, w)


# edges of a cell: 0 top, 1 right, 2 bottom, 3 left; corners tl, tr, br, bl
_SEGMENTS = {
    1: [(3, 2)], 2: [(2, 1)], 3: [(3, 1)], 4: [(0, 1)], 5: [(3, 0), (2, 1)],
    6: [(0, 2)], 7: [(3, 0)], 8: [(3, 0)], 9: [(0, 2)], 10: [(3, 2), (0, 1)],
    11: [(0, 1)], 12: [(3, 1)], 13: [(2, 1)], 14: [(3, 2)],
}


def _crossing(a, b, level):
    return 0.5 if a == b else (level - a) / (b - a)


def contour_segments(field2d, level=0.5):
    """Marching-squares iso-line segments as ``((y0, x0), (y1, x1))`` in pixel-centre coordinates."""
    f = np.asarray(field2d, dtype=np.float64)
    segments = []
    h, w = f.shape
    for i in range(h - 1):
        for j in range(w - 1):
            tl, tr, br, bl = f[i, j], f[i, j + 1], f[i + 1, j + 1], f[i + 1, j]
            case = (tl >= level) * 8 + (tr >= level) * 4 + (br >= level) * 2 + (bl >= level)
            if case in (0, 15):
                continue
            pts = {
                0: (i, j + _crossing(tl, tr, level)),
                1: (i + _crossing(tr, br, level), j + 1),
                2: (i + 1, j + _crossing(bl, br, level)),
                3: (i + _crossing(tl, bl, level), j),
            }
            pairs = _SEGMENTS[case]
            if case in (5, 10):
                centre = (tl + tr + br + bl) / 4.0
                # saddle: the defaults join the above-level corners through the centre
                if centre < level:
                    pairs = [(3, 2), (0, 1)] if case == 5 else [(3, 0), (2, 1)]
            segments.extend((pts[a], pts[b]) for a, b in pairs)
    return segments


def rasterize_segments(segments, shape, scale=1):
    """Boolean mask of pixels touched by the segments on a ``scale``-times upsampled grid."""
    mask = np.zeros(shape, dtype=bool)
    for (y0, x0), (y1, x1) in segments:
        y0, x0, y1, x1 = ((c + 0.5) * scale - 0.5 for c in (y0, x0, y1, x1))
        n = int(np.ceil(max(abs(y1 - y0), abs(x1 - x0)))) + 1
        ys = np.rint(np.linspace(y0, y1, n)).astype(int)
        xs = np.rint(np.linspace(x0, x1, n)).astype(int)
        ok = (ys >= 0) & (ys < shape[0]) & (xs >= 0) & (xs < shape[1])
        mask[ys[ok], xs[ok]] = True
    return mask


def strip_layout(t_in, t_out, h, w, separator=1, scale=1):
    """Image ``(height, width)``: two rows of ``t_in + t_out`` panels with separators between them."""
    cols = t_in + t_out
    return 2 * h * scale + separator, cols * w * scale + (cols - 1) * separator


def render_strip(inp, truth, pred, path=None, channel=0, contour_channel=None, contour_level=0.5,
                 separator=1, scale=1, separator_value=255):
    """Two-row grayscale strip: past frames followed by truth (top) and prediction (bottom)."""
    frames_in, frames_truth, frames_pred = _arr(inp), _arr(truth), _arr(pred)
    if frames_truth.shape != frames_pred.shape or frames_in.shape[1:] != frames_truth.shape[1:]:
        raise ShapeError("input, truth and prediction shapes are inconsistent")
    t_in, h, w, _ = frames_in.shape
    t_out = frames_truth.shape[0]
    H, W = strip_layout(t_in, t_out, h, w, separator, scale)
    image = np.full((H, W), separator_value, dtype=np.uint8)
    rows = [list(frames_in) + list(frames_truth), list(frames_in) + list(frames_pred)]
    for r, row in enumerate(rows):
        for c, frame in enumerate(row):
            panel = to_gray(frame[..., channel])
            if scale > 1:
                panel = np.repeat(np.repeat(panel, scale, axis=0), scale, axis=1)
            if contour_channel is not None:
                segs = contour_segments(frame[..., contour_channel], contour_level)
                panel = panel.copy()
                panel[rasterize_segments(segs, panel.shape, scale)] = 255
            y0 = r * (h * scale + separator)
            x0 = c * (w * scale + separator)
            image[y0:y0 + h * scale, x0:x0 + w * scale] = panel
    if path is not None:
        write_pgm(path, image)
    return image
