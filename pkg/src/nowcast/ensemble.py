"""Ensemble weight fitting from streamed Gram statistics.

Member predictions are never stored as a design matrix.  Instead every pixel
contributes ``x x^T`` and ``x y`` (``x`` being the vector of member values at
that pixel) to 64-bit accumulators, and the weights come from small dense
solves:

* ridge:        (A + lam I) w = b
* constrained:  [[A + lam I, -q/2], [q^T, 0]] [w; mu] = [b; 1],  q = ones

with the default ``lam = 1e-4 * mean(diag A)``.  Members with bit-identical
statistics share one unknown, so duplicated models get exactly equal weights.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError, ShapeError, SingularMatrixError, StatisticsError
from .griddata import GridSequence

LAMBDA_SCALE = 1e-4
METHODS = ("equal", "ridge", "constrained")


def solve_dense(M, v, rtol=1e-12):
    """Gaussian elimination with partial pivoting.

    Raises :class:`SingularMatrixError` when a pivot falls below
    ``rtol * max|M|``.
    """
    a = np.array(M, dtype=np.float64)
    x = np.array(v, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"matrix must be square, got {a.shape}")
    n = a.shape[0]
    if x.shape != (n,):
        raise ShapeError(f"right-hand side has shape {x.shape}, expected ({n},)")
    scale = np.abs(a).max() if a.size else 0.0
    tol = rtol * scale
    if scale == 0.0:
        raise SingularMatrixError("matrix is zero")
    for k in range(n):
        piv = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[piv, k]) <= tol:
            raise SingularMatrixError(f"pivot {abs(a[piv, k]):.3e} in column {k} below {tol:.3e}")
        if piv != k:
            a[[k, piv]] = a[[piv, k]]
            x[[k, piv]] = x[[piv, k]]
        factors = a[k + 1:, k] / a[k, k]
        a[k + 1:, k:] -= np.outer(factors, a[k, k:])
        x[k + 1:] -= factors * x[k]
    for k in range(n - 1, -1, -1):
        x[k] = (x[k] - a[k, k + 1:] @ x[k + 1:]) / a[k, k]
    return x


class EnsembleDesign:
    """Running ``X^T X``, ``X^T y`` and pixel count for ``p`` members."""

    def __init__(self, p):
        if p < 1:
            raise ConfigurationError("an ensemble needs at least one member")
        self.p = p
        self.A = np.zeros((p, p))
        self.b = np.zeros(p)
        self.n = 0

    def accumulate(self, member_preds, truth):
        if len(member_preds) != self.p:
            raise ConfigurationError(f"expected {self.p} member predictions, got {len(member_preds)}")
        arrays = [_values(m) for m in member_preds]
        y = _values(truth)
        for a in arrays:
            if a.shape != y.shape:
                raise ShapeError(f"member prediction shape {a.shape} does not match truth {y.shape}")
        if y.size == 0:
            return self
        X = np.stack([a.reshape(-1) for a in arrays]).astype(np.float64)
        self.A += X @ X.T
        self.b += X @ y.reshape(-1).astype(np.float64)
        self.n += y.size
        return self

    def merge(self, other):
        if other.p != self.p:
            raise ConfigurationError("cannot merge designs with different member counts")
        out = EnsembleDesign(self.p)
        out.A = self.A + other.A
        out.b = self.b + other.b
        out.n = self.n + other.n
        return out

    def default_lambda(self, scale=LAMBDA_SCALE):
        return scale * float(np.mean(np.diag(self.A)))


def _values(x):
    return x.frames if isinstance(x, GridSequence) else np.asarray(x)


@dataclass
class WeightVector:
    w: np.ndarray
    method: str
    lam: float = 0.0
    mu: float = None
    names: list = field(default_factory=list)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown ensemble method {self.method!r}")
        if not self.names:
            self.names = [f"member{i}" for i in range(len(self.w))]
        if len(self.names) != len(self.w):
            raise ConfigurationError("one name per weight is required")

    @property
    def p(self):
        return len(self.w)

    @property
    def total(self):
        return float(self.w.sum())


def equal_weights(p, names=None):
    return WeightVector(np.full(p, 1.0 / p), "equal", 0.0, None, list(names or []))


def _resolve_lambda(design, lam):
    if design.n == 0:
        raise StatisticsError("the design has no samples")
    return design.default_lambda() if lam is None else float(lam)


def _groups(design):
    """Members whose Gram rows and targets are bit-identical are exchangeable."""
    A, b = design.A, design.b
    groups = []
    for i in range(design.p):
        for g in groups:
            j = g[0]
            if b[i] == b[j] and np.array_equal(A[i], A[j]) and A[i, i] == A[i, j]:
                g.append(i)
                break
        else:
            groups.append([i])
    return groups


def _reduced_system(design, lam, groups):
    # exchangeable members get one shared unknown, so their weights come out identical
    rows = [g[0] for g in groups]
    R = np.array([[design.A[r, g].sum() for g in groups] for r in rows])
    R += lam * np.eye(len(groups))
    return R, design.b[rows]


def _expand(u, groups, p):
    w = np.empty(p)
    for value, g in zip(u, groups):
        w[g] = value
    return w


def solve_ridge(design, lam=None, names=None):
    """``w = (A + lam I)^-1 b``; ``lam`` defaults to ``1e-4 * mean(diag A)``."""
    lam = _resolve_lambda(design, lam)
    groups = _groups(design)
    R, rhs = _reduced_system(design, lam, groups)
    w = _expand(solve_dense(R, rhs), groups, design.p)
    return WeightVector(w, "ridge", lam, None, list(names or []))


def solve_constrained(design, lam=None, names=None):
    """Minimum-MSE weights subject to ``sum(w) = 1``, via the bordered Lagrange system."""
    lam = _resolve_lambda(design, lam)
    groups = _groups(design)
    R, rhs = _reduced_system(design, lam, groups)
    k = len(groups)
    M = np.zeros((k + 1, k + 1))
    M[:k, :k] = R
    M[:k, k] = -0.5
    M[k, :k] = [len(g) for g in groups]
    sol = solve_dense(M, np.append(rhs, 1.0))
    w = _expand(sol[:k], groups, design.p)
    return WeightVector(w, "constrained", lam, float(sol[k]), list(names or []))


def fit_weights(design, method, lam=None, names=None):
    if method == "equal":
        return equal_weights(design.p, names)
    if method == "ridge":
        return solve_ridge(design, lam, names)
    if method == "constrained":
        return solve_constrained(design, lam, names)
    raise ConfigurationError(f"unknown ensemble method {method!r}")


def combine(arrays, weights):
    """Pixelwise weighted sum clipped to ``[0, 1]``."""
    w = weights.w if isinstance(weights, WeightVector) else np.asarray(weights, dtype=np.float64)
    if len(arrays) != len(w):
        raise ConfigurationError(f"{len(arrays)} members but {len(w)} weights")
    total = np.zeros(np.shape(arrays[0]), dtype=np.float64)
    for wi, a in zip(w, arrays):
        if np.shape(a) != total.shape:
            raise ShapeError("member predictions differ in shape")
        total += wi * np.asarray(a, dtype=np.float64)
    return np.clip(total, 0.0, 1.0).astype(np.float32)


def ensemble_predict(members, weights, seq=None):
    """Weighted prediction from live models (given ``seq``) or precomputed :class:`GridSequence` s."""
    if len(members) != weights.p:
        raise ConfigurationError(f"{len(members)} members but {weights.p} weights")
    preds = [m if isinstance(m, GridSequence) else m.predict(seq) for m in members]
    ref = preds[0]
    for pr in preds[1:]:
        if pr.variable_names != ref.variable_names:
            raise ShapeError("ensemble members predict different variables")
    return ref.replace_frames(combine([pr.frames for pr in preds], weights))


class WeightedEnsemble:
    """Live-model ensemble exposing the ``predict`` / ``predict_batch`` interface."""

    def __init__(self, members, weights):
        if len(members) != weights.p:
            raise ConfigurationError(f"{len(members)} members but {weights.p} weights")
        self.members = list(members)
        self.weights = weights

    @property
    def targets(self):
        return self.members[0].targets

    def predict(self, seq):
        return ensemble_predict(self.members, self.weights, seq)

    def predict_batch(self, x):
        return combine([m.predict_batch(x) for m in self.members], self.weights)


# weights files -------------------------------------------------------------------


def format_weights(wv):
    lines = [f"{name} {weight!r}" for name, weight in zip(wv.names, wv.w.tolist())]
    lines.append(f"lambda {wv.lam!r}")
    lines.append(f"method {wv.method}")
    lines.append(f"sum {wv.total!r}")
    if wv.mu is not None:
        lines.append(f"mu {wv.mu!r}")
    return "\n".join(lines) + "\n"


def write_weights(path, wv):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_weights(wv))


def parse_weights(text, source="<text>"):
    names, weights, trailer = [], [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.rsplit(None, 1)
        if len(parts) != 2:
            raise FormatError(f"{source}:{lineno}: expected '<name> <value>'", field="line")
        key, value = parts
        if key in ("lambda", "method", "sum", "mu"):
            trailer[key] = value
            continue
        try:
            weights.append(float(value))
        except ValueError:
            raise FormatError(f"{source}:{lineno}: bad weight {value!r}", field=key) from None
        names.append(key)
    if not weights or "method" not in trailer:
        raise FormatError(f"{source}: missing weights or method line", field="method")
    try:
        return WeightVector(
            np.array(weights),
            trailer["method"],
            float(trailer.get("lambda", 0.0)),
            float(trailer["mu"]) if "mu" in trailer else None,
            names,
        )
    except (ConfigurationError, ValueError) as exc:
        raise FormatError(f"{source}: {exc}", field="trailer") from None


def read_weights(path):
    with open(path, encoding="utf-8") as fh:
        return parse_weights(fh.read(), str(path))
