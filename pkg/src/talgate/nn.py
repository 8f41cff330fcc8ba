"""Dense numeric kernels with hand-written reverse-mode gradients.

Every tensor in this module is a 2-D float64 numpy array ("matrix",
row-major).  Layers cache the input of their most recent forward call;
``backward(dout)`` consumes that cache, accumulates parameter gradients in
place and returns the gradient with respect to the layer input.  Layers are
single-threaded by contract: never run forward/backward concurrently on the
same object.

Loss helpers come in pairs (value function + derivative function) so the
training loop can assemble exact gradients without a tape.
"""

from __future__ import annotations

import math

import numpy as np

PROB_EPS = 1e-7  # probability clamp for the binary losses

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return np.ascontiguousarray(m)


def check_finite(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


class Rng:
    """Seeded, portable pseudo-random generator (SplitMix64).

    The 64-bit integer state advances by the fixed update rule

        state_n = (seed + n * 0x9E3779B97F4A7C15) mod 2**64,   n = 1, 2, ...

    and every draw mixes the state into an output word:

        z = state
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9   mod 2**64
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB   mod 2**64
        word = z ^ (z >> 31)

    ``uniform`` maps the top 53 bits of one word onto [0, 1).  Normal draws
    use Box-Muller on pairs of words; a block of m normals consumes
    2 * ceil(m / 2) words (u1 block first, then u2 block), so the stream
    position depends only on the sequence of draw sizes.  Identical seeds
    give identical sequences on every platform.
    """

    __slots__ = ("_seed", "_counter")

    def __init__(self, seed: int):
        self._seed = int(seed) & _MASK64
        self._counter = 0

    def _words(self, n: int) -> np.ndarray:
        start = self._counter
        self._counter = start + n
        idx = np.arange(start + 1, start + n + 1, dtype=np.uint64)
        z = np.uint64(self._seed) + idx * np.uint64(_GOLDEN)  # wraps mod 2**64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def next_u64(self) -> int:
        return int(self._words(1)[0])

    def uniform(self) -> float:
        """One float in [0, 1) with 53 random mantissa bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n), unbiased via rejection sampling."""
        if n <= 0:
            raise ValueError(f"randint needs a positive bound, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            w = self.next_u64()
            if w < limit:
                return w % n

    def _normal_block(self, n: int, sigma: float) -> np.ndarray:
        pairs = (n + 1) // 2
        words = self._words(2 * pairs)
        # u1 in (0, 1] keeps log() finite; u2 in [0, 1)
        u1 = ((words[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (words[pairs:] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return sigma * out[:n]

    def normal(self, sigma: float = 1.0) -> float:
        return float(self._normal_block(1, sigma)[0])

    def normal_matrix(self, rows: int, cols: int, sigma: float = 1.0) -> np.ndarray:
        return self._normal_block(rows * cols, sigma).reshape(rows, cols)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def derangement(self, n: int) -> list[int]:
        """A permutation of range(n) without fixed points, by rejection."""
        if n < 2:
            raise ValueError(f"derangement needs n >= 2, got {n}")
        while True:
            perm = list(range(n))
            self.shuffle(perm)
            if all(p != i for i, p in enumerate(perm)):
                return perm


class Param:
    """A trainable matrix together with its gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = as_matrix(value, "param")
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class Linear:
    """y = x @ w + b with gradient accumulation on backward."""

    def __init__(self, din: int, dout: int, rng: Rng | None = None, w_scale: float | None = None):
        scale = math.sqrt(2.0 / din) if w_scale is None else w_scale
        w0 = rng.normal_matrix(din, dout, scale) if rng is not None else np.zeros((din, dout))
        self.w = Param(w0)
        self.b = Param(np.zeros((1, dout)))
        self._x: np.ndarray | None = None

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x, "linear input")
        din = self.w.shape[0]
        if x.shape[1] != din:
            raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {self.w.shape}")
        self._x = x
        return x @ self.w.value + self.b.value

    def backward(self, dout) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("linear backward before forward")
        dout = as_matrix(dout, "linear dout")
        x = self._x
        if dout.shape != (x.shape[0], self.w.shape[1]):
            raise ShapeError(f"linear: dout shape {dout.shape} does not match output shape {(x.shape[0], self.w.shape[1])}")
        self.w.grad += x.T @ dout
        self.b.grad += dout.sum(axis=0, keepdims=True)
        return dout @ self.w.value.T

    def params(self) -> list[tuple[str, Param]]:
        return [("w", self.w), ("b", self.b)]


class Conv1d:
    """Temporal cross-correlation with 'same' zero padding.

    The kernel width must be odd.  Weights are stored as one
    (k * din) x dout matrix; the tap-t slice is rows [t*din, (t+1)*din).
    Input and output are both frame-major: (L, din) -> (L, dout).
    """

    def __init__(self, k: int, din: int, dout: int, rng: Rng | None = None, w_scale: float | None = None):
        if k % 2 == 0 or k < 1:
            raise ValueError(f"conv1d kernel width must be odd and positive, got {k}")
        scale = math.sqrt(2.0 / (k * din)) if w_scale is None else w_scale
        w0 = rng.normal_matrix(k * din, dout, scale) if rng is not None else np.zeros((k * din, dout))
        self.k = k
        self.din = din
        self.w = Param(w0)
        self.b = Param(np.zeros((1, dout)))
        self._xp: np.ndarray | None = None

    def forward(self, x) -> np.ndarray:
        x = as_matrix(x, "conv1d input")
        if x.shape[1] != self.din:
            raise ShapeError(f"conv1d: input shape {x.shape} does not match channel count {self.din}")
        L = x.shape[0]
        pad = (self.k - 1) // 2
        xp = np.zeros((L + 2 * pad, self.din))
        xp[pad:pad + L] = x
        self._xp = xp
        y = np.repeat(self.b.value, L, axis=0)
        for t in range(self.k):
            wt = self.w.value[t * self.din:(t + 1) * self.din]
            y += xp[t:t + L] @ wt
        return y

    def backward(self, dout) -> np.ndarray:
        if self._xp is None:
            raise RuntimeError("conv1d backward before forward")
        dout = as_matrix(dout, "conv1d dout")
        pad = (self.k - 1) // 2
        L = self._xp.shape[0] - 2 * pad
        if dout.shape != (L, self.w.shape[1]):
            raise ShapeError(f"conv1d: dout shape {dout.shape} does not match output shape {(L, self.w.shape[1])}")
        self.b.grad += dout.sum(axis=0, keepdims=True)
        dxp = np.zeros_like(self._xp)
        for t in range(self.k):
            rows = slice(t * self.din, (t + 1) * self.din)
            self.w.grad[rows] += self._xp[t:t + L].T @ dout
            dxp[t:t + L] += dout @ self.w.value[rows].T
        return dxp[pad:pad + L]

    def params(self) -> list[tuple[str, Param]]:
        return [("w", self.w), ("b", self.b)]


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_grad(x) -> np.ndarray:
    # subgradient at 0 is 0
    return (np.asarray(x, dtype=np.float64) > 0.0).astype(np.float64)


def sigmoid(x) -> np.ndarray:
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad_from_output(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y * (1.0 - y)


def focal_loss(p, y, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """Elementwise focal loss on probabilities clamped to [eps, 1 - eps].

    y = 1: -alpha * (1 - p)**gamma * log(p)
    y = 0: -(1 - alpha) * p**gamma * log(1 - p)
    """
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p**gamma * np.log(1.0 - p)
    return np.where(y > 0.5, pos, neg)


def focal_loss_grad(p, y, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """d focal / d p.  Zero where the probability clamp is active."""
    p_raw = np.asarray(p, dtype=np.float64)
    inside = (p_raw > PROB_EPS) & (p_raw < 1.0 - PROB_EPS)
    p = np.clip(p_raw, PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    dpos = alpha * (gamma * (1.0 - p) ** (gamma - 1.0) * np.log(p) - (1.0 - p) ** gamma / p)
    dneg = -(1.0 - alpha) * (gamma * p ** (gamma - 1.0) * np.log(1.0 - p) - p**gamma / (1.0 - p))
    return np.where(y > 0.5, dpos, dneg) * inside


def _diou_parts(ps, pe, gs, ge):
    """Vectorized DIoU loss and its derivatives w.r.t. the predicted ends.

    loss = 1 - IoU + (center distance)**2 / (enclosing length)**2.
    All inputs are same-shape arrays of non-degenerate intervals.
    Min/max switches use strict inequalities, matching the relu convention
    of subgradient 0 at the kink.
    """
    ps, pe = np.asarray(ps, float), np.asarray(pe, float)
    gs, ge = np.asarray(gs, float), np.asarray(ge, float)
    inter = np.maximum(np.minimum(pe, ge) - np.maximum(ps, gs), 0.0)
    union = (pe - ps) + (ge - gs) - inter
    iou = inter / union
    d = (ps + pe) / 2.0 - (gs + ge) / 2.0
    enc = np.maximum(pe, ge) - np.minimum(ps, gs)
    loss = 1.0 - iou + d * d / (enc * enc)

    open_inter = inter > 0.0
    dinter_dps = np.where(open_inter & (ps > gs), -1.0, 0.0)
    dinter_dpe = np.where(open_inter & (pe < ge), 1.0, 0.0)
    dunion_dps = -1.0 - dinter_dps
    dunion_dpe = 1.0 - dinter_dpe
    diou_dps = (dinter_dps * union - inter * dunion_dps) / (union * union)
    diou_dpe = (dinter_dpe * union - inter * dunion_dpe) / (union * union)
    denc_dps = np.where(ps < gs, -1.0, 0.0)
    denc_dpe = np.where(pe > ge, 1.0, 0.0)
    # d(d^2/enc^2) with d(d)/dps = d(d)/dpe = 1/2
    dpen_dps = d / (enc * enc) - 2.0 * d * d * denc_dps / enc**3
    dpen_dpe = d / (enc * enc) - 2.0 * d * d * denc_dpe / enc**3
    return loss, -diou_dps + dpen_dps, -diou_dpe + dpen_dpe


def _check_interval(iv, name: str) -> tuple[float, float]:
    s, e = float(iv[0]), float(iv[1])
    if not (s < e):
        raise ValueError(f"{name} interval ({s}, {e}) is degenerate")
    return s, e


def diou_loss_1d(pred, gt) -> float:
    """Distance-IoU loss for a pair of 1-D intervals; value in [0, 2)."""
    ps, pe = _check_interval(pred, "pred")
    gs, ge = _check_interval(gt, "gt")
    loss, _, _ = _diou_parts(ps, pe, gs, ge)
    return float(loss)


def diou_loss_1d_grad(pred, gt) -> tuple[float, float]:
    """d loss / d (pred start, pred end)."""
    ps, pe = _check_interval(pred, "pred")
    gs, ge = _check_interval(gt, "gt")
    _, dps, dpe = _diou_parts(ps, pe, gs, ge)
    return float(dps), float(dpe)


def log_softmax(logits) -> np.ndarray:
    """Row-wise log-softmax via the shifted log-sum-exp identity."""
    z = np.asarray(logits, dtype=np.float64)
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    zmax = z.max(axis=1, keepdims=True)
    out = z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    return out[0] if squeeze else out


def cross_entropy(logits, target: int) -> float:
    """Negative log-likelihood of ``target`` under softmax(logits)."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    k = z.shape[0]
    if k < 2:
        raise ShapeError(f"cross_entropy needs at least 2 logits, got {k}")
    if not (0 <= target < k):
        raise ValueError(f"cross_entropy target {target} out of range for {k} classes")
    return float(-log_softmax(z)[target])


def cross_entropy_grad(logits, target: int) -> np.ndarray:
    """d loss / d logits = softmax(logits) - onehot(target)."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    k = z.shape[0]
    if k < 2:
        raise ShapeError(f"cross_entropy needs at least 2 logits, got {k}")
    if not (0 <= target < k):
        raise ValueError(f"cross_entropy target {target} out of range for {k} classes")
    g = np.exp(log_softmax(z))
    g[target] -= 1.0
    return g


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    if a.size == 0:
        raise ShapeError("mse of empty arrays")
    return float(np.mean((a - b) ** 2))


def mse_grad(a, b) -> np.ndarray:
    """d mse / d a."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    return 2.0 * (a - b) / a.size


def grad_check(f, x, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps an array to (loss, grad) where grad has the shape of x.
    The relative error at a coordinate is |analytic - numeric| divided by
    max(1, |numeric|).  Non-finite values at any probe point are an error.
    """
    x = np.asarray(x, dtype=np.float64)
    loss0, grad = f(x)
    grad = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(loss0) or not np.all(np.isfinite(grad)):
        raise ValueError("grad_check: non-finite loss or gradient at the base point")
    if grad.shape != x.shape:
        raise ShapeError(f"grad_check: gradient shape {grad.shape} does not match input shape {x.shape}")
    worst = 0.0
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        lp, _ = f(xp)
        xm = x.copy()
        xm[idx] -= h
        lm, _ = f(xm)
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise ValueError(f"grad_check: non-finite loss at probe {idx}")
        numeric = (lp - lm) / (2.0 * h)
        rel = abs(grad[idx] - numeric) / max(1.0, abs(numeric))
        if rel > worst:
            worst = rel
        it.iternext()
    return worst
