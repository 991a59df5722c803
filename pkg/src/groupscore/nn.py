"""Batched numpy building blocks with hand-written reverse passes.

Every ``*_forward`` returns its output plus a cache; the matching
``*_backward`` takes the output gradient and that cache. Arrays are float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.special import expit

Params = dict[str, np.ndarray]

PROB_EPS = 1e-7


def sigmoid(x):
    return expit(x)


def softplus(x):
    return np.logaddexp(0.0, x)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_dense(rng, prefix: str, fan_in: int, fan_out: int) -> Params:
    return {
        f"{prefix}.W": uniform_init(rng, (fan_in, fan_out), fan_in),
        f"{prefix}.b": uniform_init(rng, (fan_out,), fan_in),
    }


def init_gru(rng, prefix: str, input_dim: int, hidden: int) -> Params:
    # gate blocks along the last axis: [update z | reset r | candidate n]
    return {
        f"{prefix}.W": uniform_init(rng, (input_dim, 3 * hidden), input_dim),
        f"{prefix}.U": uniform_init(rng, (hidden, 3 * hidden), hidden),
        f"{prefix}.b": uniform_init(rng, (3 * hidden,), hidden),
    }


def init_attention(rng, prefix: str, dim: int) -> Params:
    return {
        f"{prefix}.W": uniform_init(rng, (dim, dim), dim),
        f"{prefix}.b": uniform_init(rng, (dim,), dim),
        f"{prefix}.u": uniform_init(rng, (dim,), dim),
    }


def sub(params: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """View of the parameters under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


# --------------------------------------------------------------------- dense


def dense_forward(x, W, b):
    return x @ W + b, x


def dense_backward(dy, x, W):
    return dy @ W.T, x.T @ dy, dy.sum(axis=0)


# ----------------------------------------------------------------------- GRU


@dataclass
class GRUCache:
    X: np.ndarray
    mask: np.ndarray
    W: np.ndarray
    U: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    n: np.ndarray
    reverse: bool


def gru_forward(X, mask, W, U, b, reverse: bool = False):
    """Run a GRU over ``X`` of shape (N, T, D).

    ``mask`` (N, T) marks real steps; at masked steps the state is carried
    over unchanged, so padding never influences any output. Returns the
    (N, T, H) states.
    """
    if reverse:
        X, mask = X[:, ::-1], mask[:, ::-1]
    N, T, _ = X.shape
    H = U.shape[0]
    if W.shape[0] != X.shape[2] or W.shape[1] != 3 * H:
        raise ValueError(f"GRU shape mismatch: input {X.shape}, W {W.shape}, U {U.shape}")
    A = X @ W + b
    Uzr, Un = U[:, : 2 * H], U[:, 2 * H :]
    states = np.empty((N, T, H))
    h_prev = np.empty((T, N, H))
    z_all, r_all, n_all = np.empty((T, N, H)), np.empty((T, N, H)), np.empty((T, N, H))
    h = np.zeros((N, H))
    for t in range(T):
        a = A[:, t]
        zr = sigmoid(a[:, : 2 * H] + h @ Uzr)
        z, r = zr[:, :H], zr[:, H:]
        n = np.tanh(a[:, 2 * H :] + (r * h) @ Un)
        h_new = h + z * (n - h)
        h_prev[t], z_all[t], r_all[t], n_all[t] = h, z, r, n
        h = np.where(mask[:, t, None], h_new, h)
        states[:, t] = h
    cache = GRUCache(X, mask, W, U, h_prev, z_all, r_all, n_all, reverse)
    return (states[:, ::-1] if reverse else states), cache


def gru_backward(dstates, c: GRUCache):
    """Gradients (dX, dW, dU, db) given dL/dstates of shape (N, T, H)."""
    if c.reverse:
        dstates = dstates[:, ::-1]
    N, T, H = dstates.shape
    Uzr, Un = c.U[:, : 2 * H], c.U[:, 2 * H :]
    dA = np.empty((N, T, 3 * H))
    dU = np.zeros_like(c.U)
    dh = np.zeros((N, H))
    for t in range(T - 1, -1, -1):
        dh = dh + dstates[:, t]
        m = c.mask[:, t, None]
        h, z, r, n = c.h_prev[t], c.z[t], c.r[t], c.n[t]
        dnew = np.where(m, dh, 0.0)
        dprev = np.where(m, 0.0, dh)
        dprev += dnew * (1.0 - z)
        dan = dnew * z * (1.0 - n * n)
        dU[:, 2 * H :] += (r * h).T @ dan
        drh = dan @ Un.T
        dprev += drh * r
        daz = dnew * (n - h) * z * (1.0 - z)
        dar = drh * h * r * (1.0 - r)
        dazr = np.concatenate([daz, dar], axis=1)
        dU[:, : 2 * H] += h.T @ dazr
        dprev += dazr @ Uzr.T
        dA[:, t, : 2 * H] = dazr
        dA[:, t, 2 * H :] = dan
        dh = dprev
    D = c.X.shape[2]
    dW = c.X.reshape(-1, D).T @ dA.reshape(-1, 3 * H)
    db = dA.sum(axis=(0, 1))
    dX = dA @ c.W.T
    if c.reverse:
        dX = dX[:, ::-1]
    return dX, dW, dU, db


def gru_step(x, h, params: Mapping[str, np.ndarray]) -> np.ndarray:
    """One GRU transition for single vectors; ``params`` holds W, U, b."""
    W, U, b = params["W"], params["U"], params["b"]
    H = U.shape[0]
    x, h = np.asarray(x, dtype=float), np.asarray(h, dtype=float)
    if x.shape != (W.shape[0],) or h.shape != (H,):
        raise ValueError(f"gru_step shape mismatch: x {x.shape}, h {h.shape}, W {W.shape}")
    a = x @ W + b
    z = sigmoid(a[:H] + h @ U[:, :H])
    r = sigmoid(a[H : 2 * H] + h @ U[:, H : 2 * H])
    n = np.tanh(a[2 * H :] + (r * h) @ U[:, 2 * H :])
    return (1.0 - z) * h + z * n


def gru_sequence(inputs, valid_len: int, params, direction: str = "forward"):
    """States for one sequence of shape (T, D); returns (states, mask).

    Positions at or beyond ``valid_len`` are masked; ``direction='reverse'``
    reads the valid prefix back to front.
    """
    X = np.asarray(inputs, dtype=float)[None]
    T = X.shape[1]
    if not 0 <= valid_len <= T:
        raise ValueError(f"valid_len {valid_len} outside 0..{T}")
    if direction not in ("forward", "reverse"):
        raise ValueError(f"unknown direction {direction!r}")
    mask = (np.arange(T) < valid_len)[None]
    if direction == "reverse":
        # reverse only the valid prefix so padding stays at the tail
        Xr = X.copy()
        Xr[0, :valid_len] = X[0, :valid_len][::-1]
        states, _ = gru_forward(Xr, mask, params["W"], params["U"], params["b"])
        out = states[0].copy()
        out[:valid_len] = states[0, :valid_len][::-1]
        return out, mask[0]
    states, _ = gru_forward(X, mask, params["W"], params["U"], params["b"])
    return states[0], mask[0]


# ----------------------------------------------------------------- attention


@dataclass
class AttentionCache:
    H: np.ndarray
    u_t: np.ndarray
    alpha: np.ndarray
    W: np.ndarray
    u: np.ndarray


def attention_forward(H, mask, W, b, u):
    """Additive attention pooling over axis 1 of ``H`` (N, T, D).

    Scores are tanh(H W + b) . u, softmax-normalised over unmasked positions.
    Rows with no unmasked position get all-zero weights and a zero context.
    """
    u_t = np.tanh(H @ W + b)
    s = u_t @ u
    s = np.where(mask, s, -np.inf)
    smax = np.max(s, axis=1, keepdims=True)
    smax = np.where(np.isfinite(smax), smax, 0.0)
    e = np.where(mask, np.exp(s - smax), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    alpha = e / np.where(denom > 0, denom, 1.0)
    ctx = np.einsum("nt,ntd->nd", alpha, H)
    return ctx, alpha, AttentionCache(H, u_t, alpha, W, u)


def attention_backward(dctx, c: AttentionCache):
    """Gradients (dH, dW, db, du)."""
    alpha = c.alpha
    dalpha = np.einsum("ntd,nd->nt", c.H, dctx)
    dH = alpha[:, :, None] * dctx[:, None, :]
    ds = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    du = np.einsum("nt,nta->a", ds, c.u_t)
    dpre = ds[:, :, None] * c.u[None, None, :] * (1.0 - c.u_t * c.u_t)
    D = c.H.shape[2]
    flat = dpre.reshape(-1, dpre.shape[2])
    dW = c.H.reshape(-1, D).T @ flat
    db = flat.sum(axis=0)
    dH += dpre @ c.W.T
    return dH, dW, db, du


def attention_pool(states, mask, params):
    """Single-sequence pooling: returns (context vector, weights)."""
    H = np.asarray(states, dtype=float)[None]
    m = np.asarray(mask, dtype=bool)[None]
    ctx, alpha, _ = attention_forward(H, m, params["W"], params["b"], params["u"])
    return ctx[0], alpha[0]


# -------------------------------------------------------------------- losses


def weighted_bce(p, y, w: float = 1.0):
    """Elementwise -w*y*log(p) - (1-y)*log(1-p) with p clamped to [eps, 1-eps]."""
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return -w * y * np.log(pc) - (1.0 - y) * np.log1p(-pc)


def weighted_bce_grad(p, y, w: float = 1.0):
    """dL/dp, evaluated at the clamped probability.

    Inside the clamp range this is the exact derivative. Outside it the
    boundary derivative is returned instead of zero, so a saturated wrong
    prediction still receives a corrective gradient.
    """
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return -w * y / pc + (1.0 - y) / (1.0 - pc)


# ---------------------------------------------------------------------- Adam


class Adam:
    """Bias-corrected Adam updating a parameter dict in place."""

    def __init__(self, params: Params, learning_rate: float = 0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if g.shape != self.params[name].shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, expected {self.params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_update(params: Params, grads, state: Adam | None = None, learning_rate: float = 0.01) -> Adam:
    state = state or Adam(params, learning_rate)
    state.step(grads)
    return state


# ------------------------------------------------------------ gradient checks


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)
    n_coords: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def worst(self) -> str:
        return max(self.per_param, key=self.per_param.get) if self.per_param else ""


def grad_check(
    computation: Callable[[Params], tuple[float, Mapping[str, np.ndarray]]],
    params: Params,
    tolerance: float = 1e-6,
    step: float = 1e-5,
    names=None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``computation(params)`` returns (scalar value, gradient dict). Every
    coordinate is perturbed in place and restored. The relative error of a
    coordinate is |a - n| / max(|a|, |n|, floor) where floor is 1e-3 of the
    largest numerical gradient magnitude, so near-zero coordinates are judged
    against the gradient's overall scale.
    """
    _, analytic = computation(params)
    numeric = {}
    for name in names or list(params):
        p = params[name]
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = computation(params)[0]
            flat[i] = orig - step
            fm = computation(params)[0]
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * step)
        numeric[name] = num
    scale = max((np.max(np.abs(n)) for n in numeric.values() if n.size), default=0.0)
    floor = max(1e-3 * scale, 1e-12)
    report = GradCheckReport(tolerance, 0.0)
    for name, num in numeric.items():
        a = np.asarray(analytic.get(name, np.zeros_like(num)))
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        err = float(np.max(np.abs(a - num) / denom)) if num.size else 0.0
        report.per_param[name] = err
        report.max_rel_err = max(report.max_rel_err, err)
        report.n_coords += num.size
    return report


# ---------------------------------------------------------------- checkpoints

MANIFEST_FILE = "params.manifest"
BLOB_FILE = "params.bin"
HEADER_FILE = "model.json"


def save_checkpoint(directory, params: Params, header: dict) -> None:
    """Write ``model.json``, a text tensor manifest and a little-endian float32 blob.

    Manifest lines read ``name dtype shape offset`` with shape as
    comma-separated dims (empty for scalars) and offset in bytes.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    offset = 0
    lines = []
    chunks = []
    for name in sorted(params):
        arr = np.array(params[name], dtype="<f4", order="C")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name} float32 {shape} {offset}")
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    (d / MANIFEST_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    (d / BLOB_FILE).write_bytes(b"".join(chunks))
    (d / HEADER_FILE).write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(directory) -> tuple[Params, dict]:
    d = Path(directory)
    header = json.loads((d / HEADER_FILE).read_text(encoding="utf-8"))
    blob = (d / BLOB_FILE).read_bytes()
    params = {}
    for i, line in enumerate((d / MANIFEST_FILE).read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split(" ")
        if len(parts) != 4 or parts[1] != "float32":
            raise ValueError(f"{d / MANIFEST_FILE}:{i}: malformed manifest line")
        name, _, shape_s, off_s = parts
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=int(off_s))
        params[name] = arr.reshape(shape).astype(np.float64)
    return params, header
