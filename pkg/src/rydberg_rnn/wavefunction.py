"""Autoregressive GRU wavefunction, psi(sigma) = sqrt(p_RNN(sigma)).

One GRU cell with weights shared across sites reads the occupation of the
previous site (one-hot, zero vector before the first site) and emits the
conditional distribution of the current site.  Cell convention::

    r  = sigmoid(x Wr + h Ur + br)
    z  = sigmoid(x Wz + h Uz + bz)
    hc = tanh(x Wc + (r * h) Uc + bc)
    h' = (1 - z) * h + z * hc
    p  = softmax(h' V + c)

Row-vector convention throughout: ``x`` is (B, 2), ``h`` is (B, nh).
Everything is float64 and batched over configurations.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit, log_expit

from ._kernels import gru_cell
from ._rng import INIT, SAMPLE, make_rng

TENSOR_NAMES = ("Wr", "Ur", "br", "Wz", "Uz", "bz", "Wc", "Uc", "bc", "V", "c")


@dataclass(eq=False)
class RnnParams:
    """GRU weights.  Also used as the container for gradients and Adam moments."""

    Wr: np.ndarray
    Ur: np.ndarray
    br: np.ndarray
    Wz: np.ndarray
    Uz: np.ndarray
    bz: np.ndarray
    Wc: np.ndarray
    Uc: np.ndarray
    bc: np.ndarray
    V: np.ndarray
    c: np.ndarray

    @property
    def nh(self) -> int:
        return self.Ur.shape[0]

    @staticmethod
    def shapes(nh: int) -> dict[str, tuple[int, ...]]:
        gate = {"W": (2, nh), "U": (nh, nh), "b": (nh,)}
        out = {}
        for g in "rzc":
            for kind, shape in gate.items():
                out[f"{kind}{g}"] = shape
        out["V"] = (nh, 2)
        out["c"] = (2,)
        return {name: out[name] for name in TENSOR_NAMES}

    @classmethod
    def zeros(cls, nh: int) -> "RnnParams":
        return cls(**{k: np.zeros(s) for k, s in cls.shapes(nh).items()})

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def validate(self) -> None:
        expected = self.shapes(self.nh)
        for name, arr in self.tensors().items():
            if arr.shape != expected[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {expected[name]} for nh={self.nh}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

    def copy(self) -> "RnnParams":
        return RnnParams(**{k: v.copy() for k, v in self.tensors().items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors().values()])

    @classmethod
    def from_flat(cls, vec: np.ndarray, nh: int) -> "RnnParams":
        out, pos = {}, 0
        for name, shape in cls.shapes(nh).items():
            size = int(np.prod(shape))
            out[name] = np.array(vec[pos:pos + size], dtype=np.float64).reshape(shape)
            pos += size
        if pos != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {pos}")
        return cls(**out)

    def map(self, fn, *others: "RnnParams") -> "RnnParams":
        return RnnParams(**{k: fn(v, *(getattr(o, k) for o in others)) for k, v in self.tensors().items()})


@dataclass
class RnnState:
    hidden: np.ndarray
    last_input: np.ndarray


@dataclass(eq=False)
class ForwardTape:
    """Per-site activations of a batched forward pass, kept for backprop.

    Arrays are stacked along a leading site axis: ``x`` (N, B, 2), the gate
    and hidden arrays (N, B, nh) and ``probs`` (N, B, 2).  ``h_prev[i]`` is
    the hidden state entering site ``i``.
    """

    sigmas: np.ndarray
    x: np.ndarray
    h_prev: np.ndarray
    r: np.ndarray
    z: np.ndarray
    hc: np.ndarray
    h: np.ndarray
    probs: np.ndarray
    log_probs: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(nh: int, seed: int) -> RnnParams:
    """Glorot-uniform kernels, zero biases."""
    if int(nh) != nh or nh < 1:
        raise ValueError(f"nh must be a positive integer, got {nh!r}")
    rng = make_rng(seed, INIT)
    params = RnnParams.zeros(int(nh))
    for name, arr in params.tensors().items():
        if arr.ndim == 2:
            bound = glorot_bound(*arr.shape)
            arr[...] = rng.uniform(-bound, bound, size=arr.shape)
    return params


class _Cell:
    """Gate tensors fused for the forward pass.

    The input is one-hot (or absent at the first site), so ``x W + b`` is a
    row lookup in ``table`` by input code: 0 or 1 for the previous bit, 2 for
    no input.  Only the logit difference ``d = l1 - l0`` matters for a
    two-outcome softmax: p(1) = sigmoid(d).
    """

    def __init__(self, p: RnnParams):
        self.nh = p.nh
        bias = np.concatenate([p.br, p.bz, p.bc])
        wx = np.concatenate([p.Wr, p.Wz, p.Wc], axis=1)
        self.table = np.vstack([wx + bias, bias])
        self.urz = np.concatenate([p.Ur, p.Uz], axis=1)
        self.uc = p.Uc
        self.dv = np.ascontiguousarray(p.V[:, 1] - p.V[:, 0])
        self.dc = float(p.c[1] - p.c[0])

    def __call__(self, codes, h, out=None, full=True):
        codes = np.broadcast_to(np.asarray(codes, dtype=np.intp), h.shape[:1])
        return gru_cell(self.table, self.urz, self.uc, self.dv, self.dc,
                        np.ascontiguousarray(codes), np.ascontiguousarray(h), out=out, full=full)


NO_INPUT = 2


def initial_state(nh: int, batch: int | None = None) -> RnnState:
    if batch is None:
        return RnnState(hidden=np.zeros(nh), last_input=np.zeros(2))
    return RnnState(hidden=np.zeros((batch, nh)), last_input=np.zeros((batch, 2)))


def step(params: RnnParams, state: RnnState) -> tuple[np.ndarray, np.ndarray]:
    """One cell update.  Returns (next hidden, conditional over {0, 1}).

    Works for a single state (1-D arrays) or a batch (2-D arrays).
    ``last_input`` is one-hot, or all zeros before the first site.
    """
    single = state.hidden.ndim == 1
    h = np.atleast_2d(state.hidden)
    x = np.atleast_2d(state.last_input)
    code = np.where(x.sum(axis=1) == 0, NO_INPUT, np.argmax(x, axis=1))
    _, _, _, h_new, d = _Cell(params)(code, h)
    q = np.stack([expit(-d), expit(d)], axis=1)
    return (h_new[0], q[0]) if single else (h_new, q)


def _one_hot(bits) -> np.ndarray:
    return np.eye(2)[np.asarray(bits, dtype=np.intp)]


def _as_batch(sigmas) -> tuple[np.ndarray, bool]:
    s = np.asarray(sigmas)
    single = s.ndim == 1
    s = np.atleast_2d(s).astype(np.intp)
    if s.ndim != 2 or s.shape[1] == 0:
        raise ValueError(f"configurations must be (B, N) with N >= 1, got shape {s.shape}")
    return s, single


def forward(params: RnnParams, sigmas) -> ForwardTape:
    """Teacher-forced pass over a batch of configurations, recording a tape."""
    s, _ = _as_batch(sigmas)
    b, n = s.shape
    nh = params.nh
    cell = _Cell(params)
    tape = ForwardTape(
        sigmas=s,
        x=np.zeros((n, b, 2)),
        h_prev=np.zeros((n, b, nh)),
        r=np.empty((n, b, nh)), z=np.empty((n, b, nh)), hc=np.empty((n, b, nh)),
        h=np.empty((n, b, nh)),
        probs=np.empty((n, b, 2)),
        log_probs=np.zeros(b),
    )
    h = np.zeros((b, nh))
    codes = np.full(b, NO_INPUT)
    for i in range(n):
        if i > 0:
            codes = s[:, i - 1]
            tape.x[i] = _one_hot(codes)
        tape.h_prev[i] = h
        r, z, hc, h, d = cell(codes, h)
        tape.r[i], tape.z[i], tape.hc[i], tape.h[i] = r, z, hc, h
        tape.probs[i, :, 0] = expit(-d)
        tape.probs[i, :, 1] = expit(d)
        tape.log_probs += log_expit((2 * s[:, i] - 1) * d)
    return tape


def log_prob(params: RnnParams, sigmas):
    """log p_RNN for one configuration (float) or a batch (array)."""
    s, single = _as_batch(sigmas)
    lp = _log_prob_batch(params, s)
    return float(lp[0]) if single else lp


def _log_prob_batch(params: RnnParams, s: np.ndarray) -> np.ndarray:
    # same arithmetic as forward() without storing the tape
    b, n = s.shape
    cell = _Cell(params)
    h = np.zeros((b, params.nh))
    codes = np.full(b, NO_INPUT)
    out = np.zeros(b)
    for i in range(n):
        if i > 0:
            codes = s[:, i - 1]
        h, d = cell(codes, h, full=False)
        out += log_expit((2 * s[:, i] - 1) * d)
    return out


def log_prob_with_flips(params: RnnParams, sigmas) -> np.ndarray:
    """log p of each configuration and of its N single-site flips, shape (B, N + 1).

    Column 0 is sigma itself, column ``k + 1`` is sigma with site ``k``
    flipped.  A flip at site ``k`` leaves sites ``0..k`` of the teacher-forced
    pass unchanged, so each flipped chain starts from the cached hidden state
    after site ``k``.  The arithmetic per row is the same sequence of
    operations as in ``log_prob``, so results agree bit for bit.
    """
    s, _ = _as_batch(sigmas)
    b, n = s.shape
    nh = params.nh
    cell = _Cell(params)
    out = np.zeros((b, n + 1))
    # hidden states of the flipped chains, chain-major so the live ones are a contiguous prefix
    flip_h = np.empty((n, b, nh))
    spare = np.empty((n, b, nh))
    h = np.zeros((b, nh))
    codes = np.full(b, NO_INPUT)
    base = out[:, 0]
    for i in range(n):
        sign = 2 * s[:, i] - 1
        if i > 0:
            codes = s[:, i - 1]
            # flips at sites < i: all continue with input s[i-1], except the
            # newest one (site i-1), which reads the flipped bit
            fc = np.empty((i, b), dtype=np.intp)
            fc[:] = codes
            fc[i - 1] = 1 - codes
            hf, df = cell(fc.reshape(-1), flip_h[:i].reshape(i * b, nh),
                          out=spare[:i].reshape(i * b, nh), full=False)
            flip_h, spare = spare, flip_h
            out[:, 1:i + 1] += log_expit(sign * df.reshape(i, b)).T
        h, d = cell(codes, h, full=False)
        flip_h[i] = h
        # the flipped chain at site i shares the prefix sum, then takes the other outcome
        out[:, i + 1] = base + log_expit(-sign * d)
        base += log_expit(sign * d)
    return out


def conditionals(params: RnnParams, sigmas) -> np.ndarray:
    """Conditional distribution at every site under teacher forcing, shape (B, N, 2)."""
    return forward(params, sigmas).probs.transpose(1, 0, 2)


def amplitude_ratio(params: RnnParams, sigma, sigma_prime) -> float:
    """psi(sigma') / psi(sigma)."""
    lp = log_prob(params, np.stack([np.asarray(sigma), np.asarray(sigma_prime)]))
    return float(np.exp(0.5 * (lp[1] - lp[0])))


def sample(params: RnnParams, n_atoms: int, count: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``count`` length-``n_atoms`` configurations site by site.

    Returns (samples as uint8 (count, N), log-probabilities (count,)).
    ``seed`` is an int or a tuple of ints naming the RNG stream.  Sample ``k``
    consumes uniforms ``k*N .. k*N+N-1`` of that stream, so it does not depend
    on how many other samples are drawn alongside it.
    """
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    keys = (seed,) if np.isscalar(seed) else tuple(seed)
    u = make_rng(*keys, SAMPLE).random((count, n_atoms))
    cell = _Cell(params)
    out = np.zeros((count, n_atoms), dtype=np.uint8)
    logp = np.zeros(count)
    h = np.zeros((count, params.nh))
    codes = np.full(count, NO_INPUT)
    for i in range(n_atoms):
        h, d = cell(codes, h, full=False)
        bit = (u[:, i] < expit(d)).astype(np.intp)
        out[:, i] = bit
        logp += log_expit((2 * bit - 1) * d)
        codes = bit
    return out, logp


def backprop(params: RnnParams, tape: ForwardTape, weights=None) -> RnnParams:
    """Gradient of sum_b weights[b] * log p(sigma_b) with respect to every tensor."""
    n, b, _ = tape.x.shape
    nh = params.nh
    w = np.ones(b) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (b,):
        raise ValueError(f"weights must have shape ({b},), got {w.shape}")
    g = RnnParams.zeros(nh)
    urz_t = np.concatenate([params.Ur, params.Uz], axis=1).T
    uc_t = params.Uc.T
    dv = params.V[:, 1] - params.V[:, 0]
    dpre = np.empty((b, 3 * nh))
    dW = np.zeros((2, 3 * nh))
    db = np.zeros(3 * nh)
    dU = np.zeros((nh, 2 * nh))
    dh = np.zeros((b, nh))
    for i in reversed(range(n)):
        x, h0 = tape.x[i], tape.h_prev[i]
        r, z, hc, h = tape.r[i], tape.z[i], tape.hc[i], tape.h[i]
        # d log q(sigma_i) / d(l1 - l0) = sigma_i - p(1)
        e = (tape.sigmas[:, i] - tape.probs[i, :, 1]) * w
        he = h.T @ e
        g.V[:, 1] += he
        g.V[:, 0] -= he
        se = e.sum()
        g.c[1] += se
        g.c[0] -= se
        dh = dh + e[:, None] * dv

        dac = dh * z * (1.0 - hc * hc)
        g.Uc += (r * h0).T @ dac
        drh = dac @ uc_t
        dpre[:, :nh] = drh * h0 * r * (1.0 - r)
        dpre[:, nh:2 * nh] = dh * (hc - h0) * z * (1.0 - z)
        dpre[:, 2 * nh:] = dac

        dW += x.T @ dpre
        db += dpre.sum(axis=0)
        dU += h0.T @ dpre[:, :2 * nh]
        dh = dh * (1.0 - z) + drh * r + dpre[:, :2 * nh] @ urz_t
    return _unfuse(g, dW, dU, db)


def _unfuse(g: RnnParams, dW, dU, db) -> RnnParams:
    nh = g.nh
    g.Wr[...], g.Wz[...], g.Wc[...] = dW[:, :nh], dW[:, nh:2 * nh], dW[:, 2 * nh:]
    g.br[...], g.bz[...], g.bc[...] = db[:nh], db[nh:2 * nh], db[2 * nh:]
    g.Ur[...], g.Uz[...] = dU[:, :nh], dU[:, nh:]
    return g


def backprop_logprob(params: RnnParams, tape: ForwardTape, sigma) -> RnnParams:
    """Exact gradient of log p(sigma) from a tape recorded on ``sigma``."""
    s = np.atleast_2d(np.asarray(sigma)).astype(np.intp)
    if s.shape != tape.sigmas.shape or not np.array_equal(s, tape.sigmas):
        raise ValueError("tape was not recorded on this configuration")
    return backprop(params, tape)


# -- checkpoints -------------------------------------------------------------

def params_to_arrays(params: RnnParams, prefix: str = "param/") -> dict[str, np.ndarray]:
    return {prefix + k: np.ascontiguousarray(v) for k, v in params.tensors().items()}


def params_from_arrays(arrays, prefix: str = "param/") -> RnnParams:
    params = RnnParams(**{k: np.array(arrays[prefix + k], dtype=np.float64) for k in TENSOR_NAMES})
    params.validate()
    return params
