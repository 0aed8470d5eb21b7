"""Discrete-observation HMM engine and the per-slice segmentation pipeline.

Every slice is handled on its own: the slice is quantized against global
intensity bounds, raster-scanned into a symbol sequence, decoded with an
initial model, re-estimated from that decoding, refined with Baum-Welch and
decoded again.  The final state path, reshaped to the slice, is the label
image.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numba
import numpy as np

from .errors import ArgumentError, DecodeError, DegenerateInputError, NumericError

EMISSION_FLOOR = 1e-4
INIT_SMOOTHING = 1e-3
ROW_TOL = 1e-9
INIT_POLICIES = ("quantile-blocks",)


@dataclass(frozen=True)
class QuantizationParams:
    lo: float
    hi: float
    n_symbols: int = 32

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ArgumentError(f"quantization needs lo < hi, got {self.lo}, {self.hi}")
        if self.n_symbols < 2:
            raise ArgumentError(f"need at least 2 symbols, got {self.n_symbols}")

    @classmethod
    def from_data(cls, data: np.ndarray, n_symbols: int = 32) -> "QuantizationParams":
        """Global bounds taken from the whole volume, shared by every slab."""
        lo, hi = float(np.min(data)), float(np.max(data))
        if hi <= lo:
            hi = lo + 1.0
        return cls(lo, hi, n_symbols)

    def to_json(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "n_symbols": self.n_symbols}

    @classmethod
    def from_json(cls, obj: dict) -> "QuantizationParams":
        return cls(float(obj["lo"]), float(obj["hi"]), int(obj["n_symbols"]))


@dataclass(frozen=True)
class SegConfig:
    n_states: int = 3
    n_symbols: int = 32
    max_train_iters: int = 20
    loglik_tolerance: float = 1e-4
    init_policy: str = "quantile-blocks"

    def __post_init__(self):
        if self.n_states < 1 or self.n_states > 255:
            raise ArgumentError(f"n_states must be in [1, 255], got {self.n_states}")
        if self.n_symbols < 2:
            raise ArgumentError(f"n_symbols must be >= 2, got {self.n_symbols}")
        if self.max_train_iters < 0:
            raise ArgumentError("max_train_iters must be >= 0")
        if not self.loglik_tolerance > 0:
            raise ArgumentError("loglik_tolerance must be > 0")
        if self.init_policy not in INIT_POLICIES:
            raise ArgumentError(f"unknown init_policy {self.init_policy!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SegConfig":
        return cls(
            n_states=int(obj["n_states"]),
            n_symbols=int(obj["n_symbols"]),
            max_train_iters=int(obj["max_train_iters"]),
            loglik_tolerance=float(obj["loglik_tolerance"]),
            init_policy=str(obj["init_policy"]),
        )

    def digest(self, params: QuantizationParams | None = None) -> str:
        doc = {"seg": self.to_json()}
        if params is not None:
            doc["quant"] = params.to_json()
        blob = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True, eq=False)
class HmmModel:
    trans: np.ndarray
    emis: np.ndarray
    init: np.ndarray

    @property
    def n_states(self) -> int:
        return self.trans.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.emis.shape[1]

    def check(self) -> "HmmModel":
        k = self.n_states
        if self.trans.shape != (k, k) or self.emis.shape[0] != k or self.init.shape != (k,):
            raise ArgumentError("inconsistent HMM matrix shapes")
        for name, m in (("trans", self.trans), ("emis", self.emis), ("init", self.init[None, :])):
            if np.any(m < 0) or not np.all(np.isfinite(m)):
                raise NumericError(f"{name} has negative or non-finite entries")
            if np.any(np.abs(m.sum(axis=1) - 1.0) > ROW_TOL):
                raise NumericError(f"{name} rows do not sum to 1")
        return self


@dataclass(frozen=True, eq=False)
class ObservationSequence:
    symbols: np.ndarray
    n_symbols: int
    slice_index: int | None = None
    shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.symbols.size and (self.symbols.min() < 0 or self.symbols.max() >= self.n_symbols):
            raise ArgumentError("observation symbol outside [0, M)")

    def __len__(self):
        return self.symbols.size


def _as_seq(seq, n_symbols: int | None = None) -> ObservationSequence:
    if isinstance(seq, ObservationSequence):
        return seq
    arr = np.asarray(seq, dtype=np.int64)
    return ObservationSequence(arr, n_symbols if n_symbols is not None else int(arr.max()) + 1)


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    return m / m.sum(axis=1, keepdims=True)


# --- quantization ------------------------------------------------------------

def quantize_slice(image: np.ndarray, params: QuantizationParams,
                   slice_index: int | None = None) -> ObservationSequence:
    image = np.asarray(image)
    if image.size == 0:
        raise ArgumentError("cannot quantize an empty slice")
    v = np.clip(image.astype(np.float64), params.lo, params.hi)
    sym = np.floor(params.n_symbols * (v - params.lo) / (params.hi - params.lo)).astype(np.int64)
    np.minimum(sym, params.n_symbols - 1, out=sym)
    return ObservationSequence(sym.ravel(), params.n_symbols, slice_index,
                               image.shape if image.ndim == 2 else None)


# --- kernels -----------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _viterbi_kernel(obs, log_init, log_trans, log_emis):
    t_len = obs.shape[0]
    k = log_init.shape[0]
    delta = np.empty(k)
    prev = np.empty(k)
    back = np.zeros((t_len, k), dtype=np.int32)
    for j in range(k):
        delta[j] = log_init[j] + log_emis[j, obs[0]]
    for t in range(1, t_len):
        for j in range(k):
            prev[j] = delta[j]
        o = obs[t]
        for j in range(k):
            best = -np.inf
            arg = 0
            for i in range(k):
                v = prev[i] + log_trans[i, j]
                if v > best:
                    best = v
                    arg = i
            delta[j] = best + log_emis[j, o]
            back[t, j] = arg
    best = -np.inf
    last = 0
    for j in range(k):
        if delta[j] > best:
            best = delta[j]
            last = j
    path = np.empty(t_len, dtype=np.int64)
    path[t_len - 1] = last
    for t in range(t_len - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, best


@numba.njit(cache=True, nogil=True)
def _forward_backward_kernel(obs, init, trans, emis):
    """Scaled forward-backward; returns sufficient statistics for one EM step.

    ``ok`` is False when some scaling factor vanished (impossible sequence).
    """
    t_len = obs.shape[0]
    k = init.shape[0]
    m = emis.shape[1]
    alpha = np.empty((t_len, k))
    scale = np.empty(t_len)
    xi = np.zeros((k, k))
    em = np.zeros((k, m))
    gsum = np.zeros(k)
    g0 = np.zeros(k)

    c = 0.0
    for j in range(k):
        alpha[0, j] = init[j] * emis[j, obs[0]]
        c += alpha[0, j]
    if c <= 0.0:
        return False, 0.0, g0, xi, em, gsum
    scale[0] = c
    for j in range(k):
        alpha[0, j] /= c
    for t in range(1, t_len):
        o = obs[t]
        c = 0.0
        for j in range(k):
            s = 0.0
            for i in range(k):
                s += alpha[t - 1, i] * trans[i, j]
            alpha[t, j] = s * emis[j, o]
            c += alpha[t, j]
        if c <= 0.0:
            return False, 0.0, g0, xi, em, gsum
        scale[t] = c
        for j in range(k):
            alpha[t, j] /= c

    loglik = 0.0
    for t in range(t_len):
        loglik += np.log(scale[t])

    beta = np.ones(k)
    nxt = np.empty(k)
    gamma = np.empty(k)
    for t in range(t_len - 1, -1, -1):
        g = 0.0
        for i in range(k):
            gamma[i] = alpha[t, i] * beta[i]
            g += gamma[i]
        for i in range(k):
            gamma[i] /= g
            em[i, obs[t]] += gamma[i]
            gsum[i] += gamma[i]
        if t == 0:
            for i in range(k):
                g0[i] = gamma[i]
            break
        # xi for the (t-1 -> t) transition, then step beta back to t-1
        o = obs[t]
        for j in range(k):
            nxt[j] = emis[j, o] * beta[j] / scale[t]
        for i in range(k):
            s = 0.0
            for j in range(k):
                w = trans[i, j] * nxt[j]
                xi[i, j] += alpha[t - 1, i] * w
                s += w
            beta[i] = s
    return True, loglik, g0, xi, em, gsum


# --- operations --------------------------------------------------------------

def _logs(model: HmmModel):
    with np.errstate(divide="ignore"):
        return np.log(model.init), np.log(model.trans), np.log(model.emis)


def viterbi(seq, model: HmmModel) -> np.ndarray:
    """Most probable state path, decoded in log space.

    Backtracking ties resolve to the lower state index.
    """
    seq = _as_seq(seq, model.n_symbols)
    if seq.n_symbols > model.n_symbols or (len(seq) and seq.symbols.max() >= model.n_symbols):
        raise ArgumentError("sequence symbols exceed model alphabet")
    if len(seq) == 0:
        return np.zeros(0, dtype=np.int64)
    li, lt, le = _logs(model)
    path, best = _viterbi_kernel(seq.symbols.astype(np.int64), li, lt, le)
    if best == -np.inf:
        raise DecodeError("every state path has zero probability")
    return path


def path_log_prob(seq, path, model: HmmModel) -> float:
    """Log probability of one joint (path, sequence), accumulated left to right."""
    seq = _as_seq(seq, model.n_symbols)
    li, lt, le = _logs(model)
    obs = seq.symbols
    s = li[path[0]] + le[path[0], obs[0]]
    for t in range(1, len(obs)):
        s = s + lt[path[t - 1], path[t]]
        s = s + le[path[t], obs[t]]
    return float(s)


def estimate(seq, path, n_states: int, n_symbols: int | None = None) -> HmmModel:
    """Maximum-likelihood matrices from a sequence and a known state path."""
    seq = _as_seq(seq, n_symbols)
    m = seq.n_symbols if n_symbols is None else n_symbols
    path = np.asarray(path, dtype=np.int64)
    obs = seq.symbols
    if path.shape != obs.shape:
        raise ArgumentError(f"path length {path.size} != sequence length {obs.size}")
    if obs.size == 0:
        raise ArgumentError("cannot estimate from an empty sequence")
    if path.min() < 0 or path.max() >= n_states:
        raise ArgumentError("state index outside [0, K)")
    k = n_states
    tc = np.bincount(path[:-1] * k + path[1:], minlength=k * k).reshape(k, k).astype(float)
    ec = np.bincount(path * m + obs, minlength=k * m).reshape(k, m).astype(float)
    trans = np.full((k, k), 1.0 / k)
    emis = np.full((k, m), 1.0 / m)
    td = tc.sum(axis=1)
    ed = ec.sum(axis=1)
    trans[td > 0] = tc[td > 0] / td[td > 0, None]
    emis[ed > 0] = ec[ed > 0] / ed[ed > 0, None]
    init = np.zeros(k)
    init[path[0]] = 1.0
    init = (init + INIT_SMOOTHING) / (1.0 + k * INIT_SMOOTHING)
    return HmmModel(trans, emis, init)


def log_likelihood(seq, model: HmmModel) -> float:
    seq = _as_seq(seq, model.n_symbols)
    ok, ll, *_ = _forward_backward_kernel(seq.symbols.astype(np.int64), model.init,
                                          model.trans, model.emis)
    if not ok:
        return -np.inf
    return float(ll)


def train(seq, model0: HmmModel, max_iters: int = 20, tol: float = 1e-4):
    """Baum-Welch refinement.

    Returns ``(model, history)``; ``history[i]`` is the log-likelihood of the
    model after ``i`` re-estimation steps, and the returned model is the one
    scored last.  Stops once successive log-likelihoods differ by less than
    ``tol`` or after ``max_iters`` re-estimations.
    """
    model0.check()
    seq = _as_seq(seq, model0.n_symbols)
    obs = seq.symbols.astype(np.int64)
    if obs.size == 0:
        raise ArgumentError("cannot train on an empty sequence")
    present = np.unique(obs)
    if np.any(model0.emis[:, present].max(axis=0) <= 0):
        raise NumericError("a sequence symbol has zero emission probability in every state")

    model = model0
    history: list[float] = []
    for it in range(max_iters + 1):
        ok, ll, g0, xi, em, gsum = _forward_backward_kernel(obs, model.init, model.trans,
                                                            model.emis)
        if not ok:
            raise NumericError("sequence has zero likelihood under the model")
        history.append(float(ll))
        if it > 0 and abs(history[-1] - history[-2]) < tol:
            break
        if it == max_iters:
            break
        model = _reestimate(model, g0, xi, em, gsum)
    return model, history


def _reestimate(model: HmmModel, g0, xi, em, gsum) -> HmmModel:
    trans = model.trans.copy()
    emis = model.emis.copy()
    rows = xi.sum(axis=1)
    live = rows > 0
    trans[live] = xi[live] / rows[live, None]
    live = gsum > 0
    emis[live] = em[live] / gsum[live, None]
    init = g0 / g0.sum()
    return HmmModel(_normalize_rows(trans), _normalize_rows(emis), init)


def quantile_blocks(hist: np.ndarray, n_states: int) -> np.ndarray:
    """Assign each occupied symbol to one of ``n_states`` contiguous blocks.

    Blocks hold roughly equal histogram mass and each gets at least one
    occupied symbol.  Returns the block id per symbol; empty symbols fall in
    the block of the nearest occupied symbol below them.
    """
    hist = np.asarray(hist, dtype=float)
    occupied = np.flatnonzero(hist > 0)
    n = occupied.size
    if n < n_states:
        raise DegenerateInputError(
            f"{n} distinct symbols cannot seed {n_states} states")
    total = hist.sum()
    before = np.concatenate([[0.0], np.cumsum(hist[occupied])[:-1]])
    block_of = np.empty(n, dtype=np.int64)
    prev = -1
    for j in range(n):
        want = min(n_states - 1, int(np.floor(n_states * before[j] / total + 1e-12)))
        lo = max(prev, n_states - (n - j))
        block_of[j] = min(max(want, lo), prev + 1)
        prev = block_of[j]
    per_symbol = np.empty(hist.size, dtype=np.int64)
    # symbol s belongs to the block of the last occupied symbol <= s (first block for leading gaps)
    idx = np.searchsorted(occupied, np.arange(hist.size), side="right") - 1
    per_symbol[:] = block_of[np.maximum(idx, 0)]
    return per_symbol


def initial_model(hist, cfg: SegConfig) -> HmmModel:
    hist = np.asarray(hist, dtype=float)
    k, m = cfg.n_states, hist.size
    blocks = quantile_blocks(hist, k)
    emis = np.zeros((k, m))
    for i in range(k):
        mask = blocks == i
        emis[i, mask] = hist[mask]
        emis[i] /= emis[i].sum()
    emis = _normalize_rows(np.maximum(emis, EMISSION_FLOOR))
    if k == 1:
        trans = np.ones((1, 1))
    else:
        trans = np.full((k, k), 0.1 / (k - 1))
        np.fill_diagonal(trans, 0.9)
    init = np.full(k, 1.0 / k)
    return HmmModel(trans, emis, init).check()


def canonical_order(model: HmmModel) -> np.ndarray:
    """Label for each state, ranked by emission-weighted mean symbol (0 = darkest)."""
    means = model.emis @ np.arange(model.n_symbols)
    order = np.argsort(means, kind="stable")
    labels = np.empty(model.n_states, dtype=np.int64)
    labels[order] = np.arange(model.n_states)
    return labels


def segment_slice(image: np.ndarray, params: QuantizationParams, cfg: SegConfig,
                  slice_index: int | None = None) -> np.ndarray:
    image = np.asarray(image)
    if image.size == 0:
        raise ArgumentError("cannot segment an empty slice")
    seq = quantize_slice(image, params, slice_index)
    hist = np.bincount(seq.symbols, minlength=params.n_symbols)
    k = cfg.n_states
    k_eff = min(k, int(np.count_nonzero(hist)))
    if k_eff == 1:
        return np.zeros(image.shape, dtype=np.uint8)
    run_cfg = cfg if k_eff == k else SegConfig(k_eff, cfg.n_symbols, cfg.max_train_iters,
                                               cfg.loglik_tolerance, cfg.init_policy)
    model = initial_model(hist, run_cfg)
    path = viterbi(seq, model)
    guess = estimate(seq, path, k_eff, params.n_symbols)
    model, _ = train(seq, guess, cfg.max_train_iters, cfg.loglik_tolerance)
    path = viterbi(seq, model)
    labels = canonical_order(model)[path]
    if k_eff < k:
        # fewer classes than states: keep darkest at 0 and brightest at K-1
        spread = np.rint(np.arange(k_eff) * (k - 1) / (k_eff - 1)).astype(np.int64)
        labels = spread[labels]
    return labels.reshape(image.shape).astype(np.uint8)


def segment_slab(slab, params: QuantizationParams, cfg: SegConfig, z_offset: int = 0) -> np.ndarray:
    """Label every axial slice of ``slab`` (shape ``(nz, ny, nx)``) independently."""
    data = getattr(slab, "data", slab)
    data = np.asarray(data)
    if data.ndim != 3 or data.size == 0:
        raise ArgumentError(f"slab must be a non-empty 3D array, got shape {data.shape}")
    out = np.empty(data.shape, dtype=np.uint8)
    for z in range(data.shape[0]):
        out[z] = segment_slice(data[z], params, cfg, z_offset + z)
    return out
