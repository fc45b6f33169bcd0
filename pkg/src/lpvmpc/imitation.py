"""Behavioural cloning of the MPC with a small recurrent network.

Architecture: FC(5->32, tanh) -> LSTM(32) -> FC(32->32, tanh) -> FC(32->3).
Gradients are computed by hand (backpropagation through time, truncated at
window boundaries); the hidden/cell carry is threaded across windows from a
full stateful pass at the start of every epoch.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bounds import DEFAULT_BOUNDS, BoundSet
from .dataset import Scaler, nrmse, read_columns

log = logging.getLogger(__name__)

FEATURES = ("tout", "e_tout", "nox", "pman", "speed")
TARGETS = ("fq", "soi", "vgt")
HIDDEN = 32
FORMAT_VERSION = 1


# --- network -----------------------------------------------------------------

def param_shapes(n_in: int = len(FEATURES), hidden: int = HIDDEN, n_out: int = len(TARGETS)) -> dict:
    return {
        "W1": (n_in, hidden), "b1": (hidden,),
        "Wx": (hidden, 4 * hidden), "Wh": (hidden, 4 * hidden), "bl": (4 * hidden,),
        "W2": (hidden, hidden), "b2": (hidden,),
        "W3": (hidden, n_out), "b3": (n_out,),
    }


WEIGHTS = ("W1", "Wx", "Wh", "W2", "W3")


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


@dataclass
class ImitationNetwork:
    """Parameters of the FC-LSTM-FC-FC network (LSTM gate order i, f, g, o)."""

    params: dict[str, np.ndarray]
    hidden: int = HIDDEN

    def __post_init__(self):
        n_in = self.params["W1"].shape[0]
        n_out = self.params["W3"].shape[1]
        shapes = param_shapes(n_in, self.hidden, n_out)
        if set(self.params) != set(shapes):
            raise ValueError(f"parameter names {sorted(self.params)} != {sorted(shapes)}")
        for k, shp in shapes.items():
            arr = np.asarray(self.params[k], dtype=float)
            if arr.shape != shp:
                raise ValueError(f"parameter {k} has shape {arr.shape}, expected {shp}")
            self.params[k] = arr

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int = len(FEATURES), hidden: int = HIDDEN,
             n_out: int = len(TARGETS)) -> "ImitationNetwork":
        params = {}
        for k, shp in param_shapes(n_in, hidden, n_out).items():
            if len(shp) == 2:
                lim = math.sqrt(6.0 / (shp[0] + shp[1]))
                params[k] = rng.uniform(-lim, lim, shp)
            else:
                params[k] = np.zeros(shp)
        params["bl"][hidden:2 * hidden] = 1.0   # forget-gate bias
        return cls(params, hidden)

    @classmethod
    def zeros(cls, n_in: int = len(FEATURES), hidden: int = HIDDEN, n_out: int = len(TARGETS)):
        return cls({k: np.zeros(s) for k, s in param_shapes(n_in, hidden, n_out).items()}, hidden)

    @property
    def n_in(self) -> int:
        return self.params["W1"].shape[0]

    @property
    def n_out(self) -> int:
        return self.params["W3"].shape[1]

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def zero_carry(self, batch: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        shape = (self.hidden,) if batch is None else (batch, self.hidden)
        return np.zeros(shape), np.zeros(shape)

    def copy(self) -> "ImitationNetwork":
        return ImitationNetwork({k: v.copy() for k, v in self.params.items()}, self.hidden)


def _dense(A, W, b=None):
    """A @ W over the last axis as one 2-D product (stacked matmul is much slower)."""
    out = (A.reshape(-1, A.shape[-1]) @ W).reshape(*A.shape[:-1], W.shape[1])
    return out if b is None else out + b


def _lstm_cell(gx, h, c, Wh, H):
    z = gx + h @ Wh
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = _sigmoid(z[..., 3 * H:])
    c = f * c + i * g
    return o * np.tanh(c), c, (i, f, g, o)


def forward(net: ImitationNetwork, X, carry=None):
    """Stateful evaluation of a (T, n_in) or (B, T, n_in) feature sequence.

    Returns the output sequence and the carry (h, c) after the last step.
    """
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != net.n_in:
        raise ValueError(f"features must have trailing dimension {net.n_in}, got shape {X.shape}")
    B, T, _ = X.shape
    H = net.hidden
    if carry is None:
        h, c = net.zero_carry(B)
    else:
        h, c = (np.array(a, dtype=float).reshape(B, H) for a in carry)
    p = net.params
    # time-major so per-step slices are contiguous
    gx = _dense(np.tanh(_dense(X.transpose(1, 0, 2), p["W1"], p["b1"])), p["Wx"], p["bl"])
    hs = np.empty((T, B, H))
    for t in range(T):
        h, c, _ = _lstm_cell(gx[t], h, c, p["Wh"], H)
        hs[t] = h
    Y = _dense(np.tanh(_dense(hs, p["W2"], p["b2"])), p["W3"], p["b3"]).transpose(1, 0, 2)
    if single:
        return Y[0], (h[0], c[0])
    return Y, (h, c)


def _forward_cache(net: ImitationNetwork, X, h0, c0):
    """Forward pass keeping what the backward pass needs; arrays are time-major."""
    p = net.params
    H = net.hidden
    B, T, _ = X.shape
    Xt = np.ascontiguousarray(X.transpose(1, 0, 2))
    z1 = np.tanh(_dense(Xt, p["W1"], p["b1"]))
    gx = _dense(z1, p["Wx"], p["bl"])
    hs = np.empty((T + 1, B, H))
    cs = np.empty((T + 1, B, H))
    gates = np.empty((T, B, 4 * H))
    hs[0], cs[0] = h0, c0
    for t in range(T):
        h, c, (i, f, g, o) = _lstm_cell(gx[t], hs[t], cs[t], p["Wh"], H)
        hs[t + 1], cs[t + 1] = h, c
        gates[t, :, :H], gates[t, :, H:2 * H], gates[t, :, 2 * H:3 * H], gates[t, :, 3 * H:] = i, f, g, o
    z2 = np.tanh(_dense(hs[1:], p["W2"], p["b2"]))
    Y = _dense(z2, p["W3"], p["b3"])
    return Y.transpose(1, 0, 2), (Xt, z1, hs, cs, gates, z2)


def _backward(net: ImitationNetwork, cache, dY) -> dict[str, np.ndarray]:
    """Gradients of sum(dY * Y) with respect to every parameter (carry-in held fixed)."""
    p = net.params
    H = net.hidden
    Xt, z1, hs, cs, gates, z2 = cache
    T, B, _ = Xt.shape
    dY = np.ascontiguousarray(dY.transpose(1, 0, 2))
    grads = {}
    flat = lambda a: a.reshape(-1, a.shape[-1])  # noqa: E731
    grads["W3"] = flat(z2).T @ flat(dY)
    grads["b3"] = dY.sum((0, 1))
    da2 = _dense(dY, p["W3"].T) * (1.0 - z2 * z2)
    grads["W2"] = flat(hs[1:]).T @ flat(da2)
    grads["b2"] = da2.sum((0, 1))
    dh_out = _dense(da2, p["W2"].T)

    dgates = np.empty((T, B, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    Wh_T = p["Wh"].T
    for t in range(T - 1, -1, -1):
        i = gates[t, :, :H]
        f = gates[t, :, H:2 * H]
        g = gates[t, :, 2 * H:3 * H]
        o = gates[t, :, 3 * H:]
        tc = np.tanh(cs[t + 1])
        dh = dh_out[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dgates[t]
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * cs[t] * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ Wh_T
    grads["Wx"] = flat(z1).T @ flat(dgates)
    grads["Wh"] = flat(hs[:-1]).T @ flat(dgates)
    grads["bl"] = dgates.sum((0, 1))
    da1 = _dense(dgates, p["Wx"].T) * (1.0 - z1 * z1)
    grads["W1"] = flat(Xt).T @ flat(da1)
    grads["b1"] = da1.sum((0, 1))
    return grads


def loss_and_grad(net: ImitationNetwork, X, Y_target, carry=None, l2: float = 0.0):
    """Mean squared error over all outputs plus ``l2 * mean(w^2)`` over weight matrices."""
    X = np.asarray(X, dtype=float)
    Y_target = np.asarray(Y_target, dtype=float)
    if X.ndim == 2:
        X, Y_target = X[None], Y_target[None]
    B = X.shape[0]
    h0, c0 = net.zero_carry(B) if carry is None else carry
    Y, cache = _forward_cache(net, X, h0, c0)
    err = Y - Y_target
    loss = float(np.mean(err * err))
    grads = _backward(net, cache, 2.0 * err / err.size)
    if l2:
        n_w = sum(net.params[k].size for k in WEIGHTS)
        loss += l2 * sum(float(np.sum(net.params[k] ** 2)) for k in WEIGHTS) / n_w
        for k in WEIGHTS:
            grads[k] = grads[k] + 2.0 * l2 * net.params[k] / n_w
    return loss, grads


def gradient_check(net: ImitationNetwork, X, Y_target, carry=None, l2: float = 0.0,
                   eps: float = 1e-6) -> dict[str, float]:
    """Per-tensor relative error between analytic and central-difference gradients."""
    _, grads = loss_and_grad(net, X, Y_target, carry, l2)
    out = {}
    for k, arr in net.params.items():
        num = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            lp, _ = loss_and_grad(net, X, Y_target, carry, l2)
            arr[idx] = orig - eps
            lm, _ = loss_and_grad(net, X, Y_target, carry, l2)
            arr[idx] = orig
            num[idx] = (lp - lm) / (2.0 * eps)
        denom = max(np.linalg.norm(num), np.linalg.norm(grads[k]), 1e-300)
        out[k] = float(np.linalg.norm(num - grads[k]) / denom)
    return out


# --- data --------------------------------------------------------------------

@dataclass(frozen=True)
class ImitationDataset:
    """Aligned feature/target rows; ``sequence`` labels contiguous runs."""

    features: np.ndarray   # (N, 5): T_out, e_Tout, NOx, P_man, speed
    targets: np.ndarray    # (N, 3): FQ, SOI, VGT
    sequence: np.ndarray   # (N,) int

    def __post_init__(self):
        f = np.asarray(self.features, dtype=float)
        t = np.asarray(self.targets, dtype=float)
        s = np.asarray(self.sequence, dtype=int)
        if f.ndim != 2 or f.shape[1] != len(FEATURES) or t.ndim != 2 or t.shape[1] != len(TARGETS):
            raise ValueError(f"expected (N, {len(FEATURES)}) features and (N, {len(TARGETS)}) targets")
        if not f.shape[0] == t.shape[0] == s.shape[0]:
            raise ValueError("features, targets and sequence labels differ in length")
        if f.shape[0] == 0:
            raise ValueError("empty imitation dataset")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(t))):
            raise ValueError("imitation dataset holds non-finite values")
        # each label must form one contiguous block
        starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
        if len(set(s[starts].tolist())) != len(starts):
            raise ValueError("sequence labels must be contiguous")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "sequence", s)

    def __len__(self) -> int:
        return self.features.shape[0]

    def blocks(self) -> list[tuple[int, int]]:
        """(start, stop) row ranges of the sequences, in file order."""
        s = self.sequence
        starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
        stops = np.r_[starts[1:], len(s)]
        return list(zip(starts.tolist(), stops.tolist()))

    def split_index(self, frac: float) -> list[int]:
        """Per sequence, the number of leading rows that belong to the training split."""
        if not 0.0 < frac < 1.0:
            raise ValueError(f"split fraction must lie in (0, 1), got {frac}")
        return [int(round(frac * (b - a))) for a, b in self.blocks()]

    def save_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sequence", *FEATURES, *TARGETS])
            for s, f, t in zip(self.sequence, self.features, self.targets):
                w.writerow([int(s), *(repr(float(v)) for v in f), *(repr(float(v)) for v in t)])

    @classmethod
    def load_csv(cls, path) -> "ImitationDataset":
        cols = read_columns(path, ["sequence", *FEATURES, *TARGETS])
        return cls(np.column_stack([cols[c] for c in FEATURES]),
                   np.column_stack([cols[c] for c in TARGETS]),
                   cols["sequence"].astype(int))


def collect_dataset(logs: Sequence, bounds: BoundSet = DEFAULT_BOUNDS, tol: float = 1e-9) -> ImitationDataset:
    """Feature/target rows from closed-loop MPC logs (one sequence per log).

    Targets are the inputs the controller applied; they must already satisfy
    the input bounds (within ``tol``, which is clipped away).
    """
    if not logs:
        raise ValueError("no closed-loop runs given")
    feats, targs, seq = [], [], []
    for n, lg in enumerate(logs):
        if len(lg) == 0:
            raise ValueError(f"closed-loop run {n} is empty")
        speed = np.broadcast_to(np.asarray(lg.speed, dtype=float), (len(lg),))
        f = np.column_stack([lg["tout"], lg["tref_nm"] - lg["tout"], lg["nox"], lg["pman"], speed])
        t = np.column_stack([lg["fq"], lg["soi"], lg["vgt"]])
        lo, hi = bounds.u_min, bounds.u_max
        bad = np.flatnonzero(np.any((t < lo - tol) | (t > hi + tol), axis=1))
        if bad.size:
            raise ValueError(f"run {n}, cycle {bad[0]}: target {t[bad[0]]} outside input bounds")
        feats.append(f)
        targs.append(np.clip(t, lo, hi))
        seq.append(np.full(len(lg), n))
    return ImitationDataset(np.vstack(feats), np.vstack(targs), np.concatenate(seq))


# --- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 600
    batch_size: int = 512          # sequence windows per step
    learning_rate: float = 0.01
    drop_period: int = 200         # epochs
    drop_factor: float = 0.5
    l2: float = 0.8
    seq_len: int = 32
    window_stride: int = 8         # cycles between consecutive window starts
    train_fraction: float = 0.8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("epochs", "batch_size", "drop_period", "seq_len", "window_stride"):
            v = getattr(self, name)
            if not (isinstance(v, int) and v > 0):
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not self.learning_rate > 0 or self.l2 < 0:
            raise ValueError("learning rate must be positive and l2 nonnegative")
        if not 0.0 < self.drop_factor < 1.0:
            raise ValueError(f"drop_factor must lie in (0, 1), got {self.drop_factor}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch."""
        return self.learning_rate * self.drop_factor ** (epoch // self.drop_period)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingCurves:
    """Row e holds the state after e epochs (row 0: initial network)."""

    loss: list = field(default_factory=list)          # mean minibatch loss of epoch e (nan for e = 0)
    train_nrmse: list = field(default_factory=list)   # per channel, %
    val_nrmse: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", *(f"train_nrmse_{c}" for c in TARGETS),
                        *(f"val_nrmse_{c}" for c in TARGETS)])
            for e, (lo, tr, va) in enumerate(zip(self.loss, self.train_nrmse, self.val_nrmse)):
                w.writerow([e, repr(float(lo)), *(repr(float(v)) for v in tr), *(repr(float(v)) for v in va)])


@dataclass
class ImitationModel:
    """Network plus the min-max scalers of its features and targets."""

    net: ImitationNetwork
    feature_scaler: Scaler
    target_scaler: Scaler

    def predict(self, features, carry=None):
        """Physical outputs for a physical feature sequence (T, 5), statefully."""
        Ys, carry = forward(self.net, self.feature_scaler.transform(features), carry)
        return self.target_scaler.inverse(Ys), carry

    def save(self, path) -> None:
        doc = {
            "format": "imitation-net",
            "version": FORMAT_VERSION,
            "architecture": {"layers": ["fc-tanh", "lstm", "fc-tanh", "fc-linear"],
                             "n_in": self.net.n_in, "hidden": self.net.hidden, "n_out": self.net.n_out,
                             "features": list(FEATURES), "targets": list(TARGETS)},
            "params": {k: v.ravel().tolist() for k, v in self.net.params.items()},
            "feature_scaler": self.feature_scaler.to_dict(),
            "target_scaler": self.target_scaler.to_dict(),
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "ImitationModel":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "imitation-net" or doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: not an imitation-net file of version {FORMAT_VERSION}")
        arch = doc["architecture"]
        shapes = param_shapes(arch["n_in"], arch["hidden"], arch["n_out"])
        params = {}
        for k, shp in shapes.items():
            flat = np.asarray(doc["params"][k], dtype=float)
            if flat.size != int(np.prod(shp)):
                raise ValueError(f"{path}: parameter {k} has {flat.size} values, expected {np.prod(shp)}")
            params[k] = flat.reshape(shp)
        return cls(ImitationNetwork(params, arch["hidden"]),
                   Scaler.from_dict(doc["feature_scaler"]), Scaler.from_dict(doc["target_scaler"]))


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, model: ImitationModel, curves: TrainingCurves):
        super().__init__(f"training loss became non-finite in epoch {epoch}; returning last good network")
        self.epoch = epoch
        self.model = model
        self.curves = curves


class _Adam:
    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k in params:
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * grads[k]
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * grads[k] ** 2
            params[k] -= lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.adam_eps)


def _padded(dataset: ImitationDataset, Xs: np.ndarray):
    blocks = dataset.blocks()
    T = max(b - a for a, b in blocks)
    out = np.zeros((len(blocks), T, Xs.shape[1]))
    for n, (a, b) in enumerate(blocks):
        out[n, :b - a] = Xs[a:b]
    return out


def _full_pass(net: ImitationNetwork, Xpad: np.ndarray):
    """Stateful pass over every sequence; returns outputs and the carry before each step."""
    p = net.params
    H = net.hidden
    B, T, _ = Xpad.shape
    gx = _dense(np.tanh(_dense(np.ascontiguousarray(Xpad.transpose(1, 0, 2)), p["W1"], p["b1"])),
                p["Wx"], p["bl"])
    hs = np.empty((T + 1, B, H))
    cs = np.empty((T + 1, B, H))
    hs[0] = cs[0] = 0.0
    for t in range(T):
        hs[t + 1], cs[t + 1], _ = _lstm_cell(gx[t], hs[t], cs[t], p["Wh"], H)
    Y = _dense(np.tanh(_dense(hs[1:], p["W2"], p["b2"])), p["W3"], p["b3"])
    return Y.transpose(1, 0, 2), hs[:-1].transpose(1, 0, 2), cs[:-1].transpose(1, 0, 2)


def _metrics(dataset, blocks, n_train, Ypad, target_scaler):
    pred_tr, meas_tr, pred_va, meas_va = [], [], [], []
    for n, (a, b) in enumerate(blocks):
        pred = target_scaler.inverse(Ypad[n, :b - a])
        meas = dataset.targets[a:b]
        pred_tr.append(pred[:n_train[n]])
        meas_tr.append(meas[:n_train[n]])
        pred_va.append(pred[n_train[n]:])
        meas_va.append(meas[n_train[n]:])
    pt, mt, pv, mv = (np.vstack(x) for x in (pred_tr, meas_tr, pred_va, meas_va))
    return _channel_nrmse(pt, mt), _channel_nrmse(pv, mv)


def _channel_nrmse(pred, meas) -> list[float]:
    """Per-channel NRMSE in percent; nan where the measured channel is constant."""
    out = []
    for j in range(meas.shape[1]):
        if len(meas) < 2 or np.ptp(meas[:, j]) == 0.0:
            out.append(math.nan)
        else:
            out.append(nrmse(pred[:, j], meas[:, j]))
    return out


def train(dataset: ImitationDataset, cfg: TrainConfig = TrainConfig(),
          net: ImitationNetwork | None = None) -> tuple[ImitationModel, TrainingCurves]:
    """Fit the network to the dataset's training split (leading rows of each sequence).

    Validation rows are scored by continuing the stateful pass past the
    training rows, so the network enters them warm.
    """
    if len(dataset) == 0:
        raise ValueError("empty imitation dataset")
    rng = np.random.default_rng(cfg.seed)
    blocks = dataset.blocks()
    n_train = dataset.split_index(cfg.train_fraction)
    train_rows = np.concatenate([np.arange(a, a + k) for (a, _), k in zip(blocks, n_train)])
    # a single-speed dataset has a constant speed column
    fs = Scaler.fit(dataset.features[train_rows], constant_span=1.0)
    ts = Scaler.fit(dataset.targets[train_rows], constant_span=1.0)
    Xs = fs.transform(dataset.features)
    Ys = ts.transform(dataset.targets)
    Xpad = _padded(dataset, Xs)

    L = cfg.seq_len
    windows = [(n, s) for n, k in enumerate(n_train) for s in range(0, k - L + 1, cfg.window_stride)]
    if not windows:
        raise ValueError(f"no training sequence is as long as seq_len={L}")
    idx = np.array([[a + s + j for j in range(L)] for (n, s) in windows for a in [blocks[n][0]]])
    Xw, Yw = Xs[idx], Ys[idx]

    net = net.copy() if net is not None else ImitationNetwork.init(rng)
    model = ImitationModel(net, fs, ts)
    adam = _Adam(net.params, cfg)
    curves = TrainingCurves()

    win_seq = np.array([n for n, _ in windows])
    win_start = np.array([s for _, s in windows])
    Ypad, hcar, ccar = _full_pass(net, Xpad)
    tr, va = _metrics(dataset, blocks, n_train, Ypad, ts)
    curves.loss.append(math.nan)
    curves.train_nrmse.append(tr)
    curves.val_nrmse.append(va)
    for epoch in range(cfg.epochs):
        good = net.copy()
        h0 = hcar[win_seq, win_start]
        c0 = ccar[win_seq, win_start]
        order = rng.permutation(len(windows))
        lr = cfg.lr_at(epoch)
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            sel = order[b:b + cfg.batch_size]
            loss, grads = loss_and_grad(net, Xw[sel], Yw[sel], (h0[sel], c0[sel]), cfg.l2)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(epoch + 1, ImitationModel(good, fs, ts), curves)
            adam.step(net.params, grads, lr)
            losses.append(loss * len(sel))
        Ypad, hcar, ccar = _full_pass(net, Xpad)
        tr, va = _metrics(dataset, blocks, n_train, Ypad, ts)
        curves.loss.append(sum(losses) / len(order))
        curves.train_nrmse.append(tr)
        curves.val_nrmse.append(va)
    return model, curves


def replay(model: ImitationModel, dataset: ImitationDataset) -> np.ndarray:
    """Stateful open-loop predictions for every row of every sequence (physical units)."""
    out = np.empty_like(dataset.targets)
    for a, b in dataset.blocks():
        out[a:b], _ = model.predict(dataset.features[a:b])
    return out


# --- deployment --------------------------------------------------------------

@dataclass
class ImitationStepInfo:
    slack: float = math.nan
    cost: float = math.nan
    solve_us: float = 0.0
    converged: bool = True


class ImitationController:
    """Runs the network one cycle at a time with a persistent carry."""

    def __init__(self, model: ImitationModel, bounds: BoundSet = DEFAULT_BOUNDS, name: str = "imitative"):
        self.model = model
        self.bounds = bounds
        self.name = name
        p = model.net.params
        self._p = p
        self._H = model.net.hidden
        self._fs = model.feature_scaler
        self._ts = model.target_scaler
        self.info = ImitationStepInfo()
        self.reset()

    def reset(self, u0=None) -> None:
        self.h, self.c = self.model.net.zero_carry()
        self.info = ImitationStepInfo()

    def raw_output(self, meas, t_ref: float, speed: float) -> np.ndarray:
        """One network step on physical measurements; unclamped physical output."""
        x = np.asarray(meas.x if hasattr(meas, "x") else meas, dtype=float)
        feat = np.array([x[0], float(t_ref) - x[0], x[2], x[1], float(speed)])
        if not np.all(np.isfinite(feat)):
            raise FloatingPointError(f"non-finite controller input {feat}")
        p, H = self._p, self._H
        z1 = np.tanh(self._fs.transform(feat) @ p["W1"] + p["b1"])
        self.h, self.c, _ = _lstm_cell(z1 @ p["Wx"] + p["bl"], self.h, self.c, p["Wh"], H)
        y = np.tanh(self.h @ p["W2"] + p["b2"]) @ p["W3"] + p["b3"]
        return self._ts.inverse(y)

    def step(self, meas, t_ref: float, speed: float) -> np.ndarray:
        t0 = time.perf_counter_ns()
        u = self.bounds.clip_input(self.raw_output(meas, t_ref, speed))
        self.info = ImitationStepInfo(solve_us=(time.perf_counter_ns() - t0) / 1e3)
        return u
