"""Synthetic targets, the online training loop, and the desk-scale insight
reproductions: head/width roles on sparse Boolean tasks and the heavy- vs
light-tail kernel learning splits.

Targets follow the reference setups: Boolean tasks read out at the largest
memory position (so the lags are the gaps between the marked positions), and
convolution tasks read out at the final position over the full history.
Training is online (fresh batch per step) with squared loss and AdamW.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, dot_last, linear_last, masked_softmax, weighted_sum
from .kernels import ExpDecay, PolyDecay
from .model import RpeKind, rpe_value
from .optim import AdamW
from .tapemodel import softplus

BOOLEAN_POSITIONS = (48, 56, 99)     # 1-indexed marked positions
DEFAULT_LENGTH = 1000


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

@dataclass
class TargetSpec:
    kind: str
    length: int
    readout_pos: int            # 0-indexed position whose output is trained
    evaluator: object           # callable (B, L) -> (B,)
    meta: dict = field(default_factory=dict)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return self.evaluator(X)


def make_boolean_target(kind: str, positions=BOOLEAN_POSITIONS,
                        teacher_width: int = 64, seed: int = 0,
                        length: int = DEFAULT_LENGTH) -> TargetSpec:
    """Sparse Boolean targets on x in {+-1}^length, read out at the largest
    marked position.

    fixed-lags:     sum_k relu(<w_k, (x_p1, x_p2, x_p3)>), w_k ~ N(0, I_3)
    single-memory:  sum_k relu(w_k * x_p3), w_k ~ N(0, 1)
    linear-3:       x_p1 + x_p2 + x_p3
    """
    if max(positions) > length:
        raise ValueError("marked positions must lie inside the sequence")
    idx = np.array(positions) - 1
    rng = np.random.default_rng(seed)
    if kind == "fixed-lags":
        W = rng.normal(size=(teacher_width, 3))

        def ev(X):
            return np.maximum(X[:, idx] @ W.T, 0.0).sum(axis=1)
        meta = {"W": W}
    elif kind == "single-memory":
        w = rng.normal(size=teacher_width)

        def ev(X):
            return np.maximum(np.outer(X[:, idx[-1]], w), 0.0).sum(axis=1)
        meta = {"w": w}
    elif kind == "linear-3":
        def ev(X):
            return X[:, idx].sum(axis=1)
        meta = {}
    else:
        raise ValueError(f"unknown boolean target kind {kind!r}")
    return TargetSpec(kind=kind, length=length, readout_pos=int(idx[-1]),
                      evaluator=ev, meta=meta)


def make_conv_target(kernel: str, length: int = DEFAULT_LENGTH) -> TargetSpec:
    """Full-history weighted sum y = sum_{s=1..L} x_s rho(L - s), read out at
    the last position. kernel: 'heavy' (t^-0.5) or 'light' (e^-5t)."""
    if kernel == "heavy":
        rho = PolyDecay(1.0, 0.5)
    elif kernel == "light":
        rho = ExpDecay(1.0, 5.0)
    else:
        raise ValueError(f"unknown conv kernel {kernel!r}")
    lags = np.arange(length, dtype=np.float64)        # lag of each position s
    w = rho.eval(lags)[::-1].copy()                   # weight on x_s is rho(L-s)

    def ev(X):
        return X @ w
    return TargetSpec(kind=f"conv-{kernel}", length=length,
                      readout_pos=length - 1, evaluator=ev,
                      meta={"rho": rho})


def sample_batch(alphabet: str, length: int, batch: int, seed: int) -> np.ndarray:
    """i.i.d. uniform tokens, deterministic per seed. 'pm1' gives (B, L)
    signs; 'ball' gives (B, L, d=3) vectors of norm <= 1."""
    rng = np.random.default_rng(seed)
    if alphabet == "pm1":
        return rng.choice([-1.0, 1.0], size=(batch, length))
    if alphabet == "ball":
        X = rng.normal(size=(batch, length, 3))
        r = np.linalg.norm(X, axis=2, keepdims=True)
        return X / np.maximum(r, 1.0)
    raise ValueError(f"unknown alphabet {alphabet!r}")


# ---------------------------------------------------------------------------
# trainable single-layer models (fast last-position forward)
# ---------------------------------------------------------------------------

class SingleLayerRegressor:
    """Single-layer transformer trained on the output at one position.

    Embedding (D x 1) + H softmax attention heads (dp or dp-free) + readout
    FFN of width m. The decay parameter p of every head is stored raw and
    mapped through softplus.
    """

    def __init__(self, H: int, m: int, rpe: str, readout_pos: int,
                 score_kind: str = "dpf", D: int = 8, seed: int = 0,
                 init_p_spread: float = 2.0):
        self.H, self.m, self.D = H, m, D
        self.rpe = RpeKind(variant=rpe)
        self.score_kind = score_kind
        self.pos = readout_pos
        rng = np.random.default_rng(seed)
        lags = np.arange(readout_pos + 1, dtype=np.float64)
        phi = rpe_value(self.rpe, lags)
        self.adm = np.where(np.isfinite(phi))[0]
        self.phi = phi[self.adm]
        self.params: list[Tensor] = []

        def par(a):
            t = Tensor(a, requires_grad=True)
            self.params.append(t)
            return t

        self.W_E = par(rng.normal(scale=1.0, size=D))
        self.b_E = par(np.zeros(D))
        # spread initial decays so heads start at distinct length scales
        self.p_raw = [par(np.float64(v)) for v in
                      np.linspace(-init_p_spread, init_p_spread, H)]
        self.W_V = [par(rng.normal(scale=0.3 / math.sqrt(D), size=(D, D)))
                    for _ in range(H)]
        if score_kind == "dp":
            self.W_Q = [par(rng.normal(scale=0.3 / math.sqrt(D), size=(D, D)))
                        for _ in range(H)]
            self.W_K = [par(rng.normal(scale=0.3 / math.sqrt(D), size=(D, D)))
                        for _ in range(H)]
        self.W_O = par(rng.normal(scale=0.3 / math.sqrt(D), size=(D, D)))
        self.A = par(rng.normal(scale=0.2 / math.sqrt(m), size=m))
        self.B = par(rng.normal(scale=1.0 / math.sqrt(D), size=(m, D)))
        self.c = par(np.zeros(m))

    def forward(self, X: np.ndarray) -> Tensor:
        Bn = X.shape[0]
        xw = X[:, self.pos - self.adm]                 # (B, n) tokens by lag
        x_t = X[:, self.pos]
        V = Tensor(xw[:, :, None]) * self.W_E + self.b_E     # (B, n, D)
        q_state = Tensor(x_t[:, None]) * self.W_E + self.b_E  # (B, D)
        att = None
        ones = Tensor(np.ones((Bn, len(self.adm))))
        for h in range(self.H):
            p = softplus(self.p_raw[h])
            base = p * Tensor(self.phi)
            if self.score_kind == "dp":
                keys = linear_last(V, self.W_K[h])
                q = q_state @ self.W_Q[h].T
                logits = dot_last(keys, q) + base * ones
            else:
                logits = base * ones
            w = masked_softmax(logits)
            ctx = weighted_sum(V, w)                   # (B, D)
            out_h = ctx @ self.W_V[h].T
            att = out_h if att is None else att + out_h
        h_state = q_state + att @ self.W_O.T
        pre = (h_state @ self.B.T) + self.c
        return pre.relu() @ self.A                     # (B,)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X).data


class ConvRegressor:
    """FFN-free, DP-free single-layer model: y = sum_h u_h <softmax(p_h phi), x>.

    The exact learner for a single softmax-normalized decay kernel; used for
    the heavy/light tail experiments.
    """

    def __init__(self, H: int, rpe: str, readout_pos: int, seed: int = 0):
        self.H = H
        self.rpe = RpeKind(variant=rpe)
        self.pos = readout_pos
        rng = np.random.default_rng(seed)
        lags = np.arange(readout_pos + 1, dtype=np.float64)
        phi = rpe_value(self.rpe, lags)
        self.adm = np.where(np.isfinite(phi))[0]
        self.phi = phi[self.adm]
        self.params = []

        def par(a):
            t = Tensor(a, requires_grad=True)
            self.params.append(t)
            return t

        self.p_raw = [par(np.float64(v)) for v in np.linspace(-1.0, 2.0, H)]
        self.u = [par(np.float64(v)) for v in rng.normal(scale=0.5, size=H)]

    def forward(self, X: np.ndarray) -> Tensor:
        xw = X[:, self.pos - self.adm]                 # (B, n)
        out = None
        for h in range(self.H):
            p = softplus(self.p_raw[h])
            logits = p * Tensor(self.phi)
            w = masked_softmax(logits)                 # (n,)
            ctx = Tensor(xw) @ w                       # (B,)
            term = self.u[h] * ctx
            out = term if out is None else out + term
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X).data

    def learned_p(self) -> np.ndarray:
        return np.array([float(np.logaddexp(0.0, t.data)) for t in self.p_raw])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    iterations: int = 3000
    batch: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    eval_every: int = 100
    eval_batch: int = 512
    seed: int = 0
    val_seed: int = 10_000


@dataclass
class TrainResult:
    final_loss: float
    curve: list                 # (step, validation loss)
    wall_clock: float
    diverged: bool = False


def train(model, target: TargetSpec, config: TrainConfig) -> TrainResult:
    """Online training with squared loss; validation on a held-out seed.

    The reported final loss is the median of the last five validation
    evaluations. Aborts (diverged=True) if the loss exceeds 1e6.
    """
    t0 = time.time()
    opt = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay)
    Xval = sample_batch("pm1", target.length, config.eval_batch, config.val_seed)
    yval = target(Xval)
    curve = []

    def validate(step):
        pred = model.predict(Xval)
        vl = float(np.mean((pred - yval) ** 2))
        curve.append((step, vl))
        return vl

    validate(0)
    for it in range(config.iterations):
        X = sample_batch("pm1", target.length, config.batch,
                         config.seed + 7919 * (it + 1))
        y = target(X)
        opt.zero_grad()
        diff = model.forward(X) - Tensor(y)
        loss = (diff * diff).mean()
        if not np.isfinite(loss.data) or float(loss.data) > 1e6:
            return TrainResult(final_loss=float("inf"), curve=curve,
                               wall_clock=time.time() - t0, diverged=True)
        loss.backward()
        opt.step()
        if (it + 1) % config.eval_every == 0:
            validate(it + 1)
    tail = [v for _, v in curve[-5:]]
    return TrainResult(final_loss=float(np.median(tail)), curve=curve,
                       wall_clock=time.time() - t0)


# ---------------------------------------------------------------------------
# insight reproduction grids
# ---------------------------------------------------------------------------

@dataclass
class InsightConfig:
    insight_id: str
    length: int = DEFAULT_LENGTH
    iterations: int = 3000
    batch: int = 64
    seed: int = 0
    lr: float = 1e-3
    embed_dim: int = 8

    def train_config(self, **over) -> TrainConfig:
        base = TrainConfig(iterations=self.iterations, batch=self.batch,
                           lr=self.lr, seed=self.seed)
        for k, v in over.items():
            setattr(base, k, v)
        return base


@dataclass
class CellResult:
    label: str
    final_loss: float
    wall_clock: float
    config: dict
    diverged: bool = False
    extra: dict = field(default_factory=dict)


@dataclass
class ExperimentReport:
    insight_id: str
    cells: list
    verdicts: dict
    seed: int
    wall_clock: float

    def passed(self) -> bool:
        return all(self.verdicts.values())

    def to_dict(self) -> dict:
        return {
            "insight_id": self.insight_id,
            "seed": self.seed,
            "wall_clock": self.wall_clock,
            "cells": [{"label": c.label, "final_loss": c.final_loss,
                       "wall_clock": c.wall_clock, "diverged": c.diverged,
                       "config": c.config, "extra": c.extra} for c in self.cells],
            "verdicts": {k: bool(v) for k, v in self.verdicts.items()},
        }


INSIGHT_IDS = ("1b", "2a", "2b", "3a", "4a", "4b")
OUT_OF_SCOPE_INSIGHTS = ("1a", "3b")


def _run_cell(label, model, target, cfg, extra_fn=None) -> CellResult:
    res = train(model, target, cfg)
    extra = extra_fn(model) if extra_fn else {}
    return CellResult(label=label, final_loss=res.final_loss,
                      wall_clock=res.wall_clock,
                      config={"iterations": cfg.iterations, "batch": cfg.batch,
                              "lr": cfg.lr, "seed": cfg.seed},
                      diverged=res.diverged, extra=extra)


def run_insight(insight_id: str, config: InsightConfig | None = None) -> ExperimentReport:
    """Run one insight's grid and compute its trend verdicts."""
    if insight_id in OUT_OF_SCOPE_INSIGHTS:
        raise ValueError(f"insight {insight_id} needs full-scale pretraining; "
                         "out of scope at desk scale")
    if insight_id not in INSIGHT_IDS:
        raise ValueError(f"unknown insight id {insight_id!r}")
    cfg = config or InsightConfig(insight_id=insight_id)
    t0 = time.time()
    cells: list[CellResult] = []
    verdicts: dict[str, bool] = {}

    if insight_id == "1b":
        target = make_boolean_target("fixed-lags", seed=cfg.seed, length=cfg.length)
        for H, m in [(2, 16), (8, 64), (32, 256)]:
            model = SingleLayerRegressor(H, m, "log", target.readout_pos,
                                         D=cfg.embed_dim, seed=cfg.seed)
            cells.append(_run_cell(f"H={H},m={m}", model, target, cfg.train_config()))
        losses = [c.final_loss for c in cells]
        verdicts["ordered"] = losses[2] < losses[1] < losses[0]

    elif insight_id == "2a":
        target = make_boolean_target("single-memory", seed=cfg.seed, length=cfg.length)
        for H, m in [(8, 8), (8, 64), (8, 512), (64, 8), (512, 8)]:
            model = SingleLayerRegressor(H, m, "log", target.readout_pos,
                                         D=cfg.embed_dim, seed=cfg.seed)
            cells.append(_run_cell(f"H={H},m={m}", model, target, cfg.train_config()))
        by = {c.label: c.final_loss for c in cells}
        verdicts["m_sweep_ratio"] = by["H=8,m=8"] / max(by["H=8,m=512"], 1e-300) >= 10.0
        hs = [by["H=8,m=8"], by["H=64,m=8"], by["H=512,m=8"]]
        verdicts["h_sweep_flat"] = max(hs) / max(min(hs), 1e-300) <= 2.0

    elif insight_id == "2b":
        target = make_boolean_target("linear-3", seed=cfg.seed, length=cfg.length)
        for H, m in [(2, 2), (2, 64), (2, 256), (64, 2), (256, 2)]:
            model = SingleLayerRegressor(H, m, "log", target.readout_pos,
                                         D=cfg.embed_dim, seed=cfg.seed)
            cells.append(_run_cell(f"H={H},m={m}", model, target, cfg.train_config()))
        by = {c.label: c.final_loss for c in cells}
        verdicts["h_sweep_reaches"] = by["H=256,m=2"] <= 1e-5
        verdicts["m_sweep_stuck"] = min(by["H=2,m=2"], by["H=2,m=64"],
                                        by["H=2,m=256"]) >= 0.5

    elif insight_id == "3a":
        target = make_boolean_target("fixed-lags", seed=cfg.seed, length=cfg.length)
        for score in ("dp", "dpf"):
            for H, m in [(2, 16), (8, 64), (32, 256)]:
                model = SingleLayerRegressor(H, m, "log", target.readout_pos,
                                             score_kind=score, D=cfg.embed_dim,
                                             seed=cfg.seed)
                cells.append(_run_cell(f"{score}:H={H},m={m}", model, target,
                                       cfg.train_config()))
        by = {c.label: c.final_loss for c in cells}
        verdicts["dpf_reaches"] = by["dpf:H=32,m=256"] <= 0.05
        verdicts["dp_dpf_gap"] = abs(by["dp:H=32,m=256"] - by["dpf:H=32,m=256"]) <= 0.05

    elif insight_id in ("4a", "4b"):
        kernel = "heavy" if insight_id == "4a" else "light"
        target = make_conv_target(kernel, length=cfg.length)
        for rpe in ("log", "lin"):
            for H in (1, 4, 16, 64):
                model = ConvRegressor(H, rpe, target.readout_pos, seed=cfg.seed)
                cells.append(_run_cell(
                    f"{rpe}:H={H}", model, target, cfg.train_config(),
                    extra_fn=lambda mm: {"p": mm.learned_p().tolist(),
                                         "u": [float(t.data) for t in mm.u]}))
        by = {c.label: c.final_loss for c in cells}
        if insight_id == "4a":
            verdicts["log_learns"] = by["log:H=1"] <= 1e-4
            verdicts["lin_stalls"] = by["lin:H=4"] >= 1e-2
        else:
            verdicts["lin_learns"] = by["lin:H=1"] <= 1e-5
            verdicts["log_gap"] = by["log:H=1"] >= 10.0 * 1e-5
            cell = next(c for c in cells if c.label == "lin:H=1")
            p = np.array(cell.extra["p"])
            u = np.abs(np.array(cell.extra["u"]))
            verdicts["p_recovered"] = abs(float(p[np.argmax(u)]) - 5.0) <= 0.5

    return ExperimentReport(insight_id=insight_id, cells=cells, verdicts=verdicts,
                            seed=cfg.seed, wall_clock=time.time() - t0)
