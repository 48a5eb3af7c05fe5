"""The transformer variant zoo: softmax vs normalization-free attention,
dot-product / dot-product-free / TMX scores, lin / log / T5-bucket relative
positional bias, and the precision feed-forward modes.

`model_forward` is the reference causal evaluation of a single sequence;
`batch_outputs_at` evaluates a batch at one position with the same math,
vectorized. Positions before the start of the sequence are zero history.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

NEG_INF = -np.inf


# ---------------------------------------------------------------------------
# relative positional bias
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RpeKind:
    """Positional-bias law. variant: 'lin' | 'log' | 't5'; t5 uses (B, D)."""
    variant: str = "lin"
    bucket_B: int = 8
    bucket_D: int = 128

    def __post_init__(self):
        if self.variant not in ("lin", "log", "t5"):
            raise ValueError(f"unknown RPE variant {self.variant!r}")


def rpe_value(kind: RpeKind, lag) -> np.ndarray | float:
    """phi(lag): -lag (lin, lag >= 0), -log(lag) (log, lag >= 1), or the
    negative clamped T5 bucket index. Out-of-domain lags map to -inf."""
    scalar = np.isscalar(lag)
    z = np.atleast_1d(np.asarray(lag, dtype=np.float64))
    out = np.full_like(z, NEG_INF)
    if kind.variant == "lin":
        ok = z >= 0
        out[ok] = -z[ok]
    elif kind.variant == "log":
        ok = z >= 1
        out[ok] = -np.log(z[ok])
    else:
        B, Dd = kind.bucket_B, kind.bucket_D
        ok = z >= 0
        zz = z[ok]
        bucket = np.empty_like(zz)
        near = zz < B
        bucket[near] = zz[near]
        far = ~near
        with np.errstate(divide="ignore"):
            bucket[far] = B + np.floor(B * np.log(zz[far] / B) / np.log(Dd / B))
        bucket = np.minimum(bucket, 2 * B - 1)
        out[ok] = -bucket
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class HeadParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    p: float = 0.0
    w_tmx: np.ndarray | None = None

    @classmethod
    def zeros(cls, D: int) -> "HeadParams":
        return cls(W_Q=np.zeros((D, D)), W_K=np.zeros((D, D)),
                   W_V=np.zeros((D, D)), p=0.0, w_tmx=np.zeros(D))


@dataclass
class FfnParams:
    A: np.ndarray      # (width, out_dim) output weights a_k
    B: np.ndarray      # (width, D) input weights b_k
    c: np.ndarray      # (width,) biases

    @classmethod
    def zeros(cls, width: int, D: int, out_dim: int) -> "FfnParams":
        return cls(A=np.zeros((width, out_dim)), B=np.zeros((width, D)),
                   c=np.zeros(width))


@dataclass
class LayerParams:
    heads: list
    W_O: np.ndarray
    ffn: FfnParams
    use_attn_residual: bool = True
    use_ffn_residual: bool = True
    precision: str | None = None       # None | 'round' | 'logexp'


@dataclass
class ModelSpec:
    L: int
    H: int
    m: int
    d: int
    D: int
    attention_norm: str = "softmax"     # 'softmax' | 'normfree'
    score_kind: str = "dpf"             # 'dp' | 'dpf' | 'tmx'
    rpe: RpeKind = field(default_factory=RpeKind)
    precision: str = "none"             # documentation of the variant in use
    horizon: int = 1024
    p_map: str = "identity"             # 'identity' | 'softplus'

    def __post_init__(self):
        if self.attention_norm not in ("softmax", "normfree"):
            raise ValueError(f"unknown attention_norm {self.attention_norm!r}")
        if self.score_kind not in ("dp", "dpf", "tmx"):
            raise ValueError(f"unknown score_kind {self.score_kind!r}")
        if self.p_map not in ("identity", "softplus"):
            raise ValueError(f"unknown p_map {self.p_map!r}")


@dataclass
class ModelWeights:
    W_E: np.ndarray
    b_E: np.ndarray
    layers: list

    def check_shapes(self, spec: ModelSpec) -> None:
        if self.W_E.shape != (spec.D, spec.d) or self.b_E.shape != (spec.D,):
            raise ValueError("embedding shape mismatch with spec")
        if len(self.layers) != spec.L:
            raise ValueError(f"expected {spec.L} layers, got {len(self.layers)}")
        for layer in self.layers:
            if len(layer.heads) != spec.H:
                raise ValueError("head count mismatch with spec")
            for h in layer.heads:
                if h.W_V.shape != (spec.D, spec.D):
                    raise ValueError("W_V shape mismatch")


def effective_p(p_raw: float, spec: ModelSpec) -> float:
    if spec.p_map == "softplus":
        return float(np.logaddexp(0.0, p_raw))
    return float(p_raw)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _scale_phi(p: float, phi: np.ndarray) -> np.ndarray:
    """p * phi, keeping -inf entries as -inf even at p = 0 (the lag stays
    inadmissible; the mask is structural, not a numeric product)."""
    out = np.full_like(phi, NEG_INF)
    ok = np.isfinite(phi)
    out[ok] = p * phi[ok]
    return out


def attention_scores(head: HeadParams, spec: ModelSpec, x_t: np.ndarray,
                     history: np.ndarray) -> np.ndarray:
    """Logits per lag s for one position. history[s] = x_{t-s}, s = 0..S.

    dp:  <W_Q x_t, W_K x_{t-s}> + p*phi(s);  dpf: p*phi(s);
    tmx: p*(phi(s) - phi(w^T x_t)).  -inf is a legal logit.
    """
    S = history.shape[0]
    s = np.arange(S, dtype=np.float64)
    phi = rpe_value(spec.rpe, s)
    p = effective_p(head.p, spec)
    if spec.score_kind == "dpf":
        return _scale_phi(p, phi)
    if spec.score_kind == "dp":
        q = head.W_Q @ x_t
        k = history @ head.W_K.T
        base = _scale_phi(p, phi)
        out = np.where(np.isfinite(base), base + k @ q, NEG_INF)
        return out
    off = rpe_value(spec.rpe, float(head.w_tmx @ x_t))
    if not np.isfinite(off):
        return np.full_like(phi, np.inf if np.any(np.isfinite(phi)) else NEG_INF)
    return _scale_phi(p, phi - off)


def _phi_lags(spec: ModelSpec, n: int) -> np.ndarray:
    return rpe_value(spec.rpe, np.arange(n, dtype=np.float64))


def _softmax_rows(logits: np.ndarray, flags: list | None = None) -> np.ndarray:
    """Row-wise masked softmax; rows that are entirely -inf give zero weight."""
    m = np.max(logits, axis=-1, keepdims=True)
    dead = ~np.isfinite(m[..., 0])
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(logits - m)
    denom = e.sum(axis=-1, keepdims=True)
    w = np.zeros_like(e)
    alive = denom[..., 0] > 0
    w[alive] = e[alive] / denom[alive]
    if np.any(dead) and flags is not None:
        flags.append("empty-history head output zeroed")
    return w


def attn_forward(layer: LayerParams, spec: ModelSpec, seq: np.ndarray,
                 flags: list | None = None) -> np.ndarray:
    """Multi-head attention over an embedded sequence (L, D) -> (L, D).

    Causal, lags capped at spec.horizon. Softmax mode normalizes per
    (head, position); normalization-free mode sums exp-weighted values.
    """
    L, D = seq.shape
    lag = np.arange(L)[:, None] - np.arange(L)[None, :]      # lag[t, t'] = t - t'
    visible = (lag >= 0) & (lag <= spec.horizon)
    phi = np.full((L, L), NEG_INF)
    phi[visible] = rpe_value(spec.rpe, lag[visible].astype(np.float64))
    total = np.zeros((L, D))
    for head in layer.heads:
        p = effective_p(head.p, spec)
        logits = _scale_phi(p, phi)
        if spec.score_kind == "dp":
            q = seq @ head.W_Q.T
            k = seq @ head.W_K.T
            logits = np.where(np.isfinite(logits), logits + q @ k.T, NEG_INF)
        elif spec.score_kind == "tmx":
            off = rpe_value(spec.rpe, seq @ head.w_tmx)
            if np.any(~np.isfinite(off)):
                raise FloatingPointError("tmx offset phi(w.x) is -inf at some position")
            logits = _scale_phi(p, phi - off[:, None])
            logits[~visible] = NEG_INF
        if spec.attention_norm == "softmax":
            w = _softmax_rows(logits, flags)
        else:
            if np.any(np.isposinf(logits)):
                raise FloatingPointError("normalization-free attention: +inf logit")
            w = np.exp(logits, where=np.isfinite(logits), out=np.zeros_like(logits))
        total += (w @ seq) @ head.W_V.T
    return total @ layer.W_O.T


# ---------------------------------------------------------------------------
# feed-forward
# ---------------------------------------------------------------------------

def ffn_forward(ffn: FfnParams, x: np.ndarray) -> np.ndarray:
    """sum_k a_k * relu(b_k . x + c_k); x may be (..., D)."""
    pre = x @ ffn.B.T + ffn.c
    return np.maximum(pre, 0.0) @ ffn.A


def round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def ffn_precision_forward(ffn: FfnParams, x: np.ndarray, mode: str) -> np.ndarray:
    """Precision FFN: 'round' -> nearest integer (half-up); 'logexp' ->
    log of the rounded exponential, the fine-rounding operator."""
    raw = ffn_forward(ffn, x)
    if mode == "round":
        return round_half_up(raw)
    if mode == "logexp":
        e = np.exp(raw)
        if np.any(~np.isfinite(e)):
            bad = int(np.argwhere(~np.isfinite(np.atleast_1d(e)))[0][-1])
            raise FloatingPointError(f"logexp rounding overflow at coordinate {bad}")
        return np.log(round_half_up(e))
    raise ValueError(f"unknown precision mode {mode!r}")


def _apply_ffn(layer: LayerParams, x: np.ndarray) -> np.ndarray:
    if layer.precision is None:
        return ffn_forward(layer.ffn, x)
    return ffn_precision_forward(layer.ffn, x, layer.precision)


# ---------------------------------------------------------------------------
# full forward passes
# ---------------------------------------------------------------------------

def model_forward(spec: ModelSpec, weights: ModelWeights, X: np.ndarray,
                  flags: list | None = None) -> np.ndarray:
    """Reference causal evaluation of one sequence X (L, d) -> outputs (L,)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    weights.check_shapes(spec)
    state = X @ weights.W_E.T + weights.b_E
    for layer in weights.layers:
        att = attn_forward(layer, spec, state, flags)
        h = state + att if layer.use_attn_residual else att
        f = _apply_ffn(layer, h)
        state = h + f if layer.use_ffn_residual else f
    out = state
    if out.ndim == 2 and out.shape[1] == 1:
        return out[:, 0]
    return out


def _head_context_at(head: HeadParams, spec: ModelSpec, states: np.ndarray,
                     q_state: np.ndarray) -> np.ndarray:
    """One head's context at a single position for a batch.

    states: (B, W, D) visible window, index 0 = current token (lag 0);
    q_state: (B, D) the querying position's state. Returns (B, D).
    """
    B, W, D = states.shape
    phi = _phi_lags(spec, W)
    p = effective_p(head.p, spec)
    base = _scale_phi(p, phi)
    if spec.score_kind == "dpf":
        # weights are batch-independent: compute once and contract
        if spec.attention_norm == "softmax":
            w1 = _softmax_rows(base[None, :])[0]
        else:
            if np.any(np.isposinf(base)):
                raise FloatingPointError("normalization-free attention: +inf logit")
            w1 = np.exp(base, where=np.isfinite(base), out=np.zeros_like(base))
        ctx = np.einsum("w,bwd->bd", w1, states, optimize=True)
        return ctx @ head.W_V.T
    if spec.score_kind == "dp":
        q = q_state @ head.W_Q.T
        k = np.einsum("bwd,ed->bwe", states, head.W_K, optimize=True)
        logits = np.einsum("bwe,be->bw", k, q, optimize=True)
        logits = np.where(np.isfinite(base)[None, :], logits + base[None, :], NEG_INF)
    else:
        off = rpe_value(spec.rpe, q_state @ head.w_tmx)
        if np.any(~np.isfinite(off)):
            raise FloatingPointError("tmx offset phi(w.x) is -inf at some position")
        diff = phi[None, :] - off[:, None]
        logits = np.where(np.isfinite(diff), p * diff, NEG_INF)
    if spec.attention_norm == "softmax":
        w = _softmax_rows(logits)
    else:
        if np.any(np.isposinf(logits)):
            raise FloatingPointError("normalization-free attention: +inf logit")
        w = np.exp(logits, where=np.isfinite(logits), out=np.zeros_like(logits))
    ctx = np.einsum("bw,bwd->bd", w, states, optimize=True)
    return ctx @ head.W_V.T


def _attention_is_inert(layer: LayerParams) -> bool:
    if not np.any(layer.W_O):
        return True
    return all(not np.any(h.W_V) for h in layer.heads)


def batch_outputs_at(spec: ModelSpec, weights: ModelWeights, X: np.ndarray,
                     t: int) -> np.ndarray:
    """Model outputs at position t for a batch X (B, L, d) -> (B,).

    Layers whose attention is inert (zero W_O or zero values) are evaluated
    position-wise; otherwise attention is evaluated at every position the
    deeper layers can see.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, :, None]
    B, L, _ = X.shape
    if not 0 <= t < L:
        raise ValueError("position out of range")
    weights.check_shapes(spec)
    state = X @ weights.W_E.T + weights.b_E        # (B, L, D)

    # positions each layer must expose, walking backwards from the output
    active = [not _attention_is_inert(layer) for layer in weights.layers]
    need_after: list[np.ndarray] = [None] * spec.L
    need = np.array([t])
    for li in range(spec.L - 1, -1, -1):
        need_after[li] = need
        if active[li]:
            lo = max(0, int(need.min()) - spec.horizon)
            need = np.arange(lo, int(need.max()) + 1)

    cur_positions = np.arange(0, t + 1)   # layer inputs available at these positions
    for li, layer in enumerate(weights.layers):
        out_positions = need_after[li]
        if active[li]:
            att = np.zeros((B, len(out_positions), spec.D))
            pos_index = {p: i for i, p in enumerate(cur_positions)}
            live_heads = [h for h in layer.heads if np.any(h.W_V)]
            for j, pos in enumerate(out_positions):
                W = min(pos, spec.horizon) + 1
                win_pos = [pos_index[pos - s] for s in range(W)]
                win = state[:, win_pos, :]
                q_state = state[:, pos_index[pos], :]
                acc = np.zeros((B, spec.D))
                for head in live_heads:
                    acc += _head_context_at(head, spec, win, q_state)
                att[:, j, :] = acc @ layer.W_O.T
            state = state[:, [pos_index[p] for p in out_positions], :]
        else:
            keep = np.isin(cur_positions, out_positions)
            state = state[:, keep, :]
            att = np.zeros_like(state)
        h = state + att if layer.use_attn_residual else att
        f = _apply_ffn(layer, h)
        state = h + f if layer.use_ffn_residual else f
        cur_positions = out_positions
    out = state[:, 0, :]
    return out[:, 0] if out.shape[1] >= 1 else out


def sup_error_estimate(spec: ModelSpec, weights: ModelWeights, target_fn,
                       trials: int, length: int, seed: int,
                       batch: int = 2048, alphabet: str = "pm1",
                       tokens: np.ndarray | None = None) -> float:
    """Sampled lower estimate of sup_t sup_X |target - model|.

    Draws `trials` sequences, evaluates model and target at the last position
    (full visible window), returns the max absolute gap. alphabet: 'pm1'
    (uniform +-1 tokens), 'ball' (unit-ball vectors), or 'tokens' with an
    explicit (Q, d) token table.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    t = length - 1
    worst = 0.0
    done = 0
    while done < trials:
        n = min(batch, trials - done)
        if alphabet == "pm1":
            X = rng.choice([-1.0, 1.0], size=(n, length, spec.d))
        elif alphabet == "ball":
            X = rng.normal(size=(n, length, spec.d))
            r = np.linalg.norm(X, axis=2, keepdims=True)
            X = X / np.maximum(r, 1.0)
        elif alphabet == "tokens":
            if tokens is None:
                raise ValueError("alphabet='tokens' needs a token table")
            idx = rng.integers(0, tokens.shape[0], size=(n, length))
            X = tokens[idx]
        else:
            raise ValueError(f"unknown alphabet {alphabet!r}")
        pred = batch_outputs_at(spec, weights, X, t)
        tgt = target_fn(X, t)
        worst = max(worst, float(np.abs(pred - tgt).max()))
        done += n
    return worst


# ---------------------------------------------------------------------------
# serialization: versioned JSON with flat parameter arrays
# ---------------------------------------------------------------------------

_FORMAT = "sparsemem-model-v1"


def model_to_json(spec: ModelSpec, weights: ModelWeights) -> str:
    def arr(a):
        return np.asarray(a, dtype=np.float64).reshape(-1).tolist()

    doc = {
        "format": _FORMAT,
        "spec": {
            "L": spec.L, "H": spec.H, "m": spec.m, "d": spec.d, "D": spec.D,
            "attention_norm": spec.attention_norm, "score_kind": spec.score_kind,
            "rpe": {"variant": spec.rpe.variant, "bucket_B": spec.rpe.bucket_B,
                    "bucket_D": spec.rpe.bucket_D},
            "precision": spec.precision, "horizon": spec.horizon,
            "p_map": spec.p_map,
        },
        "embedding": {"W_E": arr(weights.W_E), "b_E": arr(weights.b_E)},
        "layers": [
            {
                "W_O": arr(layer.W_O),
                "use_attn_residual": layer.use_attn_residual,
                "use_ffn_residual": layer.use_ffn_residual,
                "precision": layer.precision,
                "ffn": {"A": arr(layer.ffn.A), "B": arr(layer.ffn.B),
                        "c": arr(layer.ffn.c), "out_dim": layer.ffn.A.shape[1]},
                "heads": [
                    {"W_Q": arr(h.W_Q), "W_K": arr(h.W_K), "W_V": arr(h.W_V),
                     "p": float(h.p),
                     "w_tmx": None if h.w_tmx is None else arr(h.w_tmx)}
                    for h in layer.heads
                ],
            }
            for layer in weights.layers
        ],
    }
    return json.dumps(doc, sort_keys=True)


def model_from_json(text: str) -> tuple[ModelSpec, ModelWeights]:
    doc = json.loads(text)
    if doc.get("format") != _FORMAT:
        raise ValueError(f"unknown model document format {doc.get('format')!r}")
    s = doc["spec"]
    spec = ModelSpec(L=s["L"], H=s["H"], m=s["m"], d=s["d"], D=s["D"],
                     attention_norm=s["attention_norm"], score_kind=s["score_kind"],
                     rpe=RpeKind(variant=s["rpe"]["variant"],
                                 bucket_B=s["rpe"]["bucket_B"],
                                 bucket_D=s["rpe"]["bucket_D"]),
                     precision=s["precision"], horizon=s["horizon"],
                     p_map=s["p_map"])
    D, d = spec.D, spec.d

    def mat(vals, shape):
        return np.array(vals, dtype=np.float64).reshape(shape)

    layers = []
    for ld in doc["layers"]:
        width = len(ld["ffn"]["c"])
        out_dim = ld["ffn"]["out_dim"]
        heads = [HeadParams(W_Q=mat(h["W_Q"], (D, D)), W_K=mat(h["W_K"], (D, D)),
                            W_V=mat(h["W_V"], (D, D)), p=h["p"],
                            w_tmx=None if h["w_tmx"] is None else mat(h["w_tmx"], (D,)))
                 for h in ld["heads"]]
        ffn = FfnParams(A=mat(ld["ffn"]["A"], (width, out_dim)),
                        B=mat(ld["ffn"]["B"], (width, D)),
                        c=mat(ld["ffn"]["c"], (width,)))
        layers.append(LayerParams(heads=heads, W_O=mat(ld["W_O"], (D, D)), ffn=ffn,
                                  use_attn_residual=ld["use_attn_residual"],
                                  use_ffn_residual=ld["use_ffn_residual"],
                                  precision=ld["precision"]))
    weights = ModelWeights(W_E=mat(doc["embedding"]["W_E"], (D, d)),
                           b_E=mat(doc["embedding"]["b_E"], (D,)),
                           layers=layers)
    return spec, weights
