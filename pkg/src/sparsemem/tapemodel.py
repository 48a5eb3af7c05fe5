"""Differentiable twin of the model zoo, built on the autodiff tape.

Slow (position loops) but fully general across the variant lattice; used for
gradient checking and as the reference the fast training models are compared
against. Inadmissible lags (phi = -inf) are excluded by slicing rather than
carried as -inf through the tape, so gradients never touch infinities.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, masked_softmax, stack_rows
from .model import FfnParams, HeadParams, LayerParams, ModelSpec, ModelWeights, rpe_value


def softplus(p: Tensor) -> Tensor:
    return (p.exp() + 1.0).log()


def tensorize_weights(weights: ModelWeights) -> tuple[ModelWeights, list[Tensor]]:
    """Wrap every trainable array of a ModelWeights in a Tensor.

    Returns a parallel structure (same classes, Tensor-valued leaves) plus the
    flat parameter list in a deterministic order.
    """
    params: list[Tensor] = []

    def t(arr) -> Tensor:
        x = Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)
        params.append(x)
        return x

    W_E, b_E = t(weights.W_E), t(weights.b_E)
    layers = []
    for layer in weights.layers:
        heads = [HeadParams(W_Q=t(h.W_Q), W_K=t(h.W_K), W_V=t(h.W_V),
                            p=t(np.float64(h.p)),
                            w_tmx=None if h.w_tmx is None else t(h.w_tmx))
                 for h in layer.heads]
        ffn = FfnParams(A=t(layer.ffn.A), B=t(layer.ffn.B), c=t(layer.ffn.c))
        layers.append(LayerParams(heads=heads, W_O=t(layer.W_O), ffn=ffn,
                                  use_attn_residual=layer.use_attn_residual,
                                  use_ffn_residual=layer.use_ffn_residual,
                                  precision=layer.precision))
    return ModelWeights(W_E=W_E, b_E=b_E, layers=layers), params


def _head_p(head, spec: ModelSpec) -> Tensor:
    return softplus(head.p) if spec.p_map == "softplus" else head.p


def tape_model_forward(spec: ModelSpec, tweights: ModelWeights,
                       X: np.ndarray) -> list[Tensor]:
    """Forward one sequence (L, d) through Tensor-valued weights.

    Returns per-position outputs as Tensors. Precision FFN modes are not
    differentiable and are rejected.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    L = X.shape[0]
    states = [tweights.W_E @ Tensor(X[i]) + tweights.b_E for i in range(L)]
    for layer in tweights.layers:
        if layer.precision is not None:
            raise ValueError("precision FFN modes are not differentiable")
        new_states = []
        for pos in range(L):
            W = min(pos, spec.horizon) + 1
            phi = rpe_value(spec.rpe, np.arange(W, dtype=np.float64))
            adm = np.where(np.isfinite(phi))[0]
            att = None
            for head in layer.heads:
                if len(adm) == 0:
                    continue        # empty admissible history: zero head output
                p = _head_p(head, spec)
                if spec.score_kind == "tmx":
                    z = head.w_tmx @ states[pos]
                    if spec.rpe.variant == "lin":
                        off = -z
                    elif spec.rpe.variant == "log":
                        off = -z.log()
                    else:
                        raise ValueError("tmx supports lin/log RPE only")
                    logits = p * (Tensor(phi[adm]) - off)
                else:
                    logits = p * Tensor(phi[adm])
                values = stack_rows([states[pos - int(s)] for s in adm])
                if spec.score_kind == "dp":
                    q = head.W_Q @ states[pos]
                    keys = values @ head.W_K.T               # rows W_K x_{t-s}
                    logits = logits + keys @ q
                if spec.attention_norm == "softmax":
                    w = masked_softmax(logits)
                else:
                    w = logits.exp()
                head_out = head.W_V @ (w @ values)
                att = head_out if att is None else att + head_out
            att = layer.W_O @ att if att is not None else Tensor(np.zeros(spec.D))
            h = states[pos] + att if layer.use_attn_residual else att
            pre = (layer.ffn.B @ h) + layer.ffn.c
            f = pre.relu() @ layer.ffn.A
            new_states.append(h + f if layer.use_ffn_residual else f)
        states = new_states
    return states
