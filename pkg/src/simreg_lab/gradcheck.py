"""Reverse-mode gradients against central differences, on the toy model and the loss alone."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses
from . import model as model_mod
from . import tensorcore as tc

TOY_MODEL = model_mod.ModelConfig(vocab_size=11, n_layers=2, n_heads=2, embed_dim=8, ffn_hidden=12,
                                  max_seq_len=6, init_std=0.2)


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst_param: str
    n_checked: int
    rtol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.rtol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-7) -> np.ndarray:
    """``|a - f| / max(|a|, |f|, atol)``; the floor keeps near-zero entries from dominating."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)


# five-point differences: truncation ~eps^4 (large at small tau) vs rounding ~1e-16/eps
def _compare(root: tc.Expr, point: dict[str, np.ndarray], rtol: float, eps: float) -> GradcheckResult:
    names = list(point)
    grads = tc.gradient(root, point, names)

    worst, worst_name, count = 0.0, "", 0
    for k in names:
        def f(x, k=k):
            return float(tc.evaluate(root, {**point, k: x}))

        numeric = tc.finite_difference_gradient(f, point[k], eps=eps, order=4)
        err = float(relative_error(grads[k], numeric).max())
        count += grads[k].size
        if err >= worst:
            worst, worst_name = err, k
    return GradcheckResult(worst, worst_name, count, rtol)


def model_gradcheck(seed: int = 0, tau: float = 0.01, lam: float = 1.0, n: int = 6,
                    cfg: model_mod.ModelConfig = TOY_MODEL, rtol: float = 1e-3,
                    eps: float = 3e-4) -> GradcheckResult:
    """``ce + lam * softplus(sr)`` through the full model w.r.t. every parameter."""
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, cfg.vocab_size, size=(1, n))
    # few distinct labels so positive groups are not all singletons
    labels = rng.integers(0, 3, size=(1, n))
    params = model_mod.init_params(cfg, seed)
    p = model_mod.param_inputs(cfg)
    E, logits = model_mod.build_forward(tokens, p, cfg)
    ce = tc.mean(losses.cross_entropy_expr(logits, labels))
    terms = losses.simreg_terms(E, labels, losses.SimRegConfig(tau=tau, lam=lam))
    return _compare(ce + lam * terms.penalty, params, rtol, eps)


def loss_gradcheck(seed: int = 0, tau: float = 0.01, lam: float = 1.0, n: int = 6, d: int = 8,
                   n_classes: int = 11, rtol: float = 1e-4, eps: float = 3e-4) -> GradcheckResult:
    """The same objective with embeddings and logits as free inputs."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=(1, n))
    point = {"E": rng.standard_normal((1, n, d)), "logits": rng.standard_normal((1, n, n_classes))}
    E, logits = tc.input("E", point["E"].shape), tc.input("logits", point["logits"].shape)
    ce = tc.mean(losses.cross_entropy_expr(logits, labels))
    terms = losses.simreg_terms(E, labels, losses.SimRegConfig(tau=tau, lam=lam))
    return _compare(ce + lam * terms.penalty, point, rtol, eps)
