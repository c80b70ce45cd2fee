"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .architectures import Model, ModelConfig, param_gradients
from .autograd import Var


@dataclass
class GradCheckResult:
    n_checked: int = 0
    failures: list = field(default_factory=list)  # (name, index, analytic, numeric)
    kinks: list = field(default_factory=list)  # (name, index) where the stencil crossed a kink
    max_abs_err: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures and not self.kinks


def close(analytic: float, numeric: float, rtol: float, atol: float) -> bool:
    err = abs(analytic - numeric)
    return err <= atol or err <= rtol * max(abs(analytic), abs(numeric))


def finite_difference_check(loss_fn, params: dict[str, np.ndarray], analytic: dict[str, np.ndarray],
                            h=1e-3, rtol=1e-4, atol=1e-6) -> GradCheckResult:
    """Compare ``analytic`` against central differences of ``loss_fn(params)``.

    ``params`` is perturbed in place (and restored). Evaluations whose
    ReLU/max-pool pattern differs from the unperturbed pass are reported as
    kinks instead of being compared.
    """
    with ag.record_kinks() as base:
        loss_fn(params)
    base = list(base)
    res = GradCheckResult()
    for name, arr in params.items():
        if name not in analytic:
            continue
        flat = arr.reshape(-1)
        g = analytic[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            with ag.record_kinks() as log_p:
                lp = loss_fn(params)
            flat[i] = old - h
            with ag.record_kinks() as log_m:
                lm = loss_fn(params)
            flat[i] = old
            res.n_checked += 1
            if log_p != base or log_m != base:
                res.kinks.append((name, i))
                continue
            num = (lp - lm) / (2 * h)
            res.max_abs_err = max(res.max_abs_err, abs(num - g[i]))
            if not close(g[i], num, rtol, atol):
                res.failures.append((name, i, float(g[i]), float(num)))
    return res


def check_layer(fn, inputs: dict[str, np.ndarray], seed=0, **tol) -> GradCheckResult:
    """Gradient check of ``fn(P) -> Var`` with respect to every entry of ``inputs``.

    The scalar loss is a fixed random projection of the output, so every output
    element contributes.
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    probe = fn({k: Var(v) for k, v in inputs.items()})
    proj = np.random.default_rng(seed).normal(size=probe.shape)

    def loss(vals):
        out = fn({k: Var(v) for k, v in vals.items()})
        return float(np.sum(out.data * proj))

    P = {k: Var(v, name=k) for k, v in inputs.items()}
    out = fn(P)
    (out * proj).sum().backward()
    analytic = {k: (P[k].grad if P[k].grad is not None else np.zeros_like(v)) for k, v in inputs.items()}
    return finite_difference_check(loss, inputs, analytic, **tol)


def check_model(cfg: ModelConfig, model_seed=0, data_seed=0, batch=2, **tol) -> GradCheckResult:
    """Finite-difference check of ``param_gradients`` for a whole model in float64."""
    model = Model(cfg, seed=model_seed)
    model.params = {k: v.astype(np.float64) for k, v in model.params.items()}
    rng = np.random.default_rng(data_seed)
    size = cfg.backbone.image_size
    clips = rng.normal(size=(batch, cfg.frames, size, size, 3))
    targets = rng.uniform(0.05, 0.95, size=(batch, 7))
    _, analytic = param_gradients(model, clips, targets, dtype=np.float64)

    def loss(params):
        model.params = params
        return param_gradients(model, clips, targets, dtype=np.float64)[0]

    return finite_difference_check(loss, model.params, analytic, **tol)


def check_model_kink_free(cfg: ModelConfig, model_seed=0, max_attempts=20, **tol) -> tuple[int, GradCheckResult]:
    """Run ``check_model`` on successive data seeds until a sweep hits no kink.

    Returns the data seed used and its result. A sweep with failures is
    returned immediately: a mismatch on a smooth piece is a real error.
    """
    res = None
    for data_seed in range(max_attempts):
        res = check_model(cfg, model_seed, data_seed, **tol)
        if res.failures or not res.kinks:
            return data_seed, res
    return data_seed, res
