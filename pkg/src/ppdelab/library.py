"""Builtin coefficient functionals, addressable by name from scenario files.

Every builder takes keyword parameters and the problem dimensions and
returns an evaluator that reads only ``view.history`` (nodes up to the
evaluation time).  Shapes follow the simulator's conventions: drifts
``(batch, dim_h)`` or ``(dim_h,)``, diffusions ``(dim_h, dim_k)`` or
``(batch, dim_h, dim_k)``, scalars ``(batch,)``.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .control import RunningCost
from .solver import Nonlinearity


def _vec(v, n: int, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        out = np.zeros(n)
        out[0] = float(arr)
        return out
    if arr.shape != (n,):
        raise ValueError(f"{name} must have length {n}, got {arr.shape}")
    return arr


def _e(n: int, k: int = 0) -> np.ndarray:
    out = np.zeros(n)
    out[k] = 1.0
    return out


# drifts b(t, view) -----------------------------------------------------------

def drift_zero(dim_h, dim_k):
    return None


def drift_constant(dim_h, dim_k, value=0.0):
    v = np.broadcast_to(np.asarray(value, dtype=float), (dim_h,)).copy()
    return lambda t, view: v


def drift_affine_endpoint(dim_h, dim_k, a=0.0, c=0.0):
    """``c + a x_t`` with scalar or matrix ``a``."""
    c = np.broadcast_to(np.asarray(c, dtype=float), (dim_h,)).copy()
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return lambda t, view: c + float(a) * view.current
    a = a.reshape(dim_h, dim_h)
    return lambda t, view: c + view.current @ a.T


def drift_running_integral(dim_h, dim_k, k=1.0):
    """``k int_0^t x_s ds``."""
    return lambda t, view: k * view.running_integral()


def drift_running_sup(dim_h, dim_k, k=1.0, mode=0):
    """``k sup_{s<=t} |x_s| e_mode``."""
    e = _e(dim_h, mode)
    return lambda t, view: k * view.running_sup_norm()[:, None] * e[None, :]


DRIFTS = {"zero": drift_zero, "constant": drift_constant, "affine_endpoint": drift_affine_endpoint,
          "running_integral": drift_running_integral, "running_sup": drift_running_sup}


# diffusions sigma(t, view) ------------------------------------------------------

def diffusion_zero(dim_h, dim_k):
    return None


def diagonal_matrix(dim_h, dim_k, scale) -> np.ndarray:
    r = min(dim_h, dim_k)
    s = np.broadcast_to(np.asarray(scale, dtype=float), (r,))
    m = np.zeros((dim_h, dim_k))
    m[np.arange(r), np.arange(r)] = s
    return m


def diffusion_diagonal(dim_h, dim_k, scale=1.0):
    m = diagonal_matrix(dim_h, dim_k, scale)
    return lambda t, view: m


DIFFUSIONS = {"zero": diffusion_zero, "diagonal": diffusion_diagonal}


# nonlinearities F(t, view, y) ----------------------------------------------------

def nonlinearity_zero(dim_h, dim_k):
    return Nonlinearity(lambda t, view, y: np.zeros(view.batch), 0.0, 1.0, 0.0, reads_y=False)


def nonlinearity_constant(dim_h, dim_k, c=0.0):
    c = float(c)
    return Nonlinearity(lambda t, view, y: np.full(view.batch, c), abs(c), 1.0, 0.0, reads_y=False)


def nonlinearity_linear_y(dim_h, dim_k, lam=1.0, c=0.0):
    """``lam y + c``."""
    lam, c = float(lam), float(c)
    return Nonlinearity(lambda t, view, y: lam * np.asarray(y, dtype=float) + c,
                        max(abs(lam), abs(c)), max(abs(lam), 1e-12), 0.0)


def nonlinearity_saturating(dim_h, dim_k, lhat=1.0, kappa=0.0):
    """``lhat tanh(y) + kappa x_{t,1}``: Lipschitz in ``y`` with constant
    ``lhat``, linear growth in the path."""
    lhat, kappa = float(lhat), float(kappa)
    return Nonlinearity(lambda t, view, y: lhat * np.tanh(y) + kappa * view.current[:, 0],
                        max(lhat, abs(kappa)), lhat, 1.0)


NONLINEARITIES = {"zero": nonlinearity_zero, "constant": nonlinearity_constant,
                  "linear_y": nonlinearity_linear_y, "saturating": nonlinearity_saturating}


# terminal functionals xi(T, view) --------------------------------------------------

def terminal_constant(dim_h, dim_k, c=1.0):
    c = float(c)
    return lambda t, view: np.full(view.batch, c)


def terminal_linear(dim_h, dim_k, coef=1.0):
    """``<coef, x_T>``."""
    w = _vec(coef, dim_h, "coef")
    return lambda t, view: view.current @ w


def terminal_integral(dim_h, dim_k, coef=1.0):
    """``<coef, int_0^T x_s ds>``."""
    w = _vec(coef, dim_h, "coef")
    return lambda t, view: view.running_integral() @ w


def terminal_sup(dim_h, dim_k, scale=1.0):
    return lambda t, view: float(scale) * view.running_sup_norm()


TERMINALS = {"constant": terminal_constant, "linear": terminal_linear,
             "integral": terminal_integral, "sup": terminal_sup}


# stopping payoffs phi(t, view) ---------------------------------------------------

def payoff_affine(dim_h, dim_k, alpha=0.0, coef=1.0):
    """``alpha t + <coef, x_t>``."""
    w = _vec(coef, dim_h, "coef")
    return lambda t, view: alpha * t + view.current @ w


def payoff_time(dim_h, dim_k, alpha=1.0):
    return lambda t, view: np.full(view.batch, alpha * t)


PAYOFFS = {"affine": payoff_affine, "time": payoff_time}


# controlled coefficients ------------------------------------------------------------

def cdrift_action_direction(dim_h, dim_k, scale=1.0, mode=0, mean_reversion=0.0):
    """``scale a e_mode - mean_reversion x_t``."""
    e = _e(dim_h, mode) * float(scale)
    mr = float(mean_reversion)
    return lambda t, view, a: np.asarray(a, dtype=float)[:, None] * e[None, :] - mr * view.current


def cdiffusion_zero(dim_h, dim_k):
    return None


def cdiffusion_diagonal(dim_h, dim_k, scale=1.0):
    m = diagonal_matrix(dim_h, dim_k, scale)
    return lambda t, view, a: m


CDRIFTS = {"action_direction": cdrift_action_direction}
CDIFFUSIONS = {"zero": cdiffusion_zero, "diagonal": cdiffusion_diagonal}


def pinv_structure(drift: Callable, diffusion: Callable, dim_h: int, dim_k: int) -> Callable:
    """``b0 = pinv(sigma) b``: exact whenever the drift lies in the range of
    the diffusion, which is what the structure condition asserts."""
    def b0(t, view, a):
        b = np.asarray(drift(t, view, a), dtype=float).reshape(-1, dim_h)
        s = np.asarray(diffusion(t, view, a), dtype=float)
        if s.ndim == 2:
            return b @ np.linalg.pinv(s).T
        return np.einsum("bkh,bh->bk", np.linalg.pinv(s), b)
    return b0


# running costs l(t, view, a) ---------------------------------------------------------

def cost_zero(dim_h, dim_k):
    return None


def cost_action_linear(dim_h, dim_k, kappa=1.0):
    """``-kappa a``."""
    k = float(kappa)
    return RunningCost(lambda t, view, a: -k * np.asarray(a, dtype=float), abs(k), 0.0)


def cost_action_abs(dim_h, dim_k, kappa=1.0):
    """``-kappa |a|``."""
    k = float(kappa)
    return RunningCost(lambda t, view, a: -k * np.abs(np.asarray(a, dtype=float)), abs(k), 0.0)


COSTS = {"zero": cost_zero, "action_linear": cost_action_linear, "action_abs": cost_action_abs}

REGISTRIES = {"drift": DRIFTS, "diffusion": DIFFUSIONS, "nonlinearity": NONLINEARITIES,
              "terminal": TERMINALS, "payoff": PAYOFFS, "controlled_drift": CDRIFTS,
              "controlled_diffusion": CDIFFUSIONS, "running_cost": COSTS}


def build(role: str, spec: dict, dim_h: int, dim_k: int):
    """Instantiate ``spec = {"name": ..., **params}`` from the registry for
    ``role``; unknown names or parameters raise ``ValueError``."""
    reg = REGISTRIES[role]
    params = dict(spec)
    name = params.pop("name", None)
    if name not in reg:
        raise ValueError(f"unknown {role} builtin {name!r}; choose from {sorted(reg)}")
    try:
        return reg[name](dim_h, dim_k, **params)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {role} {name!r}: {exc}") from None
