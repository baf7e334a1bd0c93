"""Nesterov-style adaptive learning of the regularization weight.

The weight ``lambda`` multiplying the spectral regularizer is itself updated
by gradient steps.  Because the total loss is linear in lambda, its partial
derivative with respect to lambda is exactly the regularization value R
measured on validation data, so each update only needs the current and the
previous R:

    m_{t+1}      = beta * m_t + R_{t+1} + beta * (R_{t+1} - R_t)
    lambda_{t+1} = max(0, lambda_t - alpha * m_{t+1})

The difference term plays the role of the Nesterov look-ahead.  State is
constant-size: one momentum scalar and one past regularization value.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = ["NalaState", "nala_init", "nala_step"]


@dataclass
class NalaState:
    """Adaptive-weight optimizer state.

    ``r_prev`` is None until the first update; the first step then uses a
    zero difference term, consistent with starting momentum m = 0.  ``lam``
    is clamped at zero (a negative weight would reward spectral disagreement).
    """

    lam: float
    alpha: float
    beta: float
    m: float = 0.0
    r_prev: float | None = None
    t: int = 0


def nala_init(lambda0: float = 0.1, alpha: float = 5e-4, beta: float = 0.9) -> NalaState:
    """Fresh optimizer state; defaults lambda0=0.1, alpha=5e-4, beta=0.9."""
    if lambda0 < 0:
        raise ValueError(f"lambda0 must be >= 0, got {lambda0}")
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if not 0 <= beta < 1:
        raise ValueError(f"beta must be in [0, 1), got {beta}")
    return NalaState(lam=float(lambda0), alpha=float(alpha), beta=float(beta))


def nala_step(state: NalaState, r_val: float) -> NalaState:
    """One lambda update from the regularization value on validation data.

    Returns a new state; the input state is not modified.
    """
    if not r_val >= 0:
        raise ValueError(f"regularization value must be >= 0, got {r_val}")
    r_prev = r_val if state.r_prev is None else state.r_prev
    m = state.beta * state.m + r_val + state.beta * (r_val - r_prev)
    lam = max(0.0, state.lam - state.alpha * m)
    return NalaState(
        lam=lam,
        alpha=state.alpha,
        beta=state.beta,
        m=m,
        r_prev=float(r_val),
        t=state.t + 1,
    )
