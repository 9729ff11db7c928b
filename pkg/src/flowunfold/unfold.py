"""Unrolled proximal-gradient reconstruction network.

Each fold owns an independent copy of the invertible prior plus two trainable
scalars: the data-consistency step size mu and a shrinkage strength rho with
lambda = softplus(rho), so lambda stays positive with no projection step.
One reconstruction runs

    x <- initial guess (fold 0's flow applied to the zero latent)
    repeat for fold k:   xt = x + mu_k A^T (y - A x)
                         zt = f_k(xt)
                         x  = g_k(zt / (1 + lambda_k))   [last fold: no shrink]

The descent form of the data step is used: x + mu A^T(y - Ax) decreases
0.5 ||y - Ax||^2 for small mu.
"""

from __future__ import annotations

import math

import numpy as np

from .diff import ParamStore
from .errors import ConfigError, ShapeError
from .flow import FlowModel
from .numerics import Prng
from .operators import ForwardOp

__all__ = [
    "Fold",
    "UnrolledNet",
    "initial_guess",
    "dc_step",
    "prox_shrink",
    "reconstruct",
    "reconstruct_trace",
    "map_objective",
    "latent_objective",
    "latent_objective_grad",
]

MU_INIT = 0.5
LAMBDA_INIT = 0.1


def _softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def _sigmoid(x: float) -> float:
    return 0.5 * (1.0 + math.tanh(0.5 * x))


class Fold:
    """One unrolled iteration: a flow prior plus (mu, rho) scalars."""

    def __init__(self, shape, levels, depth, hidden, store, prefix, init, rng):
        self.flow = FlowModel(
            shape, levels, depth, hidden, store, prefix=prefix, init=init, rng=rng
        )
        self.mu = store.add(prefix + ".mu", np.array(MU_INIT))
        self.rho = store.add(prefix + ".rho", np.array(math.log(math.expm1(LAMBDA_INIT))))

    @property
    def lam(self) -> float:
        return _softplus(self.rho.item())


class UnrolledNet:
    """K folds of identical architecture with independent parameters."""

    def __init__(
        self,
        shape: tuple[int, int, int],
        folds: int,
        levels: int,
        depth: int,
        hidden: int,
        store: ParamStore | None = None,
        init: str = "identity",
        rng: Prng | None = None,
    ):
        if folds < 1:
            raise ConfigError(f"need at least 1 fold, got {folds}")
        self.shape = tuple(shape)
        self.store = store if store is not None else ParamStore()
        self.folds = [
            Fold(shape, levels, depth, hidden, self.store, f"fold{k}", init, rng)
            for k in range(folds)
        ]

    @property
    def k(self) -> int:
        return len(self.folds)

    def load_pretrained_prior(self, flow: FlowModel) -> None:
        """Copy one pretrained flow into every fold (values copied, storage
        independent, so fine-tuning unties them)."""
        for fold in self.folds:
            fold.flow.copy_state_from(flow)

    # -- forward --------------------------------------------------------------

    def initial_guess_batch(self, batch: int) -> np.ndarray:
        x, _ = self.folds[0].flow.inverse_batch(
            np.zeros((batch, self.folds[0].flow.n))
        )
        return x

    def reconstruct_batch(self, y: np.ndarray, op: ForwardOp) -> np.ndarray:
        """Pure batched reconstruction, (B, C, H, W) measurements in and out."""
        x = self.initial_guess_batch(y.shape[0])
        last = self.k - 1
        for k, fold in enumerate(self.folds):
            xt = dc_step(x, y, op, fold.mu.item())
            z, _, _ = fold.flow.forward_batch(xt)
            if k < last:
                z = z / (1.0 + fold.lam)
            x, _ = fold.flow.inverse_batch(z)
        return x

    # -- forward with recorded state, and its reverse sweep ---------------------

    def reconstruct_batch_grad(self, y: np.ndarray, op: ForwardOp):
        """Like reconstruct_batch but records every intermediate needed by
        :meth:`reconstruct_backward`.  Returns (x_hat, pipeline record)."""
        b = y.shape[0]
        z0 = np.zeros((b, self.folds[0].flow.n))
        x, ctx_init = self.folds[0].flow.inverse_batch(z0)
        last = self.k - 1
        steps = []
        for k, fold in enumerate(self.folds):
            atr = op.adjoint(y - op.apply(x))
            xt = x + fold.mu.item() * atr
            z, _, ctx_f = fold.flow.forward_batch(xt)
            zp = z / (1.0 + fold.lam) if k < last else z
            x, ctx_i = fold.flow.inverse_batch(zp)
            steps.append((atr, zp, ctx_f, ctx_i))
        return x, (op, ctx_init, steps)

    def reconstruct_backward(self, pipe, g_xhat: np.ndarray) -> None:
        """Accumulate d(scalar loss)/d(params) for every fold parameter,
        the scalars mu_k and rho_k included, given the loss cotangent of
        the reconstruction."""
        op, ctx_init, steps = pipe
        last = self.k - 1
        g_x = g_xhat
        for k in range(last, -1, -1):
            fold = self.folds[k]
            atr, zp, ctx_f, ctx_i = steps[k]
            g_zp = fold.flow.backward_inverse(ctx_i, g_x)
            if k < last:
                s = 1.0 / (1.0 + fold.lam)
                g_z = g_zp * s
                g_lam = -s * float((g_zp * zp).sum())
                fold.rho.grad += g_lam * _sigmoid(fold.rho.item())
            else:
                g_z = g_zp
            g_xt = fold.flow.backward_forward(ctx_f, g_z, None)
            fold.mu.grad += float((g_xt * atr).sum())
            # d xt / d x_in = I - mu A^T A, symmetric
            g_x = g_xt - fold.mu.item() * op.adjoint(op.apply(g_xt))
        # initial-guess path: x0 = g_0(0); gradient flows only into fold 0's
        # flow parameters.
        self.folds[0].flow.backward_inverse(ctx_init, g_x)


# -- module-level operations ----------------------------------------------------


def initial_guess(net: UnrolledNet) -> np.ndarray:
    """The prior's most likely image: fold 0's inverse at the zero latent."""
    return net.initial_guess_batch(1)[0]


def dc_step(x: np.ndarray, y: np.ndarray, op: ForwardOp, mu: float) -> np.ndarray:
    """Gradient-descent step on the data term: x + mu A^T (y - A x)."""
    if x.shape != y.shape:
        raise ShapeError.mismatch("dc_step measurement", y.shape, x.shape)
    return x + mu * op.adjoint(y - op.apply(x))


def prox_shrink(z: np.ndarray, lam: float) -> np.ndarray:
    """Proximal map of (lam/2)||z||^2: uniform shrinkage z / (1 + lam)."""
    return z / (1.0 + lam)


def reconstruct(net: UnrolledNet, y: np.ndarray, op: ForwardOp) -> np.ndarray:
    """Single-image reconstruction, (C, H, W) in and out."""
    return net.reconstruct_batch(y[None], op)[0]


def reconstruct_trace(net: UnrolledNet, y: np.ndarray, op: ForwardOp):
    """Reconstruction plus per-stage estimates for monitoring: returns
    (x_hat, [x0, x after fold 0, ..., x after fold K-1])."""
    x = net.initial_guess_batch(1)
    trace = [x[0]]
    last = net.k - 1
    for k, fold in enumerate(net.folds):
        xt = dc_step(x, y[None], op, fold.mu.item())
        z, _, _ = fold.flow.forward_batch(xt)
        if k < last:
            z = z / (1.0 + fold.lam)
        x, _ = fold.flow.inverse_batch(z)
        trace.append(x[0])
    return x[0], trace


def map_objective(
    x: np.ndarray, y: np.ndarray, op: ForwardOp, sigma_n: float, flow: FlowModel
) -> float:
    """Negative log posterior (up to constants): data term plus prior term."""
    if sigma_n <= 0:
        raise ConfigError(f"map_objective needs sigma_n > 0, got {sigma_n}")
    r = y - op.apply(x)
    lp = flow.log_prob_batch(x[None])[0]
    return float((r * r).sum()) / (2.0 * sigma_n**2) - float(lp)


def latent_objective(
    z: np.ndarray, y: np.ndarray, op: ForwardOp, flow: FlowModel, lam: float
) -> float:
    """Latent-space surrogate: ||y - A g(z)||^2 + lam ||z||^2."""
    if lam < 0:
        raise ConfigError(f"latent_objective needs lam >= 0, got {lam}")
    x, _ = flow.inverse_batch(z[None])
    r = y - op.apply(x[0])
    return float((r * r).sum()) + lam * float((z * z).sum())


def latent_objective_grad(
    z: np.ndarray, y: np.ndarray, op: ForwardOp, flow: FlowModel, lam: float
):
    """Value and exact gradient of :func:`latent_objective` w.r.t. z.

    The flow's parameter gradient accumulators are left untouched.
    """
    saved = [p.grad.copy() for p in flow.store]
    x, ctx = flow.inverse_batch(z[None])
    r = y - op.apply(x[0])
    val = float((r * r).sum()) + lam * float((z * z).sum())
    gz = flow.backward_inverse(ctx, (-2.0 * op.adjoint(r))[None])[0]
    gz = gz + 2.0 * lam * z
    for p, s in zip(flow.store, saved):
        p.grad[...] = s
    return val, gz
