"""Batched policy rollouts and backpropagation through time.

The rollout runs a myopic or rnn policy over ``B`` streams that share a
time grid, vectorized over streams and series. With ``keep=True`` it keeps
what :func:`rollout_backward` needs to differentiate the average cost per
section with respect to every network weight and the raw lambdas. The
slab projection is piecewise affine in its input, so the branch taken in
the forward pass is differentiated as that affine map.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from streamspline.policy import softplus
from streamspline.rnn import (
    AdamState,
    adam_step,
    clip_grads,
    init_params,
    network_step,
    network_step_backward,
)
from streamspline.spline import basis_vector, continuity_matrix, roughness_matrix

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.002
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    grad_clip_norm: float = 0.1
    batch_size: int = 32
    epochs: int = 200
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.grad_clip_norm > 0 and self.batch_size > 0):
            raise ValueError("learning rate, clip norm and batch size must be positive")


@dataclass(frozen=True, eq=False)
class StreamBatch:
    """``B`` streams on a common grid: ``xs (T,)``, ``ys (B, T, N)``, ``eps (B, N)``, ``e0 (B, N, rho)``."""

    xs: np.ndarray
    ys: np.ndarray
    eps: np.ndarray
    e0: np.ndarray

    @property
    def shape(self):
        return self.ys.shape


def stack_sequences(seqs, rho=2):
    xs = seqs[0].xs
    for s in seqs[1:]:
        if s.xs.shape != xs.shape or not np.array_equal(s.xs, xs):
            raise ValueError("streams in a batch must share their time grid")
    ys = np.stack([s.ys for s in seqs])
    eps = np.stack([s.eps for s in seqs])
    e0 = np.zeros(ys.shape[:1] + ys.shape[2:] + (rho,))
    e0[..., 0] = ys[:, 0]
    return StreamBatch(xs, ys, eps, e0)


@dataclass(eq=False)
class Rollout:
    loss: float  # average total cost per section
    costs: np.ndarray  # (B, T) total cost of every section
    actions: np.ndarray  # (B, T, N, 2rho)
    steps: list = field(default_factory=list)
    min_margin: float = np.inf  # closest approach of alpha to a slab face


def _step_geometry(u, rho, variant, eta):
    p = basis_vector(u, 0.0, rho)
    M22 = roughness_matrix(u, rho)[rho:, rho:]
    E = continuity_matrix(u, rho)
    q = p[rho:]
    D0 = M22 if variant == "consistent" else np.outer(q, q) + eta * M22
    return p[:rho], q, M22, E[:, :rho], E[:, rho:], D0


def rollout(params, variant, batch, eta=None, keep=False, rho=2):
    """Run the policy (``params=None`` -> myopic) over a :class:`StreamBatch`."""
    B, T, N = batch.shape
    lam = softplus(params.lambda_raw) if params is not None else None
    e = batch.e0.copy()
    h = np.zeros((params.layers, B, params.hidden)) if params is not None else None
    x_prev = 0.0
    costs = np.empty((B, T))
    actions = np.empty((B, T, N, 2 * rho))
    steps = []
    margin = np.inf
    geom_cache = {}
    for t in range(T):
        u = batch.xs[t] - x_prev
        x_prev = batch.xs[t]
        key = float(u)
        if key not in geom_cache:
            geom_cache[key] = _step_geometry(u, rho, variant, eta)
        p1, q, M22, H, Tm, D0 = geom_cache[key]
        y = batch.ys[:, t]
        eps = batch.eps
        w = y - e @ p1  # (B, N)
        c = q * w[..., None] if variant == "smoothing" else np.zeros((B, N, rho))
        if params is not None:
            feat = np.concatenate([np.full((B, 1), u), y, eps, e.reshape(B, N * rho)], axis=1)
            r_flat, h_new, net_cache = network_step(params, feat, h)
            r = r_flat.reshape(B, N, rho)
            D = D0 + lam[:, None, None] * np.eye(rho)
            m = c + lam[:, None] * r
        else:
            r = net_cache = h_new = None
            D = np.broadcast_to(D0, (N, rho, rho))
            m = c
        Dinv = np.linalg.inv(D)
        alpha = np.einsum("nij,bnj->bni", Dinv, m)
        branch = np.zeros((B, N), dtype=int)
        if variant == "consistent":
            g = Dinv @ q  # (N, rho)
            s = g @ q  # (N,)
            v = alpha @ q - w
            branch = np.where(v > eps, 1, np.where(v < -eps, -1, 0))
            shift = np.where(branch == 1, v - eps, np.where(branch == -1, v + eps, 0.0))
            beta = alpha - shift[..., None] * (g / s[:, None])
            margin = min(margin, float(np.min(np.abs(np.abs(v) - eps))))
        else:
            g = s = shift = None
            beta = alpha
        rough = np.einsum("bni,ij,bnj->bn", beta, M22, beta)
        if variant == "consistent":
            step_costs = rough
            res = None
        else:
            res = beta @ q - w
            step_costs = res**2 + eta * rough
        costs[:, t] = step_costs.sum(axis=1)
        actions[:, t, :, :rho] = e
        actions[:, t, :, rho:] = beta
        if keep:
            steps.append(dict(key=key, e=e, r=r, m=m, Dinv=Dinv, alpha=alpha, beta=beta,
                              branch=branch, g=g, s=s, shift=shift, res=res, net=net_cache))
        e = e @ H.T + beta @ Tm.T
        h = h_new
    loss = float(costs.mean())
    return Rollout(loss, costs, actions, steps, margin), geom_cache


def rollout_backward(params, variant, batch, ro, geom, eta=None, rho=2):
    """Gradient of ``ro.loss`` with respect to every array in ``params.arrays()``."""
    B, T, N = batch.shape
    lam = softplus(params.lambda_raw)
    grads = {k: np.zeros_like(a) for k, a in params.tensors.items()}
    dlam = np.zeros(N)
    scale = 1.0 / (B * T)
    de = np.zeros((B, N, rho))
    dh = np.zeros((params.layers, B, params.hidden))
    for t in range(T - 1, -1, -1):
        st = ro.steps[t]
        p1, q, M22, H, Tm, D0 = geom[st["key"]]
        beta, alpha = st["beta"], st["alpha"]
        # e_t = H e_{t-1} + Tm beta_t
        dbeta = de @ Tm
        de_prev = de @ H
        dw = np.zeros((B, N))
        if variant == "consistent":
            dbeta = dbeta + scale * 2.0 * beta @ M22
        else:
            res = st["res"]
            dbeta = dbeta + scale * (2.0 * res[..., None] * q + 2.0 * eta * beta @ M22)
            dw -= scale * 2.0 * res
        if variant == "consistent":
            g, s, shift, branch = st["g"], st["s"], st["shift"], st["branch"]
            phi = g / s[:, None]  # (N, rho)
            active = (branch != 0)[..., None]
            ddelta = -np.sum(dbeta * phi, axis=-1)  # (B, N)
            ddelta = np.where(branch != 0, ddelta, 0.0)
            dalpha = dbeta + ddelta[..., None] * q
            dw -= ddelta
            # phi = g / (q'g), g = D^{-1} q, dD/dlambda = I
            dphi = np.where(active, -shift[..., None] * dbeta, 0.0).sum(axis=0)  # (N, rho)
            dg = dphi / s[:, None] - q * (np.sum(dphi * g, axis=-1) / s**2)[:, None]
            dlam -= np.sum(np.einsum("nij,nj->ni", st["Dinv"], dg) * g, axis=-1)
        else:
            dalpha = dbeta
        dm = np.einsum("nij,bnj->bni", st["Dinv"], dalpha)
        dlam -= np.sum(dm * alpha, axis=(0, 2))
        dlam += np.sum(dm * st["r"], axis=(0, 2))
        dr = lam[:, None] * dm
        if variant == "smoothing":
            dw += dm @ q
        de_prev -= dw[..., None] * p1
        dfeat, dh = network_step_backward(params, dr.reshape(B, N * rho), dh, st["net"], grads)
        de_prev += dfeat[:, 1 + 2 * N:].reshape(B, N, rho)
        de = de_prev
    grads["lambda_raw"] = dlam * (1.0 / (1.0 + np.exp(-params.lambda_raw)))
    return grads


def loss_and_grad(params, variant, batch, eta=None, rho=2):
    ro, geom = rollout(params, variant, batch, eta, keep=True, rho=rho)
    return ro.loss, rollout_backward(params, variant, batch, ro, geom, eta, rho), ro


def evaluate_cost(params, variant, seqs, eta=None, rho=2):
    """Average total cost per section over ``seqs`` (``params=None`` -> myopic)."""
    ro, _ = rollout(params, variant, stack_sequences(seqs, rho), eta, rho=rho)
    return ro.loss


@dataclass(eq=False)
class TrainResult:
    params: object
    train_curve: list
    val_curve: list
    myopic_val: float
    best_epoch: int
    best_val: float
    seconds: float


def train(variant, train_seqs, val_seqs, cfg=TrainingConfig(), eta=None, rho=2,
          params=None, progress=None):
    """Fit the rnn policy by mini-batch Adam on the average cost per section.

    Keeps the parameters with the lowest validation cost; stops after
    ``cfg.patience`` epochs without improvement.
    """
    n_series = train_seqs[0].ys.shape[1]
    if params is None:
        params = init_params(n_series, rho, seed=cfg.seed, variant=variant, eta=eta)
    params = params.copy()
    train_batch = stack_sequences(train_seqs, rho)
    val_batch = stack_sequences(val_seqs, rho)
    myopic_val = rollout(None, variant, val_batch, eta, rho=rho)[0].loss
    best = params.copy()
    best_val = rollout(params, variant, val_batch, eta, rho=rho)[0].loss
    best_epoch = 0
    train_curve, val_curve = [], []
    arrays = params.arrays()
    opt = AdamState.zeros_like(arrays)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(cfg.seed), 0x7A1])))
    start = time.perf_counter()
    M = train_batch.ys.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(M)
        losses, weights = [], []
        for lo in range(0, M, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            mb = StreamBatch(train_batch.xs, train_batch.ys[idx], train_batch.eps[idx],
                             train_batch.e0[idx])
            loss, grads, _ = loss_and_grad(params, variant, mb, eta, rho)
            if not np.isfinite(loss):
                raise TrainingDivergence(
                    f"non-finite training loss at epoch {epoch}",
                    {"train": train_curve[-5:], "val": val_curve[-5:]})
            grads, _ = clip_grads(grads, cfg.grad_clip_norm)
            adam_step(arrays, grads, opt, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                      weight_decay=cfg.weight_decay)
            losses.append(loss)
            weights.append(len(idx))
        train_curve.append(float(np.average(losses, weights=weights)))
        val = rollout(params, variant, val_batch, eta, rho=rho)[0].loss
        if not np.isfinite(val):
            raise TrainingDivergence(f"non-finite validation cost at epoch {epoch}",
                                     {"train": train_curve[-5:], "val": val_curve[-5:]})
        val_curve.append(val)
        if val < best_val:
            best_val, best_epoch, best = val, epoch, params.copy()
        if progress is not None:
            progress(epoch, train_curve[-1], val, myopic_val)
        log.debug("epoch %d train %.6g val %.6g (myopic %.6g)", epoch, train_curve[-1], val, myopic_val)
        if epoch - best_epoch >= cfg.patience:
            break
    best.meta.update({"best_epoch": best_epoch, "best_val": best_val, "myopic_val": myopic_val})
    return TrainResult(best, train_curve, val_curve, myopic_val, best_epoch, best_val,
                       time.perf_counter() - start)
