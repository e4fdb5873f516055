"""Stacked-GRU suggestion network for the rnn policy, written against numpy.

Layout follows the usual GRU convention (reset, update, candidate gates
stacked in that order along the first weight axis)::

    r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
    z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
    n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
    h' = (1 - z) * n + z * h

A linear input layer maps the state features to the first GRU layer and a
linear output layer maps the top hidden state to the suggestion ``r_t``.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from streamspline._io import dumps17

CHECKPOINT_VERSION = 1
HIDDEN = 48
INPUT = 32
LAYERS = 2


def n_features(n_series, rho):
    return 1 + 2 * n_series + n_series * rho


def state_features(state):
    """``[u_t, y_t, eps, e_{t-1}]`` for one reconstruction state."""
    return np.concatenate([[state.u], state.obs.y, state.obs.eps, state.e_prev.reshape(-1)])


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(eq=False)
class RnnParameters:
    """Weights of the suggestion network plus the raw (pre-softplus) lambdas."""

    n_series: int
    rho: int
    tensors: dict
    lambda_raw: np.ndarray
    hidden: int = HIDDEN
    input_size: int = INPUT
    layers: int = LAYERS
    variant: str = "consistent"
    eta: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def shapes(self):
        return tensor_shapes(self.n_series, self.rho, self.hidden, self.input_size, self.layers)

    def arrays(self):
        """All trainable arrays by name, lambdas included (views, not copies)."""
        out = dict(self.tensors)
        out["lambda_raw"] = self.lambda_raw
        return out

    def copy(self):
        return RnnParameters(
            self.n_series, self.rho, {k: v.copy() for k, v in self.tensors.items()},
            self.lambda_raw.copy(), self.hidden, self.input_size, self.layers,
            self.variant, self.eta, dict(self.meta),
        )

    def n_params(self):
        return sum(v.size for v in self.arrays().values())


def tensor_shapes(n_series, rho, hidden=HIDDEN, input_size=INPUT, layers=LAYERS):
    shapes = {
        "input.weight": (input_size, n_features(n_series, rho)),
        "input.bias": (input_size,),
    }
    for layer in range(layers):
        fan = input_size if layer == 0 else hidden
        shapes[f"gru.{layer}.weight_ih"] = (3 * hidden, fan)
        shapes[f"gru.{layer}.weight_hh"] = (3 * hidden, hidden)
        shapes[f"gru.{layer}.bias_ih"] = (3 * hidden,)
        shapes[f"gru.{layer}.bias_hh"] = (3 * hidden,)
    shapes["output.weight"] = (n_series * rho, hidden)
    shapes["output.bias"] = (n_series * rho,)
    return shapes


def init_params(n_series, rho=2, seed=0, variant="consistent", eta=None,
                hidden=HIDDEN, input_size=INPUT, layers=LAYERS):
    """Uniform(+-1/sqrt(fan_in)) weights and biases; lambdas start at 1."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x6E4E])))
    tensors = {}
    for name, shape in tensor_shapes(n_series, rho, hidden, input_size, layers).items():
        if name.startswith("input"):
            fan = n_features(n_series, rho)
        elif name.startswith("output"):
            fan = hidden
        elif name.endswith("_hh"):
            fan = hidden
        else:
            fan = input_size if name.startswith("gru.0") else hidden
        bound = 1.0 / np.sqrt(fan)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    lambda_raw = np.full(n_series, np.log(np.expm1(1.0)))
    return RnnParameters(n_series, rho, tensors, lambda_raw, hidden, input_size, layers,
                         variant, eta)


def zero_latent(params, batch=None):
    shape = (params.layers, params.hidden) if batch is None else (params.layers, batch, params.hidden)
    return np.zeros(shape)


def gru_cell(x, h, W_ih, W_hh, b_ih, b_hh):
    """One GRU step on a batch; returns ``(h_new, cache)``."""
    L = h.shape[-1]
    gi = x @ W_ih.T + b_ih
    gh = h @ W_hh.T + b_hh
    r = sigmoid(gi[..., :L] + gh[..., :L])
    z = sigmoid(gi[..., L:2 * L] + gh[..., L:2 * L])
    ghn = gh[..., 2 * L:]
    n = np.tanh(gi[..., 2 * L:] + r * ghn)
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, r, z, n, ghn)


def gru_cell_backward(dh_new, cache, W_ih, W_hh, grads, prefix):
    """Backprop through :func:`gru_cell`; accumulates weight grads, returns ``(dx, dh)``."""
    x, h, r, z, n, ghn = cache
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dan = dn * (1.0 - n * n)
    dar = dan * ghn * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    dgi = np.concatenate([dar, daz, dan], axis=-1)
    dgh = np.concatenate([dar, daz, dan * r], axis=-1)
    grads[prefix + "weight_ih"] += dgi.T @ x
    grads[prefix + "weight_hh"] += dgh.T @ h
    grads[prefix + "bias_ih"] += dgi.sum(axis=0)
    grads[prefix + "bias_hh"] += dgh.sum(axis=0)
    return dgi @ W_ih, dh + dgh @ W_hh


def network_step(params, feat, h):
    """Batched forward: ``feat (B, F)``, ``h (layers, B, L)`` -> ``(r (B, N*rho), h_new, cache)``."""
    T = params.tensors
    x = feat @ T["input.weight"].T + T["input.bias"]
    new_h, caches = [], []
    inp = x
    for layer in range(params.layers):
        pre = f"gru.{layer}."
        hl, c = gru_cell(inp, h[layer], T[pre + "weight_ih"], T[pre + "weight_hh"],
                         T[pre + "bias_ih"], T[pre + "bias_hh"])
        new_h.append(hl)
        caches.append(c)
        inp = hl
    r = inp @ T["output.weight"].T + T["output.bias"]
    return r, np.stack(new_h), (feat, caches, inp)


def network_step_backward(params, dr, dh_new, cache, grads):
    """Reverse of :func:`network_step`; returns ``(dfeat, dh_prev)``."""
    T = params.tensors
    feat, caches, top = cache
    grads["output.weight"] += dr.T @ top
    grads["output.bias"] += dr.sum(axis=0)
    dh_prev = np.empty_like(dh_new)
    dinp = dr @ T["output.weight"]
    for layer in range(params.layers - 1, -1, -1):
        pre = f"gru.{layer}."
        dx, dh_prev[layer] = gru_cell_backward(dh_new[layer] + dinp, caches[layer],
                                               T[pre + "weight_ih"], T[pre + "weight_hh"],
                                               grads, pre)
        dinp = dx
    grads["input.weight"] += dinp.T @ feat
    grads["input.bias"] += dinp.sum(axis=0)
    return dinp @ T["input.weight"], dh_prev


def rnn_forward(params, feat, h):
    """Single-stream step: ``feat (F,)``, ``h (layers, L)`` -> ``(r (N*rho,), h_next)``."""
    feat = np.asarray(feat, dtype=float)
    expected = n_features(params.n_series, params.rho)
    if feat.shape != (expected,):
        raise ValueError(f"feature vector has shape {feat.shape}, expected ({expected},)")
    r, h_new, _ = network_step(params, feat[None, :], h[:, None, :])
    return r[0], h_new[:, 0, :]


def cost_to_go(r, a, lam):
    """``sum_n lam_n * ||tail(a_n) - r_n||^2`` for ``a (N, 2rho)``, ``r (N, rho)``.

    Heads are fixed by continuity, so only the free tail is pulled toward the
    suggestion; this is the same penalty the closed-form policy minimizes.
    """
    a = np.asarray(a, dtype=float)
    n, two_rho = a.shape
    rho = two_rho // 2
    r = np.asarray(r, dtype=float).reshape(n, rho)
    return float(np.sum(np.asarray(lam, dtype=float) * np.sum((a[:, rho:] - r) ** 2, axis=1)))


# -- optimizer ---------------------------------------------------------------

def clip_grads(grads, max_norm):
    """Scale all gradients so that their global l2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass(eq=False)
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays):
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()}, 0)


def adam_step(arrays, grads, state, lr=0.002, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.0):
    """Bias-corrected Adam update of ``arrays`` in place; returns the new step count."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, a in arrays.items():
        g = grads[k]
        if weight_decay:
            g = g + weight_decay * a
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        a -= lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)
    return t


# -- checkpoints -------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def checkpoint_dict(params):
    return {
        "version": CHECKPOINT_VERSION,
        "architecture": "rnn",
        "variant": params.variant,
        "eta": params.eta,
        "arch": {
            "N": params.n_series,
            "rho": params.rho,
            "L": params.hidden,
            "layers": params.layers,
            "input": params.input_size,
        },
        "lambda_raw": params.lambda_raw.tolist(),
        "tensors": {
            name: {"shape": list(a.shape), "values": a.reshape(-1).tolist()}
            for name, a in params.tensors.items()
        },
        "meta": params.meta,
    }


def checkpoint_save(params, path):
    with open(path, "w") as fh:
        fh.write(dumps17(checkpoint_dict(params), indent=1))
        fh.write("\n")


def checkpoint_load(path, n_series=None, rho=None, variant=None):
    """Load a checkpoint, optionally insisting on ``(N, rho, variant)``."""
    with open(path) as fh:
        d = json.load(fh)
    version = d.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version!r}, expected {CHECKPOINT_VERSION}")
    arch = d["arch"]
    N, R = int(arch["N"]), int(arch["rho"])
    if n_series is not None and N != n_series:
        raise CheckpointError(f"{path}: checkpoint built for N={N}, data has N={n_series}")
    if rho is not None and R != rho:
        raise CheckpointError(f"{path}: checkpoint built for rho={R}, expected rho={rho}")
    if variant is not None and d["variant"] != variant:
        raise CheckpointError(f"{path}: checkpoint variant {d['variant']!r}, expected {variant!r}")
    L, layers, inp = int(arch["L"]), int(arch["layers"]), int(arch["input"])
    shapes = tensor_shapes(N, R, L, inp, layers)
    tensors = {}
    for name, shape in shapes.items():
        if name not in d["tensors"]:
            raise CheckpointError(f"{path}: missing tensor {name}")
        rec = d["tensors"][name]
        if tuple(rec["shape"]) != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {tuple(rec['shape'])}, expected {shape}")
        tensors[name] = np.asarray(rec["values"], dtype=float).reshape(shape)
    extra = set(d["tensors"]) - set(shapes)
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {sorted(extra)}")
    lambda_raw = np.asarray(d["lambda_raw"], dtype=float)
    if lambda_raw.shape != (N,):
        raise CheckpointError(f"{path}: lambda_raw has {lambda_raw.size} entries, expected {N}")
    return RnnParameters(N, R, tensors, lambda_raw, L, inp, layers, d["variant"], d.get("eta"),
                         d.get("meta", {}))
