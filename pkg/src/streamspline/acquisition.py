"""Synthetic acquisition pipeline.

VAR(1) knots -> natural cubic ground truth -> uniform sampling at ``R`` times
the knot rate -> uniform midtread quantization. Also dataset splitting,
training-partition standardization and the JSON-lines dataset format.
"""

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline

from streamspline._io import dumps17
from streamspline.spline import SplineEstimate

log = logging.getLogger(__name__)

FULL_COUNTS = (192, 64, 32)  # 288 sequences in total
DESK_COUNTS = (48, 16, 32)


@dataclass(frozen=True)
class Var1Config:
    """``z_t = phi @ z_{t-1} + w_t`` with ``w_t ~ N(0, diag(innovation_std**2))``."""

    phi: np.ndarray
    innovation_std: np.ndarray
    z0: np.ndarray

    def __post_init__(self):
        phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        n = phi.shape[0]
        if phi.shape != (n, n):
            raise ValueError(f"phi must be square, got {phi.shape}")
        std = np.broadcast_to(np.asarray(self.innovation_std, dtype=float), (n,)).copy()
        z0 = np.broadcast_to(np.asarray(self.z0, dtype=float), (n,)).copy()
        if np.any(std < 0):
            raise ValueError("innovation_std must be non-negative")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "innovation_std", std)
        object.__setattr__(self, "z0", z0)

    @property
    def n_series(self):
        return self.phi.shape[0]

    @classmethod
    def coupled(cls):
        # directed coupling 1 -> 2 only, unit-free innovation variance 0.1
        return cls(
            phi=np.array([[0.7, 0.0], [0.4, 0.7]]),
            innovation_std=np.sqrt([0.1, 0.1]),
            z0=np.zeros(2),
        )


@dataclass(frozen=True)
class AcquisitionConfig:
    n_series: int = 2
    t_star: int = 100
    period: float = 1.0
    oversampling: int = 1
    half_step: float | tuple = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.oversampling < 1 or int(self.oversampling) != self.oversampling:
            raise ValueError("oversampling must be a positive integer")
        if self.t_star < 2:
            raise ValueError("t_star must be >= 2")
        if self.period <= 0:
            raise ValueError("period must be positive")
        if np.any(self.eps <= 0):
            raise ValueError("half_step must be positive")

    @property
    def eps(self):
        return np.broadcast_to(np.asarray(self.half_step, dtype=float), (self.n_series,)).copy()

    @property
    def n_samples(self):
        return self.oversampling * self.t_star


@dataclass(frozen=True)
class Observation:
    """One stream element: time stamp, interval centers and half widths."""

    t: int
    x: float
    y: np.ndarray
    eps: np.ndarray


@dataclass(frozen=True)
class GroundTruthSignal:
    spline: SplineEstimate
    knot_values: np.ndarray


@dataclass(frozen=True, eq=False)
class Sequence:
    """One multivariate stream plus the signal it was acquired from."""

    m: int
    knots: np.ndarray  # (T_*, N) knot values
    truth: GroundTruthSignal
    xs: np.ndarray  # (T,)
    ys: np.ndarray  # (T, N)
    eps: np.ndarray  # (N,)

    @property
    def n_samples(self):
        return self.xs.shape[0]

    def observations(self):
        return [
            Observation(t + 1, float(self.xs[t]), self.ys[t], self.eps)
            for t in range(self.n_samples)
        ]


@dataclass(eq=False)
class Dataset:
    sequences: list
    split: dict
    gamma: np.ndarray
    sigma: np.ndarray
    standardized: bool = False
    meta: dict = field(default_factory=dict)

    def subset(self, name):
        return [self.sequences[i] for i in self.split[name]]

    @property
    def n_series(self):
        return self.sequences[0].ys.shape[1]


def _stream_rng(seed, m):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(m)])))


def box_muller(rng, size):
    """``size`` standard normal draws from uniforms via the Box-Muller transform."""
    pairs = (size + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1]
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(2.0 * np.pi * u2)
    z[1::2] = r * np.sin(2.0 * np.pi * u2)
    return z[:size]


def var1_generate(cfg, t_star, m, seed):
    """Knots of ``m`` independent VAR(1) sequences; shape ``(m, t_star, N)``.

    Sequence ``i`` draws from its own stream keyed by ``(seed, i)`` so any
    subset can be regenerated without the others.
    """
    radius = np.max(np.abs(np.linalg.eigvals(cfg.phi)))
    if radius >= 1.0:
        raise ValueError(f"unstable VAR(1): spectral radius {radius:.4g} >= 1")
    n = cfg.n_series
    out = np.empty((m, t_star, n))
    for i in range(m):
        w = box_muller(_stream_rng(seed, i), t_star * n).reshape(t_star, n) * cfg.innovation_std
        z = cfg.z0
        for t in range(t_star):
            z = cfg.phi @ z + w[t]
            out[i, t] = z
    return out


def natural_cubic_interpolate(knots, period=1.0):
    """Natural cubic interpolant of knots at ``period, 2*period, ...``.

    The first section covers ``(0, period]`` and is the linear extension of
    the interpolant, which is what the roughness minimizer on ``(0, X]``
    does there.
    """
    knots = np.asarray(knots, dtype=float)
    if knots.ndim == 1:
        knots = knots[:, None]
    t_star, n = knots.shape
    if t_star < 2:
        raise ValueError("natural cubic interpolation needs at least 2 knots")
    x = period * np.arange(1, t_star + 1)
    cs = CubicSpline(x, knots, bc_type="natural", axis=0)
    inner = np.transpose(cs.c[::-1], (1, 2, 0))  # (t_star-1, N, 4), local powers
    slope = inner[0, :, 1]
    first = np.zeros((1, n, 4))
    first[0, :, 0] = knots[0] - slope * period
    first[0, :, 1] = slope
    sections = np.concatenate([first, inner], axis=0)
    grid = np.concatenate([[0.0], x])
    return GroundTruthSignal(SplineEstimate(grid, sections, 2), knots)


def quantize(v, eps):
    """Uniform midtread quantizer with step ``2*eps``; ties round away from zero."""
    step = 2.0 * np.asarray(eps, dtype=float)
    r = np.asarray(v, dtype=float) / step
    k = np.sign(r) * np.floor(np.abs(r) + 0.5) + 0.0  # + 0.0 drops negative zero
    return k * step


def sample_times(t_star, oversampling, period=1.0):
    t = np.arange(1, oversampling * t_star + 1, dtype=float)
    return t * period / oversampling


def sample_and_quantize(signal, oversampling, half_step, period=1.0):
    """Sample the ground truth ``R`` times per knot period and quantize it."""
    if oversampling < 1:
        raise ValueError("oversampling must be >= 1")
    n = signal.spline.n_series
    eps = np.broadcast_to(np.asarray(half_step, dtype=float), (n,)).copy()
    if np.any(eps <= 0):
        raise ValueError("half_step must be positive")
    t_star = signal.knot_values.shape[0]
    xs = sample_times(t_star, oversampling, period)
    ys = quantize(signal.spline(xs), eps)
    return [Observation(t + 1, float(xs[t]), ys[t], eps) for t in range(len(xs))]


def split_indices(m, counts, seed):
    """Seeded shuffle of ``range(m)`` cut into train/val/test index lists."""
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or sum(counts) != m or min(counts) < 0:
        raise ValueError(f"split counts {counts} do not sum to {m}")
    perm = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x5EED]))).permutation(m)
    a, b = counts[0], counts[0] + counts[1]
    return {
        "train": sorted(int(i) for i in perm[:a]),
        "val": sorted(int(i) for i in perm[a:b]),
        "test": sorted(int(i) for i in perm[b:]),
    }


def make_sequence(m, knots, acq):
    truth = natural_cubic_interpolate(knots, acq.period)
    xs = sample_times(acq.t_star, acq.oversampling, acq.period)
    ys = quantize(truth.spline(xs), acq.eps)
    return Sequence(m, knots, truth, xs, ys, acq.eps)


def make_dataset(acq, var, m, counts, split_seed=None):
    """Generate ``m`` raw (unstandardized) sequences and their split."""
    if var.n_series != acq.n_series:
        raise ValueError("Var1Config and AcquisitionConfig disagree on n_series")
    knots = var1_generate(var, acq.t_star, m, acq.seed)
    seqs = [make_sequence(i, knots[i], acq) for i in range(m)]
    split = split_indices(m, counts, acq.seed if split_seed is None else split_seed)
    meta = {
        "R": acq.oversampling,
        "eps": acq.eps.tolist(),
        "period": acq.period,
        "seed": acq.seed,
        "phi": var.phi.tolist(),
        "counts": [int(c) for c in counts],
    }
    n = acq.n_series
    return Dataset(seqs, split, np.zeros(n), np.ones(n), False, meta)


def standardization_stats(dataset):
    """Per-series mean and population std of the training-partition interval centers."""
    train = dataset.subset("train")
    if not train:
        raise ValueError("training split is empty")
    y = np.concatenate([s.ys for s in train], axis=0)
    gamma = y.mean(axis=0)
    sigma = y.std(axis=0)
    if np.any(sigma <= 0):
        raise ValueError(f"zero-variance series in training split: sigma={sigma}")
    return gamma, sigma


def standardize_sequence(seq, gamma, sigma):
    scale = 1.0 / sigma
    shift = -gamma / sigma
    truth = GroundTruthSignal(
        seq.truth.spline.transform(scale, shift), (seq.truth.knot_values - gamma) / sigma
    )
    return replace(
        seq,
        knots=(seq.knots - gamma) / sigma,
        truth=truth,
        ys=(seq.ys - gamma) / sigma,
        eps=seq.eps / sigma,
    )


def standardize(dataset, gamma=None, sigma=None):
    """Return a copy with ``y <- (y - gamma)/sigma`` and ``eps <- eps/sigma``.

    Statistics come from the training partition unless given explicitly.
    Ground truth is transformed identically.
    """
    if dataset.standardized:
        raise ValueError("dataset is already standardized")
    if gamma is None or sigma is None:
        gamma, sigma = standardization_stats(dataset)
    gamma = np.asarray(gamma, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    seqs = [standardize_sequence(s, gamma, sigma) for s in dataset.sequences]
    return Dataset(seqs, dataset.split, gamma, sigma, True, dict(dataset.meta))


def select_series(dataset, n):
    """Univariate view of series ``n`` of a dataset."""
    sl = slice(n, n + 1)
    seqs = []
    for s in dataset.sequences:
        sp = s.truth.spline
        truth = GroundTruthSignal(
            SplineEstimate(sp.knots, sp.sections[:, sl], sp.rho), s.truth.knot_values[:, sl]
        )
        seqs.append(replace(s, knots=s.knots[:, sl], truth=truth, ys=s.ys[:, sl], eps=s.eps[sl]))
    return Dataset(seqs, dataset.split, dataset.gamma[sl], dataset.sigma[sl],
                   dataset.standardized, dict(dataset.meta))


# -- file format -------------------------------------------------------------

def sequence_record(seq, meta):
    obs = [
        {"t": t + 1, "x": float(seq.xs[t]), "y": seq.ys[t].tolist(), "eps": seq.eps.tolist()}
        for t in range(seq.n_samples)
    ]
    return {"m": seq.m, "knots": seq.knots.tolist(), "observations": obs, "meta": meta}


def write_jsonl(dataset, path):
    with open(path, "w") as fh:
        for seq in dataset.sequences:
            fh.write(dumps17(sequence_record(seq, dataset.meta)))
            fh.write("\n")


def read_jsonl(path, counts=None, split_seed=None):
    """Load a raw dataset written by :func:`write_jsonl` and recompute its split.

    ``counts`` defaults to the split sizes recorded in the file.
    """
    seqs, meta = [], {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            meta = rec["meta"]
            knots = np.asarray(rec["knots"], dtype=float)
            obs = rec["observations"]
            xs = np.array([o["x"] for o in obs], dtype=float)
            ys = np.array([o["y"] for o in obs], dtype=float)
            eps = np.asarray(obs[0]["eps"], dtype=float)
            truth = natural_cubic_interpolate(knots, float(meta["period"]))
            seqs.append(Sequence(int(rec["m"]), knots, truth, xs, ys, eps))
    if not seqs:
        raise ValueError(f"no sequences in {path}")
    if counts is None:
        if "counts" not in meta:
            raise ValueError(f"{path} does not record split counts; pass them explicitly")
        counts = meta["counts"]
    seed = int(meta["seed"]) if split_seed is None else split_seed
    split = split_indices(len(seqs), counts, seed)
    n = seqs[0].ys.shape[1]
    return Dataset(seqs, split, np.zeros(n), np.ones(n), False, meta)


def write_csv(seq, path):
    """One stream as CSV with columns ``t, x, y_1..y_N, eps_1..eps_N``."""
    from streamspline._io import fmt17

    n = seq.ys.shape[1]
    header = ["t", "x"] + [f"y_{i + 1}" for i in range(n)] + [f"eps_{i + 1}" for i in range(n)]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for t in range(seq.n_samples):
            row = [str(t + 1), fmt17(seq.xs[t])]
            row += [fmt17(v) for v in seq.ys[t]] + [fmt17(v) for v in seq.eps]
            fh.write(",".join(row) + "\n")
