"""Error-rate decay experiments.

Sweeps the oversampling ratio ``R`` (at a fixed half-step) and the
half-step ``eps`` (at a fixed ``R``), reconstructs the test streams of each
cell with every requested policy, and records the average MSE against the
ground truth. Log-log slopes of the sweeps summarize the decay.
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from streamspline._io import fmt17
from streamspline.acquisition import (
    DESK_COUNTS,
    AcquisitionConfig,
    Var1Config,
    make_dataset,
    standardize,
)
from streamspline.batch import batch_solve
from streamspline.policy import PolicySpec, consistency_check, reconstruct_stream
from streamspline.spline import SplineEstimate

log = logging.getLogger(__name__)

CSV_COLUMNS = ("architecture", "variant", "R", "eps", "mse_mean", "mse_stderr")
DEFAULT_ETA = 0.001


def reconstruction_mse(spline, truth, points_per_section=32):
    """Mean of ``(f - psi)^2`` over series and a dense grid.

    The grid has ``points_per_section`` midpoints in every section of
    ``spline``. ``truth`` is a spline (or anything with a ``.spline``).
    """
    truth = getattr(truth, "spline", truth)
    if points_per_section < 1:
        raise ValueError("points_per_section must be >= 1")
    k, kt = spline.knots, truth.knots
    if not (np.isclose(k[0], kt[0]) and np.isclose(k[-1], kt[-1])):
        raise ValueError(f"domain mismatch: ({k[0]}, {k[-1]}] vs ({kt[0]}, {kt[-1]}]")
    if spline.n_series != truth.n_series:
        raise ValueError("spline and ground truth have different numbers of series")
    frac = (np.arange(points_per_section) + 0.5) / points_per_section
    pts = (k[:-1, None] + np.diff(k)[:, None] * frac).ravel()
    return float(np.mean((spline(pts) - truth(pts)) ** 2))


@dataclass(frozen=True)
class DecayGrid:
    r_values: tuple
    eps_values: tuple
    fixed_r: int = 1
    fixed_eps: float = 0.1

    def __post_init__(self):
        r = tuple(int(v) for v in self.r_values)
        e = tuple(float(v) for v in self.eps_values)
        if min(r, default=1) < 1 or min(e, default=1.0) <= 0 or self.fixed_eps <= 0 or self.fixed_r < 1:
            raise ValueError("grid values must be positive")
        object.__setattr__(self, "r_values", tuple(sorted(r)))
        object.__setattr__(self, "eps_values", tuple(sorted(e)))

    @classmethod
    def full(cls):
        return cls((1, 2, 3, 4, 5), (0.1, 0.08, 0.06, 0.04, 0.02))

    @classmethod
    def desk(cls):
        return cls((1, 2, 4), (0.1, 0.05, 0.025))

    def cells(self):
        """Every ``(R, eps)`` the two sweeps visit, sorted, without repeats."""
        cells = {(r, self.fixed_eps) for r in self.r_values}
        cells |= {(self.fixed_r, e) for e in self.eps_values}
        return sorted(cells)

    def sweeps(self):
        return {
            "R": [(r, self.fixed_eps) for r in self.r_values],
            "eps": [(self.fixed_r, e) for e in self.eps_values],
        }


@dataclass(frozen=True)
class DataSetup:
    """Everything except ``(R, eps)`` needed to regenerate a cell's dataset."""

    m: int = 96
    t_star: int = 60
    counts: tuple = DESK_COUNTS
    seed: int = 0
    period: float = 1.0
    var: Var1Config = field(default_factory=Var1Config.coupled)

    def dataset(self, r, eps):
        acq = AcquisitionConfig(self.var.n_series, self.t_star, self.period, r, eps, self.seed)
        return standardize(make_dataset(acq, self.var, self.m, self.counts))


@dataclass(frozen=True)
class BenchPolicy:
    architecture: str
    variant: str
    eta: float = None

    def __post_init__(self):
        if self.variant == "smoothing" and self.eta is None:
            object.__setattr__(self, "eta", DEFAULT_ETA)


@dataclass(frozen=True)
class CellResult:
    mse_mean: float
    mse_stderr: float
    n_streams: int


@dataclass(frozen=True)
class LogLogFit:
    slope: float
    slope_std: float
    intercept: float


@dataclass(eq=False)
class DecayReport:
    """``cells[(arch, variant, R, eps)]`` and ``fits[(arch, variant, sweep)]``."""

    cells: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def complete(self):
        return not self.flags

    def to_dict(self):
        return {
            "meta": self.meta,
            "flags": list(self.flags),
            "cells": [
                {"architecture": a, "variant": v, "R": r, "eps": e, "mse_mean": c.mse_mean,
                 "mse_stderr": c.mse_stderr, "n_streams": c.n_streams}
                for (a, v, r, e), c in sorted(self.cells.items())
            ],
            "fits": [
                {"architecture": a, "variant": v, "sweep": s, "slope": f.slope,
                 "slope_std": f.slope_std, "intercept": f.intercept}
                for (a, v, s), f in sorted(self.fits.items())
            ],
        }

    @classmethod
    def from_dict(cls, d):
        cells = {
            (c["architecture"], c["variant"], int(c["R"]), float(c["eps"])):
                CellResult(float(c["mse_mean"]), float(c["mse_stderr"]), int(c["n_streams"]))
            for c in d["cells"]
        }
        fits = {
            (f["architecture"], f["variant"], f["sweep"]):
                LogLogFit(float(f["slope"]), float(f["slope_std"]), float(f["intercept"]))
            for f in d["fits"]
        }
        return cls(cells, fits, list(d.get("flags", [])), dict(d.get("meta", {})))


def fit_loglog_slope(x, y):
    """OLS line through ``(log10 x, log10 y)`` with the slope's standard error."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d and of equal length")
    if x.size < 3:
        raise ValueError("a slope fit needs at least 3 points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs strictly positive values")
    res = stats.linregress(np.log10(x), np.log10(y))
    return LogLogFit(float(res.slope), float(res.stderr), float(res.intercept))


def checkpoint_name(variant, r, eps):
    return f"rnn_{variant}_R{r}_eps{fmt17(eps)}.json"


def _reconstruct(policy, seq, params):
    obs = seq.observations()
    if policy.architecture == "batch":
        return batch_solve(policy.variant, obs, eta=policy.eta).spline
    spec = PolicySpec(policy.architecture, policy.variant,
                      policy.eta if policy.variant == "smoothing" else None, params)
    return reconstruct_stream(spec, obs).spline


def run_cell(cell, policies, setup, checkpoint_dir=None, train_cfg=None, points_per_section=32):
    """Results and flags for one ``(R, eps)`` cell; see :func:`run_decay_experiment`."""
    from streamspline.rnn import checkpoint_load, checkpoint_save

    r, eps = cell
    ds = setup.dataset(r, eps)
    test = ds.subset("test")
    out, flags = {}, []
    for pol in policies:
        key = (pol.architecture, pol.variant, r, eps)
        params = None
        if pol.architecture == "rnn":
            path = os.path.join(checkpoint_dir, checkpoint_name(pol.variant, r, eps)) if checkpoint_dir else None
            if path and os.path.exists(path):
                params = checkpoint_load(path, n_series=ds.n_series, variant=pol.variant)
            elif train_cfg is not None:
                from streamspline.training import train

                eta = pol.eta if pol.variant == "smoothing" else None
                params = train(pol.variant, ds.subset("train"), ds.subset("val"), train_cfg, eta=eta).params
                if path:
                    os.makedirs(checkpoint_dir, exist_ok=True)
                    checkpoint_save(params, path)
            else:
                flags.append(f"missing checkpoint for rnn/{pol.variant} at R={r} eps={fmt17(eps)}; cell skipped")
                continue
        mses = []
        failed = None
        for seq in test:
            spline = _reconstruct(pol, seq, params)
            if pol.variant == "consistent":
                rep = consistency_check(spline, seq.observations())
                if not rep.ok:
                    failed = (seq.m, rep)
                    break
            mses.append(reconstruction_mse(spline, seq.truth, points_per_section))
        if failed is not None:
            flags.append(f"{pol.architecture}/{pol.variant} at R={r} eps={fmt17(eps)}: stream {failed[0]} "
                         f"failed the consistency check ({failed[1]}); cell skipped")
            continue
        mses = np.array(mses)
        se = float(mses.std(ddof=1) / np.sqrt(mses.size)) if mses.size > 1 else 0.0
        out[key] = CellResult(float(mses.mean()), se, int(mses.size))
    return out, flags


def _run_cell_job(args):
    return run_cell(*args)


def run_decay_experiment(grid, policies, setup=DataSetup(), checkpoint_dir=None, train_cfg=None,
                         points_per_section=32, workers=1):
    """Regenerate every cell's data, reconstruct its test streams, fit the sweeps.

    rnn policies load ``checkpoint_dir/rnn_<variant>_R<R>_eps<eps>.json``;
    a missing checkpoint is trained on the cell's own data when
    ``train_cfg`` is given, otherwise the cell is skipped and flagged.
    Consistent-variant MSEs are only recorded once every stream of the cell
    passes the consistency check.
    """
    policies = [p if isinstance(p, BenchPolicy) else BenchPolicy(*p) for p in policies]
    jobs = [(cell, policies, setup, checkpoint_dir, train_cfg, points_per_section) for cell in grid.cells()]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_cell_job, jobs))
    else:
        results = [_run_cell_job(j) for j in jobs]
    report = DecayReport()
    for cells, flags in results:
        report.cells.update(cells)
        report.flags.extend(flags)
    report.cells = dict(sorted(report.cells.items()))
    for pol in policies:
        for sweep, pts in grid.sweeps().items():
            keys = [(pol.architecture, pol.variant, r, e) for r, e in pts]
            if len(keys) < 3 or not all(k in report.cells for k in keys):
                continue
            xs = [k[2] if sweep == "R" else k[3] for k in keys]
            report.fits[(pol.architecture, pol.variant, sweep)] = fit_loglog_slope(
                xs, [report.cells[k].mse_mean for k in keys])
    report.meta = {
        "grid_r": list(grid.r_values), "grid_eps": list(grid.eps_values),
        "fixed_r": grid.fixed_r, "fixed_eps": grid.fixed_eps,
        "m": setup.m, "t_star": setup.t_star, "counts": list(setup.counts), "seed": setup.seed,
        "points_per_section": points_per_section,
        "rnn_training": "per cell" if train_cfg is not None else "checkpoints only",
    }
    return report


def write_csv(report, path):
    with open(path, "w") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for (a, v, r, e), c in sorted(report.cells.items()):
            fh.write(f"{a},{v},{r},{fmt17(e)},{fmt17(c.mse_mean)},{fmt17(c.mse_stderr)}\n")


def read_csv(path):
    """Cells of a report CSV as ``{(arch, variant, R, eps): (mse_mean, mse_stderr)}``."""
    out = {}
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {header}")
        for line in fh:
            a, v, r, e, m, s = line.strip().split(",")
            out[(a, v, int(r), float(e))] = (float(m), float(s))
    return out


def _plot_sweep(report, sweep, pts, path):
    import matplotlib

    matplotlib.rcParams["svg.hashsalt"] = "streamspline"
    from matplotlib.figure import Figure

    fig = Figure(figsize=(5.0, 3.6))
    ax = fig.add_subplot()
    series = sorted({(a, v) for (a, v, _, _) in report.cells})
    drawn = False
    for a, v in series:
        keys = [(a, v, r, e) for r, e in pts if (a, v, r, e) in report.cells]
        if not keys:
            continue
        xs = np.array([k[2] if sweep == "R" else k[3] for k in keys], dtype=float)
        ys = np.array([report.cells[k].mse_mean for k in keys])
        line = ax.loglog(xs, ys, "o", label=f"{a} {v}")[0]
        drawn = True
        fit = report.fits.get((a, v, sweep))
        if fit is None:
            continue
        lx = np.log10(xs)
        grid = np.linspace(lx.min(), lx.max(), 50)
        cx = lx.mean()
        center = fit.intercept + fit.slope * grid
        # rotate the fitted line about its centroid by +-1 slope std
        lo = center - fit.slope_std * np.abs(grid - cx)
        hi = center + fit.slope_std * np.abs(grid - cx)
        ax.plot(10 ** grid, 10 ** center, "-", color=line.get_color(),
                label=f"slope {fit.slope:.3f} ± {fit.slope_std:.3f}")
        ax.fill_between(10 ** grid, 10 ** lo, 10 ** hi, color=line.get_color(), alpha=0.2, linewidth=0)
    if not drawn:
        return None
    ax.set_xlabel("oversampling ratio R" if sweep == "R" else "half-step eps")
    ax.set_ylabel("average test MSE")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def emit_report(report, path):
    """Write the CSV at ``path`` and one SVG per sweep next to it.

    Returns the list of files written. An empty report yields a header-only
    CSV and no charts.
    """
    write_csv(report, path)
    written = [path]
    if not report.cells:
        return written
    stem = os.path.splitext(path)[0]
    m = report.meta
    # reports built by hand may lack the grid; fall back to what the cells cover
    grid = DecayGrid(m.get("grid_r") or sorted({k[2] for k in report.cells}),
                     m.get("grid_eps") or sorted({k[3] for k in report.cells}),
                     m.get("fixed_r", 1), m.get("fixed_eps", 0.1))
    for sweep, pts in grid.sweeps().items():
        out = _plot_sweep(report, sweep, pts, f"{stem}_{sweep}.svg")
        if out:
            written.append(out)
    return written
