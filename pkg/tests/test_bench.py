import numpy as np
import pytest

from streamspline.acquisition import quantize
from streamspline.bench import (
    BenchPolicy,
    CellResult,
    DataSetup,
    DecayGrid,
    DecayReport,
    LogLogFit,
    checkpoint_name,
    emit_report,
    fit_loglog_slope,
    read_csv,
    reconstruction_mse,
    run_decay_experiment,
    write_csv,
)
from streamspline.policy import PolicySpec, consistency_check, reconstruct_stream
from streamspline.spline import SplineEstimate

SMALL = DataSetup(m=12, t_star=12, counts=(4, 4, 4), seed=1)


def smooth_truth():
    knots = np.linspace(0, 4, 5)
    rng = np.random.default_rng(0)
    return SplineEstimate(knots, rng.normal(scale=0.3, size=(4, 2, 4)), 2)


# -- mse ---------------------------------------------------------------------

def test_mse_of_identical_splines_is_zero():
    s = smooth_truth()
    assert reconstruction_mse(s, s) == 0


def test_mse_of_constant_offset():
    s = smooth_truth()
    shifted = s.transform([1.0, 1.0], [0.3, -0.3])
    assert reconstruction_mse(shifted, s) == pytest.approx(0.09, rel=1e-12)


def test_staircase_of_quantized_centers_is_within_eps_squared():
    truth = smooth_truth()
    eps = 0.05
    knots = np.linspace(0, 4, 201)
    mids = 0.5 * (knots[1:] + knots[:-1])
    sections = np.zeros((200, 2, 2))
    sections[:, :, 0] = quantize(truth(mids), eps)
    stairs = SplineEstimate(knots, sections, 1)
    assert reconstruction_mse(stairs, truth, points_per_section=1) <= eps**2


def test_mse_rejects_domain_mismatch():
    s = smooth_truth()
    short = SplineEstimate(s.knots[:-1], s.sections[:-1], 2)
    with pytest.raises(ValueError):
        reconstruction_mse(short, s)
    with pytest.raises(ValueError):
        reconstruction_mse(s, s, points_per_section=0)


# -- slopes ------------------------------------------------------------------

def test_exact_power_law_slope():
    fit = fit_loglog_slope([1, 10, 100], [1, 0.1, 0.01])
    assert fit.slope == pytest.approx(-1.0, abs=1e-14)
    assert fit.slope_std == pytest.approx(0.0, abs=1e-14)
    assert fit_loglog_slope([1, 2, 4], [3, 3, 3]).slope == 0


def test_slope_input_validation():
    with pytest.raises(ValueError):
        fit_loglog_slope([1, 2, 0], [1, 2, 3])
    with pytest.raises(ValueError):
        fit_loglog_slope([1, 2, 3], [1, -2, 3])
    with pytest.raises(ValueError):
        fit_loglog_slope([1, 2], [1, 2])


# -- grid and experiment -----------------------------------------------------

def test_grid_presets_and_cells():
    g = DecayGrid.desk()
    assert g.r_values == (1, 2, 4) and g.eps_values == (0.025, 0.05, 0.1)
    assert g.cells() == [(1, 0.025), (1, 0.05), (1, 0.1), (2, 0.1), (4, 0.1)]
    p = DecayGrid.full()
    assert p.r_values == (1, 2, 3, 4, 5) and len(p.cells()) == 9
    with pytest.raises(ValueError):
        DecayGrid((0, 1), (0.1,))


def test_smoothing_policy_defaults_eta():
    assert BenchPolicy("myopic", "smoothing").eta == 0.001
    assert BenchPolicy("myopic", "consistent").eta is None


def test_one_cell_grid_equals_direct_computation():
    grid = DecayGrid((1,), (0.1,))
    pol = BenchPolicy("myopic", "consistent")
    rep = run_decay_experiment(grid, [pol], SMALL)
    ds = SMALL.dataset(1, 0.1)
    mses = []
    for seq in ds.subset("test"):
        traj = reconstruct_stream(PolicySpec("myopic", "consistent"), seq.observations())
        assert consistency_check(traj.spline, seq.observations()).ok
        mses.append(reconstruction_mse(traj.spline, seq.truth))
    cell = rep.cells[("myopic", "consistent", 1, 0.1)]
    assert cell.mse_mean == pytest.approx(np.mean(mses), rel=1e-12)
    assert cell.mse_stderr == pytest.approx(np.std(mses, ddof=1) / 2, rel=1e-12)
    assert cell.n_streams == 4
    assert rep.fits == {} and rep.complete


def test_missing_checkpoint_flags_and_skips(tmp_path):
    grid = DecayGrid((1,), (0.1,))
    rep = run_decay_experiment(grid, [BenchPolicy("rnn", "consistent"), BenchPolicy("myopic", "consistent")],
                               SMALL, checkpoint_dir=str(tmp_path))
    assert not rep.complete
    assert "missing checkpoint" in rep.flags[0]
    assert list(rep.cells) == [("myopic", "consistent", 1, 0.1)]


def test_checkpoint_name_is_stable():
    assert checkpoint_name("consistent", 2, 0.05) == "rnn_consistent_R2_eps0.050000000000000003.json"


def test_full_sweep_fits_and_reproduces(tmp_path):
    grid = DecayGrid((1, 2, 4), (0.025, 0.05, 0.1))
    pols = [BenchPolicy("myopic", "consistent"), BenchPolicy("batch", "smoothing")]
    a = run_decay_experiment(grid, pols, SMALL)
    b = run_decay_experiment(grid, pols, SMALL, workers=2)
    assert set(a.fits) == {(p.architecture, p.variant, s) for p in pols for s in ("R", "eps")}
    write_csv(a, tmp_path / "a.csv")
    write_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    # consistent MSE cannot exceed a few eps^2 at the coarsest setting
    assert a.cells[("myopic", "consistent", 1, 0.1)].mse_mean > 0


# -- reports -----------------------------------------------------------------

def test_empty_report_writes_header_only(tmp_path):
    paths = emit_report(DecayReport(), tmp_path / "decay.csv")
    assert (tmp_path / "decay.csv").read_text() == "architecture,variant,R,eps,mse_mean,mse_stderr\n"
    assert not list(tmp_path.glob("*.svg"))
    assert paths is None or all(not str(p).endswith(".svg") for p in paths)


def test_one_cell_report_is_one_row(tmp_path):
    rep = DecayReport({("myopic", "consistent", 1, 0.1): CellResult(0.01, 0.001, 4)})
    write_csv(rep, tmp_path / "one.csv")
    assert len((tmp_path / "one.csv").read_text().splitlines()) == 2


def test_csv_round_trips_17_digits(tmp_path):
    rng = np.random.default_rng(2)
    cells = {("myopic", v, r, e): CellResult(*rng.uniform(1e-5, 1, 2) / 3, 7)
             for v in ("consistent", "smoothing") for r, e in [(1, 0.1), (2, 0.1), (1, 1 / 30)]}
    rep = DecayReport(cells)
    write_csv(rep, tmp_path / "r.csv")
    back = read_csv(tmp_path / "r.csv")
    assert back == {k: (c.mse_mean, c.mse_stderr) for k, c in cells.items()}


def test_report_dict_round_trip_and_svgs(tmp_path):
    cells = {("myopic", "consistent", r, 0.1): CellResult(0.1 / r, 0.01 / r, 4) for r in (1, 2, 4)}
    cells.update({("myopic", "consistent", 1, e): CellResult(e, e / 10, 4) for e in (0.025, 0.05)})
    fits = {("myopic", "consistent", "R"): LogLogFit(-1.0, 0.0, -1.0)}
    rep = DecayReport(cells, fits, ["a flag"], {"seed": 0})
    back = DecayReport.from_dict(rep.to_dict())
    assert back.to_dict() == rep.to_dict()
    emit_report(rep, tmp_path / "d.csv")
    first = (tmp_path / "d_R.svg").read_bytes()
    emit_report(rep, tmp_path / "d.csv")
    assert (tmp_path / "d_R.svg").read_bytes() == first
    assert (tmp_path / "d_eps.svg").exists()
