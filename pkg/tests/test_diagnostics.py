import math

import numpy as np
import pytest

from minkgeom import analytic_surrogate as sg
from minkgeom import diagnostics as dg
from minkgeom import emulator as em
from minkgeom.grid_core import Field2D
from minkgeom.target_pipeline import ThresholdSpec, gamma_exact

CFG = sg.SoftGeomConfig((0.3, 0.6), tau=0.1)


def blob(size, c, peak, s):
    yy, xx = np.mgrid[:size, :size]
    return peak * np.exp(-((yy - c[0]) ** 2 + (xx - c[1]) ** 2) / (2 * s * s))


# -- inversion


def test_zero_residual_leaves_field():
    sur = dg.analytic_surrogate(CFG)
    x0 = dg.random_smooth_fields(1, 8, seed=1)[0]
    target = dg.attribution(sur, x0)[0]
    cfg = dg.InversionConfig(target, (8, 8), steps=3, lambda_tv=0, lambda_l2=0, x0=x0)
    res = dg.invert(cfg, sur)
    assert res.data_trace[0] == 0.0
    np.testing.assert_array_equal(res.x, x0)


def test_zero_lr_is_identity():
    sur = dg.analytic_surrogate(CFG)
    res = dg.invert(dg.InversionConfig(np.ones(6), (8, 8), steps=4, lr=0.0, seed=3), sur)
    np.testing.assert_array_equal(res.x, res.x0)
    assert len(res.trace) == 5 and len(set(res.trace)) == 1


def test_inversion_trace_finite_and_decreasing():
    sur = dg.analytic_surrogate(CFG)
    target = gamma_exact(Field2D(blob(8, (4, 4), 1.0, 1.5), 1.0), ThresholdSpec.fixed([0.3, 0.6]), 0.0, math.inf)
    res = dg.invert(dg.InversionConfig(target.entries, (8, 8), steps=20, lr=0.05), sur)
    assert all(math.isfinite(v) for v in res.trace)
    assert all(v >= 0 for v in res.tv_trace)
    assert res.trace[-1] < res.trace[0]
    assert res.reduction == pytest.approx(1 - res.trace[-1] / res.trace[0])


def test_inversion_seeded():
    sur = dg.analytic_surrogate(CFG)
    cfg = dg.InversionConfig(np.ones(6), (8, 8), steps=3, seed=5)
    a, b = dg.invert(cfg, sur), dg.invert(cfg, sur)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.trace == b.trace


def test_inversion_divergence():
    sur = dg.analytic_surrogate(CFG)
    with pytest.raises(dg.InversionDiverged):
        dg.invert(dg.InversionConfig(np.ones(6), (8, 8), steps=2, x0=np.full((8, 8), np.nan)), sur)


def test_inversion_config_validation():
    with pytest.raises(ValueError):
        dg.InversionConfig(np.ones(3), steps=0)
    with pytest.raises(ValueError):
        dg.InversionConfig(np.ones(3), lr=-1)
    with pytest.raises(ValueError):
        dg.InversionConfig(np.ones(3), tau_start=1.0)
    cfg = dg.InversionConfig(np.ones(3), steps=10, tau_start=1.0, tau_end=0.01)
    assert cfg.tau_at(0) == 1.0 and cfg.tau_at(10) == pytest.approx(0.01)


def test_unsquared_data_term():
    sur = dg.analytic_surrogate(CFG)
    x0 = np.zeros((8, 8))
    sq = dg.invert(dg.InversionConfig(np.full(6, 3.0), (8, 8), steps=1, lr=0, x0=x0), sur)
    l2 = dg.invert(dg.InversionConfig(np.full(6, 3.0), (8, 8), steps=1, lr=0, x0=x0, squared=False), sur)
    assert l2.data_trace[0] == pytest.approx(math.sqrt(sq.data_trace[0]))


def test_weighted_data_term():
    sur = dg.analytic_surrogate(CFG)
    x0 = dg.random_smooth_fields(1, 8, seed=2)[0]

    def data(w):
        cfg = dg.InversionConfig(np.full(6, 3.0), (8, 8), steps=1, lr=0, x0=x0, weights=w)
        return dg.invert(cfg, sur).data_trace[0]

    parts = [data(w) for w in [(1, 0, 0), (0, 1, 0), (0, 0, 1)]]
    assert data(None) == pytest.approx(data((1, 1, 1)), rel=1e-14)
    assert data((3, 1, 1.5)) == pytest.approx(3 * parts[0] + parts[1] + 1.5 * parts[2], rel=1e-12)
    with pytest.raises(ValueError):
        dg.InversionConfig(np.ones(3), weights=(1, 1))
    with pytest.raises(ValueError):
        dg.InversionConfig(np.ones(3), weights=(1, -1, 1))


# -- spectra


def test_rapsd_zero_field():
    s = dg.rapsd(np.zeros((16, 16)))
    assert s.shape == (9,) and np.all(s == 0)


@pytest.mark.parametrize("k0", range(2, 16))
def test_rapsd_cosine_peak(k0):
    x = np.cos(2 * np.pi * k0 * np.arange(32) / 32)[None, :].repeat(32, axis=0)
    assert int(np.argmax(dg.rapsd(x))) == k0


def test_rapsd_parseval():
    rng = np.random.default_rng(0)
    for shape in [(16, 16), (20, 13), (32, 24)]:
        x = rng.standard_normal(shape)
        s, n = dg.rapsd(x, full=True, return_counts=True)
        win = np.outer(np.hanning(shape[0]), np.hanning(shape[1]))
        power = np.mean((win * x) ** 2)
        assert abs((n * s).sum() - power) / power < 1e-9


def test_rapsd_white_noise_flat():
    # E|F(w x)|^2 = sum(w^2) for unit white noise, the same at every mode
    n = 32
    spectra = np.array([dg.rapsd(np.random.default_rng(s).standard_normal((n, n))) for s in range(100)])
    win = np.outer(np.hanning(n), np.hanning(n))
    expected = (win**2).sum() / n**4
    mean = spectra.mean(axis=0)[1:]
    se = spectra.std(axis=0, ddof=1)[1:] / math.sqrt(100)
    assert np.all(np.abs(mean - expected) <= 3 * se)


def test_rapsd_rejects_tiny():
    with pytest.raises(ValueError):
        dg.rapsd(np.zeros((3, 8)))


def test_spectral_ratio_and_error():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 16, 16))
    np.testing.assert_allclose(dg.spectral_ratio(a, a), 1.0)
    np.testing.assert_allclose(dg.spectral_ratio(2 * a, a), 4.0)
    np.testing.assert_allclose(dg.spectral_ratio(a, b), dg.rapsd(a) / dg.rapsd(b))
    assert dg.raps_error(a, a) == 0.0
    assert dg.raps_error(2 * a, a) == pytest.approx(math.log10(4))
    assert dg.raps_error(a, b) == pytest.approx(dg.raps_error(b, a))
    with pytest.raises(ValueError):
        dg.raps_error(a, a[:8])


# -- mechanistic sweep


def sweep_setup():
    size = 24
    base = blob(size, (6, 6), 10.0, 2.0) + blob(size, (17, 17), 4.0, 2.0)
    mask = np.zeros((size, size), bool)
    mask[12:, 12:] = True
    return Field2D(base, 1.0), mask


def test_sweep_baseline_and_step():
    field, mask = sweep_setup()
    alphas = np.linspace(0.5, 2.0, 31)
    cfg = sg.SoftGeomConfig((5.0,), tau=0.5, use_morph_filter=False, use_persistence_mask=False)
    rows = dg.mechanistic_sweep(field, mask, alphas, dg.analytic_surrogate(cfg), [5.0])
    one = [r for r in rows if r["alpha"] == 1.0][0]
    np.testing.assert_array_equal(one["exact"], dg.exact_gamma(field, [5.0]))
    cc = np.array([r["exact"][2] for r in rows])
    # the masked peak (about 4, plus the other blob's tail) crosses 5 at alpha = 5 / peak
    crossing = 5.0 / field.values[17, 17]
    assert set(np.diff(cc)) <= {0.0, 1.0} and np.diff(cc).sum() == 1.0
    step = int(np.argmax(np.diff(cc)))
    assert alphas[step] <= crossing < alphas[step + 1]
    soft_chi = np.expm1(np.array([r["surrogate"][2] for r in rows]))
    assert np.abs(np.diff(soft_chi)).max() < 1.0
    assert all(0.0 <= r["mask_energy"] <= 1.0 for r in rows)


def test_sweep_exact_piecewise_constant():
    field, mask = sweep_setup()
    rows = dg.mechanistic_sweep(field, mask, [1.0, 1.001, 1.002], dg.analytic_surrogate(CFG), [5.0])
    assert rows[0]["exact"][2] == rows[2]["exact"][2]


def test_sweep_validation():
    field, mask = sweep_setup()
    with pytest.raises(ValueError):
        dg.mechanistic_sweep(field, mask[:4], [1.0], dg.analytic_surrogate(CFG), [5.0])
    with pytest.raises(ValueError):
        dg.mechanistic_sweep(field, mask, [math.inf], dg.analytic_surrogate(CFG), [5.0])


def test_sweep_rows_layout(tmp_path):
    field, mask = sweep_setup()
    rows = dg.mechanistic_sweep(field, mask, [1.0], dg.analytic_surrogate(CFG), [0.3, 0.6])
    header, out = dg.sweep_rows(rows)
    assert header[:4] == ["alpha", "A1", "P1", "CC1"] and header[-1] == "mask_energy"
    assert len(out[0]) == len(header)
    dg.write_csv(tmp_path / "s.csv", header, out)
    assert (tmp_path / "s.csv").read_text().splitlines()[0].startswith("alpha,A1")


# -- gradcheck


def test_gradcheck_analytic_smooth():
    rep = dg.gradcheck(dg.analytic_surrogate(CFG), dg.random_smooth_fields(5, 12, seed=2))
    assert rep.ok and rep.worst < 1e-5


def test_gradcheck_emulator_smooth():
    cfg = em.EmulatorConfig(height=12, width=12, n_levels=2, pixel_hidden=8, hidden=8)
    emu = em.Emulator.init(cfg, seed=1)
    rep = dg.gradcheck(dg.emulator_surrogate(emu), dg.random_smooth_fields(5, 12, seed=3))
    assert rep.ok and rep.worst < 1e-5


def test_gradcheck_zero_field_finite():
    zero = [np.zeros((12, 12))]
    cfg = em.EmulatorConfig(height=12, width=12, n_levels=2, pixel_hidden=8, hidden=8)
    for sur in (dg.analytic_surrogate(CFG), dg.emulator_surrogate(em.Emulator.init(cfg))):
        assert math.isfinite(dg.gradcheck(sur, zero).worst)


def test_gradcheck_flags_wrong_gradient():
    def bad(tape, x, tau=None):
        # same value, doubled adjoint
        g = dg.analytic_surrogate(CFG)(tape, x)
        return g * 2.0 - g.value

    rep = dg.gradcheck(bad, dg.random_smooth_fields(2, 8))
    assert rep.flagged == [0, 1] and not rep.ok


def test_gradcheck_step_bounds():
    with pytest.raises(ValueError):
        dg.gradcheck(dg.analytic_surrogate(CFG), [np.zeros((4, 4))], h=1e-2)


def test_smooth_fields_range_and_seed():
    a = dg.random_smooth_fields(3, 10, seed=4)
    b = dg.random_smooth_fields(3, 10, seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(x.min() == 0.0 and x.max() == 1.0 for x in a)


# -- output


def test_pgm_header(tmp_path):
    dg.write_pgm(tmp_path / "f.pgm", np.arange(12.0).reshape(3, 4))
    data = (tmp_path / "f.pgm").read_bytes()
    assert data.startswith(b"P5\n4 3\n255\n")
    assert data[-1] == 255 and data[len(b"P5\n4 3\n255\n")] == 0
