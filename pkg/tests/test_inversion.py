import warnings

import numpy as np
import pytest

from proxfwi import inversion, model, optim, wave
from proxfwi.denoise import Denoiser
from proxfwi.errors import ConfigError, StateError

warnings.filterwarnings("ignore", message=".*points per minimum wavelength.*")


def _tiny_problem(n=12, freqs=(6.0, 9.0), n_src=2, v_inc=2200.0, snr=None, seed=0):
    """12x12 benchmark: centered inclusion, homogeneous background."""
    h = 50.0
    values = np.full((n, n), 2000.0)
    values[4:8, 4:8] = v_inc  # strictly interior, so edges match the background
    true = model.ModelGrid.from_values(values, h, h)
    background = model.ModelGrid.from_values(np.full((n, n), 2000.0), h, h)
    sources = tuple((1, 2 + (n - 4) * s // max(n_src - 1, 1)) for s in range(n_src))
    receivers = tuple((n - 2, ix) for ix in range(1, n - 1, 2)) + tuple(
        (iz, 1) for iz in range(2, n - 2, 3)
    )
    acq = model.AcquisitionGeometry(sources, receivers, freqs)
    observed = wave.forward(true, acq, f_peak=10.0, pml_cells=5, pml_velocity=2000.0)
    observed = wave.add_noise(observed, snr, seed=seed)
    return true, background, acq, observed


def _fwi(acq, observed, background):
    return inversion.FwiOracle(acq, observed, background, f_peak=10.0, pml_cells=5)


def _directional_fd(value_fn, m, v, eps_list):
    best = np.inf
    for eps in eps_list:
        fd = (value_fn(m + eps * v) - value_fn(m - eps * v)) / (2.0 * eps)
        best = min(best, fd) if False else fd  # keep last; caller scans
        yield fd


# ---------------------------------------------------------------------------
# metrics


def test_rmse_cases():
    m = np.ones((3, 3))
    assert inversion.rmse(m, m) == 0.0
    assert inversion.rmse(1.1 * m, m) == pytest.approx(10.0, rel=1e-12)
    with pytest.raises(ValueError):
        inversion.rmse(m, np.zeros((3, 3)))


def test_snr_cases():
    sig = np.array([1.0, -1.0, 1.0, -1.0])
    assert inversion.snr_db(sig, sig) == 0.0
    assert inversion.snr_db(10.0 * sig, sig) == pytest.approx(20.0, rel=1e-12)
    with pytest.raises(ValueError):
        inversion.snr_db(sig, np.zeros(4))


# ---------------------------------------------------------------------------
# reduced-space oracle


def test_fwi_zero_misfit_at_true_model():
    true, background, acq, observed = _tiny_problem()
    oracle = _fwi(acq, observed, background)
    m_true = model.as_slowness_squared(true).values
    m_bg = model.as_slowness_squared(background).values
    data_sq = sum(np.sum(np.abs(b) ** 2) for b in observed.blocks)
    assert oracle.value(m_true) < 1e-18 * data_sq
    grad_scale = np.linalg.norm(oracle.gradient(m_bg))
    assert np.linalg.norm(oracle.gradient(m_true)) < 1e-8 * grad_scale


def test_fwi_gradient_matches_finite_differences():
    true, background, acq, observed = _tiny_problem()
    oracle = _fwi(acq, observed, background)
    m = model.as_slowness_squared(background).values
    g = oracle.gradient(m)
    rng = np.random.default_rng(1)
    v = rng.standard_normal(m.shape)
    v /= np.linalg.norm(v)
    directional = float(np.sum(g * v))
    rel_best = np.inf
    for eps in (1e-3, 1e-4, 1e-5) :
        step = eps * np.linalg.norm(m)
        fd = (oracle.value(m + step * v) - oracle.value(m - step * v)) / (2.0 * step)
        rel_best = min(rel_best, abs(fd - directional) / abs(fd))
    assert rel_best < 1e-4


def test_fwi_componentwise_gradient():
    true, background, acq, observed = _tiny_problem()
    oracle = _fwi(acq, observed, background)
    m = model.as_slowness_squared(background).values
    g = oracle.gradient(m)
    rng = np.random.default_rng(2)
    cells = [(int(a), int(b)) for a, b in zip(rng.integers(0, 12, 20), rng.integers(0, 12, 20))]
    step = 1e-4 * np.linalg.norm(m)
    checked = 0
    for iz, ix in cells:
        e = np.zeros_like(m)
        e[iz, ix] = step
        fd = (oracle.value(m + e) - oracle.value(m - e)) / (2.0 * step)
        if abs(fd) < 1e-12 * np.abs(g).max():
            continue  # insensitive cells have no meaningful relative error
        assert abs(g[iz, ix] - fd) <= 1e-4 * abs(fd)
        checked += 1
    assert checked >= 10


def test_fwi_additive_across_frequencies():
    true, background, acq, observed = _tiny_problem(freqs=(6.0, 9.0))
    m = model.as_slowness_squared(background).values
    both = _fwi(acq, observed, background)
    lo = _fwi(acq.subset((6.0,)), observed.subset((6.0,)), background)
    hi = _fwi(acq.subset((9.0,)), observed.subset((9.0,)), background)
    assert both.value(m) == pytest.approx(lo.value(m) + hi.value(m), rel=1e-12)
    assert np.allclose(both.gradient(m), lo.gradient(m) + hi.gradient(m), rtol=1e-12)


def test_fwi_gauss_newton_hvp_structure():
    true, background, acq, observed = _tiny_problem()
    oracle = _fwi(acq, observed, background)
    m = model.as_slowness_squared(background).values
    assert np.all(oracle.hvp(m, np.zeros_like(m)) == 0.0)
    rng = np.random.default_rng(3)
    u, v = rng.standard_normal(m.shape), rng.standard_normal(m.shape)
    a, b = 1.3, -0.7
    combined = oracle.hvp(m, a * u + b * v)
    assert np.linalg.norm(combined - a * oracle.hvp(m, u) - b * oracle.hvp(m, v)) <= (
        1e-10 * np.linalg.norm(combined)
    )
    # symmetry in the real inner product
    lhs = float(np.sum(u * oracle.hvp(m, v)))
    rhs = float(np.sum(v * oracle.hvp(m, u)))
    assert abs(lhs - rhs) <= 1e-8 * max(abs(lhs), abs(rhs))


def test_fwi_hvp_matches_materialized_jacobian():
    true, background, acq, observed = _tiny_problem(n=12, freqs=(6.0,), n_src=1)
    oracle = _fwi(acq, observed, background)
    m = model.as_slowness_squared(background).values
    step = 1e-4 * np.linalg.norm(m)

    def stacked_data(mm):
        return np.concatenate([blk.ravel() for blk in oracle.simulate(mm)])

    n_cells = m.size
    n_data = stacked_data(m).size
    jac = np.empty((n_data, n_cells), dtype=complex)
    for j in range(n_cells):
        e = np.zeros(n_cells)
        e[j] = step
        jac[:, j] = (
            stacked_data(m + e.reshape(m.shape)) - stacked_data(m - e.reshape(m.shape))
        ) / (2.0 * step)
    rng = np.random.default_rng(4)
    v = rng.standard_normal(n_cells)
    reference = np.real(jac.conj().T @ (jac @ v))
    got = oracle.hvp(m, v.reshape(m.shape)).ravel()
    assert np.linalg.norm(got - reference) <= 1e-3 * np.linalg.norm(reference)


# ---------------------------------------------------------------------------
# penalty-formulation oracle


def _wri(acq, observed, background, mu=3e-4):
    return inversion.WriOracle(acq, observed, background, mu, f_peak=10.0, pml_cells=5)


def test_wri_requires_wavefields():
    true, background, acq, observed = _tiny_problem()
    oracle = _wri(acq, observed, background)
    with pytest.raises(StateError):
        oracle.value(model.as_slowness_squared(background).values)


def test_wri_exact_fit_at_true_model_noiseless():
    true, background, acq, observed = _tiny_problem()
    oracle = _wri(acq, observed, background)
    m_true = model.as_slowness_squared(true).values
    oracle.update_wavefields(m_true)
    data_norm = np.sqrt(sum(np.sum(np.abs(b) ** 2) for b in observed.blocks))
    assert oracle.data_residual_norm(m_true) < 1e-9 * max(1.0, data_norm)


def test_wri_normal_equation_residual():
    true, background, acq, observed = _tiny_problem()
    oracle = _wri(acq, observed, background)
    oracle.update_wavefields(model.as_slowness_squared(background).values)
    for entry in oracle.wavefields:
        resid = entry["rhs"] - entry["normal"] @ entry["u"]
        assert np.linalg.norm(resid) < 1e-9 * np.linalg.norm(entry["rhs"])


def test_wri_hessian_diag_formula():
    true, background, acq, observed = _tiny_problem()
    oracle = _wri(acq, observed, background)
    m = model.as_slowness_squared(background).values
    oracle.update_wavefields(m)
    expected = np.zeros_like(m)
    for entry in oracle.wavefields:
        expected += entry["omega2"] ** 2 * np.sum(np.abs(entry["u_int"]) ** 2, axis=2)
    hdiag = oracle.hessian_diag(m)
    assert np.allclose(hdiag, expected, rtol=1e-14)
    assert np.all(hdiag >= 0.0)


def test_wri_gradient_matches_finite_differences_at_frozen_fields():
    true, background, acq, observed = _tiny_problem()
    oracle = _wri(acq, observed, background)
    m = model.as_slowness_squared(background).values
    oracle.update_wavefields(m)
    g = oracle.gradient(m)
    rng = np.random.default_rng(5)
    v = rng.standard_normal(m.shape)
    v /= np.linalg.norm(v)
    step = 1e-5 * np.linalg.norm(m)
    fd = (oracle.value(m + step * v) - oracle.value(m - step * v)) / (2.0 * step)
    assert abs(fd - float(np.sum(g * v))) <= 1e-6 * abs(fd)


def test_wri_materialized_hessian_is_diagonal():
    true, background, acq, observed = _tiny_problem(n=12, freqs=(6.0,), n_src=1)
    oracle = _wri(acq, observed, background)
    m = model.as_slowness_squared(background).values
    oracle.update_wavefields(m)
    n_cells = m.size
    step = 1e-5 * np.linalg.norm(m)
    hess = np.empty((n_cells, n_cells))
    for j in range(n_cells):
        e = np.zeros(n_cells)
        e[j] = step
        gp = oracle.gradient(m + e.reshape(m.shape)).ravel()
        gm = oracle.gradient(m - e.reshape(m.shape)).ravel()
        hess[:, j] = (gp - gm) / (2.0 * step)
    off = hess - np.diag(np.diag(hess))
    assert np.max(np.abs(off)) <= 1e-8 * np.max(np.abs(hess))
    assert np.allclose(np.diag(hess), oracle.hessian_diag(m).ravel(), rtol=1e-6)


def test_wri_small_mu_fields_match_plain_forward():
    true, background, acq, observed = _tiny_problem()
    oracle = _wri(acq, observed, background, mu=1e-10)
    m = model.as_slowness_squared(background).values
    oracle.update_wavefields(m)
    for i, entry in enumerate(oracle.wavefields):
        plain = entry["system"].factor().solve(entry["b"])
        rel = np.linalg.norm(entry["u"] - plain) / np.linalg.norm(plain)
        assert rel < 1e-4


def test_wri_field_update_decreases_joint_objective():
    true, background, acq, observed = _tiny_problem()
    mu = 3e-4
    oracle = _wri(acq, observed, background, mu=mu)
    m0 = model.as_slowness_squared(background).values
    oracle.update_wavefields(m0)
    m1 = m0 * (1.0 + 1e-3)  # a model step away from where u was solved

    def joint(m):
        return oracle.value(m) + 0.5 * mu**2 * oracle.data_residual_norm(m) ** 2

    before = joint(m1)
    oracle.update_wavefields(m1)
    after = joint(m1)
    assert after <= before + 1e-12 * max(1.0, abs(before))


def test_wri_value_after_zeroing_fields():
    # substituting u = 0 must reduce the misfit to half the source energy
    true, background, acq, observed = _tiny_problem(freqs=(6.0,), n_src=1)
    oracle = _wri(acq, observed, background)
    m = model.as_slowness_squared(background).values
    oracle.update_wavefields(m)
    entry = oracle.wavefields[0]
    entry["u_int"][:] = 0.0
    entry["e_int"][:] = entry["b"][entry["system"].interior_indices().ravel(), :].reshape(
        entry["e_int"].shape
    )
    entry["outside_sq"] = 0.0  # point sources live strictly in the interior
    b_sq = float(np.sum(np.abs(entry["b"]) ** 2))
    assert oracle.value(m) == pytest.approx(0.5 * b_sq, rel=1e-12)
    assert np.all(oracle.gradient(m) == 0.0)


# ---------------------------------------------------------------------------
# continuation driver


def _drive(method="fwi", batches=((6.0, 9.0),), max_outer=3, denoiser=None, mu=3e-4):
    true, background, acq, observed = _tiny_problem()
    config = optim.OptConfig(
        lam=0.0, hessian="lbfgs" if method == "fwi" else "diagonal", max_outer=max_outer
    )
    return inversion.multiscale_drive(
        model.as_slowness_squared(background).values,
        observed, acq, method, "nadmm",
        denoiser or Denoiser("identity"), 0.0, mu,
        [list(batches)], config, background, f_peak=10.0, pml_cells=5,
    )


def test_multiscale_single_batch_equivalent_to_direct_solve():
    true, background, acq, observed = _tiny_problem()
    config = optim.OptConfig(lam=0.0, hessian="diagonal", max_outer=3)
    oracle = _wri(acq, observed, background)
    direct = optim.proximal_newton_solve(
        oracle, Denoiser("identity"), config,
        model.as_slowness_squared(background).values, "nadmm",
    )
    m_drive, results = _drive(method="irwri")
    assert len(results) == 1
    assert np.array_equal(m_drive, direct.m)


def test_multiscale_batches_warm_start():
    m_final, results = _drive(batches=((6.0,), (9.0,)))
    assert len(results) == 2
    assert np.array_equal(results[1].m_start, results[0].m_final)
    assert np.array_equal(m_final, results[1].m_final)
    assert results[0].frequencies == (6.0,)


def test_multiscale_empty_plan_rejected():
    true, background, acq, observed = _tiny_problem()
    with pytest.raises(ConfigError):
        inversion.multiscale_drive(
            model.as_slowness_squared(background).values, observed, acq,
            "fwi", "nadmm", Denoiser("identity"), 0.0, None,
            [], optim.OptConfig(), background,
        )


def test_fwi_inversion_reduces_model_error():
    true, background, acq, observed = _tiny_problem(v_inc=2100.0)
    m0 = model.as_slowness_squared(background).values
    m_true = model.as_slowness_squared(true).values
    config = optim.OptConfig(lam=0.0, hessian="lbfgs", max_outer=12)
    oracle = _fwi(acq, observed, background)
    result = optim.proximal_newton_solve(oracle, Denoiser("identity"), config, m0, "nadmm")
    assert inversion.rmse(result.m, m_true) < inversion.rmse(m0, m_true)
    assert oracle.value(result.m) < 0.05 * oracle.value(m0)


# ---------------------------------------------------------------------------
# run config parsing


def test_parse_run_config(tmp_path):
    text = """
# comment line
model_init = init.grd
model_true = true.grd
method = irwri
algorithm = nadmm
denoiser = tv2d:weight=2e-9,iters=20
lambda = 1.5
mu = 3e-4
frequencies = 5,7,10,12.5
batches = 5,7 | 10,12.5
max_outer = 40
stopping = data-residual:auto
snr_db = 5
seed = 3
out_dir = out
"""
    path = tmp_path / "run.cfg"
    path.write_text(text)
    cfg = inversion.parse_run_config(path)
    assert cfg.model_init == "init.grd"
    assert cfg.lam == 1.5
    assert cfg.frequencies == (5.0, 7.0, 10.0, 12.5)
    assert cfg.batches == ((5.0, 7.0), (10.0, 12.5))
    assert cfg.snr_db == 5.0
    assert cfg.stopping == "data-residual:auto"


def test_parse_run_config_rejects_bad_lines(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("model_init = a.grd\nfrequencies = 5\nbogus_key = 1\n")
    with pytest.raises(ConfigError):
        inversion.parse_run_config(path)
    path.write_text("frequencies = 5\n")
    with pytest.raises(ConfigError):
        inversion.parse_run_config(path)
