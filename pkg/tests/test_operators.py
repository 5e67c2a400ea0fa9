import numpy as np
import pytest
import torch
from scipy.sparse.linalg import LinearOperator, cg

from tunefree_pnp.errors import ShapeMismatchError
from tunefree_pnp.operators import (
    CdpModel,
    CsmriModel,
    Observation,
    amplitude_gradient,
    amplitude_loss,
    cdp_forward,
    check_image,
    csmri_adjoint,
    csmri_forward,
    data_prox_csmri,
    data_prox_pr,
    make_mask,
    make_problem,
)
from tunefree_pnp.operators.csmri import fft2c, ifft2c


def _crandn(generator, *shape):
    return torch.complex(
        torch.randn(shape, generator=generator, dtype=torch.float64),
        torch.randn(shape, generator=generator, dtype=torch.float64),
    )


def _inner(a, b):
    return torch.sum(a.conj() * b)


def test_csmri_adjoint_identity():
    generator = torch.Generator().manual_seed(0)
    for trial in range(100):
        mask = make_mask((32, 32), "uniform-random", 0.3, seed=trial)
        model = CsmriModel.from_mask(mask, 0.0)
        x = _crandn(generator, 1, 32, 32)
        y = _crandn(generator, 1, 32, 32)
        lhs = _inner(csmri_forward(x, model), y)
        rhs = _inner(x, csmri_adjoint(y, model))
        assert float(abs(lhs - rhs)) <= 1e-10 * max(1.0, float(abs(lhs)))


def test_cdp_energy_conservation():
    generator = torch.Generator().manual_seed(1)
    for trial in range(10):
        model = CdpModel.random((16, 16), alpha=0.0, num_patterns=4, seed=trial)
        x = _crandn(generator, 1, 16, 16)
        energy = (cdp_forward(x, model) ** 2).sum()
        expected = model.num_patterns * (x.abs() ** 2).sum()
        assert float(abs(energy - expected)) <= 1e-8 * float(expected)


def test_cdp_adjoint_identity():
    generator = torch.Generator().manual_seed(2)
    model = CdpModel.random((16, 16), alpha=0.0, num_patterns=3, seed=0)
    x = _crandn(generator, 1, 16, 16)
    w = _crandn(generator, 1, 3, 16, 16)
    lhs = _inner(model.apply(x), w)
    rhs = _inner(x, model.apply_adjoint(w))
    assert float(abs(lhs - rhs)) <= 1e-10 * float(abs(lhs))


def _cg_prox_oracle(v, y, mask, mu):
    """argmin 1/2 ||y - M F z||^2 + mu/2 ||z - v||^2 via CG on the normal equations."""
    shape = v.shape

    def normal(flat):
        z = torch.from_numpy(np.asarray(flat).reshape(shape))
        out = ifft2c(mask * fft2c(z)) + mu * z
        return out.reshape(-1).numpy()

    n = v.numel()
    operator = LinearOperator((n, n), matvec=normal, dtype=np.complex128)
    rhs = (ifft2c(mask * y) + mu * v).reshape(-1).numpy()
    solution, info = cg(operator, rhs, rtol=1e-13, atol=0.0, maxiter=200)
    assert info == 0
    return torch.from_numpy(solution.reshape(shape))


def test_csmri_prox_matches_cg_oracle():
    generator = torch.Generator().manual_seed(3)
    for trial in range(50):
        mask = make_mask((16, 16), "radial", 0.3, seed=trial)
        model = CsmriModel.from_mask(mask, 0.0)
        mu = float(torch.rand(1, generator=generator)) * 2.0 + 0.01
        v = _crandn(generator, 16, 16)
        y = model.mask * _crandn(generator, 16, 16)
        z = data_prox_csmri(v.unsqueeze(0), Observation(y.unsqueeze(0)), model.expand(1), mu)[0]
        oracle = _cg_prox_oracle(v, y, model.mask, mu)
        assert torch.linalg.norm(z - oracle) <= 1e-8 * torch.linalg.norm(oracle)

        residual = ifft2c(model.mask * (fft2c(z) - y)) + mu * (z - v)
        assert torch.linalg.norm(residual) <= 1e-8 * torch.linalg.norm(v)


def test_csmri_prox_rejects_nonpositive_mu(csmri_problem):
    with pytest.raises(ValueError):
        data_prox_csmri(csmri_problem.x_gt, csmri_problem.obs, csmri_problem.model, 0.0)


def test_pr_gradient_matches_finite_differences():
    generator = torch.Generator().manual_seed(4)
    for trial in range(20):
        model = CdpModel.random((8, 8), alpha=0.0, num_patterns=4, seed=trial).expand(1)
        x_true = torch.rand((1, 8, 8), generator=generator, dtype=torch.float64)
        obs = Observation(cdp_forward(x_true, model) + 0.05 * torch.rand((1, 4, 8, 8), generator=generator, dtype=torch.float64))
        z = _crandn(generator, 1, 8, 8)
        direction = _crandn(generator, 1, 8, 8)
        h = 1e-6
        fd = (amplitude_loss(z + h * direction, obs, model) - amplitude_loss(z - h * direction, obs, model)) / (2 * h)
        analytic = torch.real(_inner(amplitude_gradient(z, obs, model), direction))
        assert abs(float(fd) - float(analytic)) <= 1e-4 * abs(float(analytic))


def test_pr_prox_is_one_gradient_step(cdp_problem):
    v = cdp_problem.model.initialize(cdp_problem.obs)
    stepped = data_prox_pr(v, cdp_problem.obs, cdp_problem.model, 0.5)
    expected = v - amplitude_gradient(v, cdp_problem.obs, cdp_problem.model) / 0.5
    assert torch.allclose(stepped, expected)
    with pytest.raises(ValueError):
        data_prox_pr(v, cdp_problem.obs, cdp_problem.model, -1.0)


def test_csmri_noise_has_requested_variance():
    mask = make_mask((128, 128), "radial", 1.0)
    model = CsmriModel.from_mask(mask, 15.0)
    x = torch.zeros((1, 128, 128), dtype=torch.float64)
    problem = make_problem(x, model, seed=0)
    variance = float((problem.obs.y.abs() ** 2).mean())
    assert variance == pytest.approx((15.0 / 255.0) ** 2, rel=0.05)


def test_csmri_noise_only_on_sampled_frequencies(csmri_problem):
    outside = (1 - csmri_problem.model.mask) * csmri_problem.obs.y
    assert float(outside.abs().max()) == 0.0


def test_cdp_noise_follows_amplitude_scaled_law():
    x = torch.rand((1, 64, 64), generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    model = CdpModel.random((64, 64), alpha=9.0, num_patterns=4, seed=0)
    problem = make_problem(x, model, seed=11)
    amplitude = cdp_forward(problem.x_gt, problem.model)
    scale = 9.0 / 255.0
    keep = amplitude > 0.3
    normalized = (problem.obs.y**2 - amplitude**2)[keep] / (scale * amplitude[keep])
    assert abs(float(normalized.mean())) < 0.1
    assert float(normalized.std()) == pytest.approx(1.0, rel=0.1)


def test_synthesis_is_seeded(cdp_problem):
    again = make_problem(cdp_problem.x_gt, cdp_problem.model, seed=cdp_problem.seed)
    other = make_problem(cdp_problem.x_gt, cdp_problem.model, seed=cdp_problem.seed + 1)
    assert torch.equal(again.obs.y, cdp_problem.obs.y)
    assert not torch.equal(other.obs.y, cdp_problem.obs.y)


def test_initializations(csmri_problem, cdp_problem):
    assert torch.allclose(csmri_problem.model.initialize(csmri_problem.obs), csmri_adjoint(csmri_problem.obs.y, csmri_problem.model))
    x0 = cdp_problem.model.initialize(cdp_problem.obs)
    assert x0.shape == cdp_problem.x_gt.shape
    assert x0.is_complex()
    assert float(x0.imag.abs().max()) == 0.0


def test_grid_mismatch_raises():
    model = CsmriModel.from_mask(make_mask((16, 16), "radial", 0.5), 0.0)
    with pytest.raises(ShapeMismatchError):
        csmri_forward(torch.zeros((1, 16, 8), dtype=torch.complex128), model)


def test_check_image_rejects_bad_fields():
    with pytest.raises(ShapeMismatchError):
        check_image(torch.zeros(4, 4))
    bad = torch.zeros(8, 8)
    bad[0, 0] = float("nan")
    with pytest.raises(ValueError):
        check_image(bad)


def test_negative_noise_parameters_rejected():
    with pytest.raises(ValueError):
        CsmriModel.from_mask(make_mask((16, 16), "radial", 0.5), -1.0)
    with pytest.raises(ValueError):
        CdpModel.random((16, 16), alpha=-2.0)


def test_models_stack_and_select(csmri_problem):
    stacked = CsmriModel.stack([csmri_problem.model, csmri_problem.model])
    assert stacked.mask.shape == (2, 32, 32)
    assert stacked.select([1]).sigma_n.shape == (1,)
    assert torch.equal(stacked.noise_level(2), torch.full((2,), 15.0 / 255.0, dtype=torch.float64))
