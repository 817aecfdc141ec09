import numpy as np
import pytest
import sympy as sp
from hypothesis import given, strategies as st

from rae.accuracy import (
    AccuracyConfig,
    DegenerateModel,
    FragmentPair,
    TextureError,
    TextureParams,
    ThetaPC,
    UnboundedCRLB,
    assess_pc,
    crlb_sigma,
    estimate_texture,
    fim,
    fim_dense,
    joint_covariance,
    validate,
)
from rae.noise import NoiseModel
from rae.synth import gen_fbm

N17 = 17


def _pair(n=9, noise=NoiseModel(1.0), level=100.0):
    g = np.full((n, n), level)
    return FragmentPair.from_windows(g, g, None, noise, noise)


def _fragments(field, n=N17):
    z = field
    rows, cols = z.shape[0] // n, z.shape[1] // n
    for a in range(rows):
        for b in range(cols):
            yield z[a * n : (a + 1) * n, b * n : (b + 1) * n]


# -- texture ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def fbm_fragments():
    z = gen_fbm((N17 * 25, N17 * 20), 0.5, 10.0, 3).intensities
    z2 = gen_fbm((N17 * 25, N17 * 20), 0.5, 10.0, 4).intensities
    return list(_fragments(z)), list(_fragments(z2))


def test_texture_monte_carlo_band(fbm_fragments):
    frags, _ = fbm_fragments
    nm = NoiseModel()
    est = [estimate_texture(f, f, nm, nm) for f in frags]
    H = np.array([t.H for t in est])
    s = np.array([t.sigma_ri for t in est])
    assert len(frags) == 500
    assert 0.45 < H.mean() < 0.55
    assert np.mean((H > 0.4) & (H < 0.6)) > 0.75
    assert np.all((s > 8) & (s < 12))
    assert all(t.k_rt == 0.99 for t in est)


def test_texture_null_correlation(fbm_fragments):
    a, b = fbm_fragments
    nm = NoiseModel()
    k = [estimate_texture(f, g, nm, nm).k_rt for f, g in zip(a, b)]
    assert abs(np.mean(k)) < 0.05


def test_texture_noise_debiasing(rng):
    z = gen_fbm((N17 * 10, N17 * 10), 0.5, 3.0, 5).intensities
    nm = NoiseModel(4.0)
    raw_k, fixed_k = [], []
    for f in _fragments(z):
        a = f + rng.normal(0, 2, f.shape)
        b = f + rng.normal(0, 2, f.shape)
        raw_k.append(np.corrcoef(a.ravel(), b.ravel())[0, 1])
        fixed_k.append(estimate_texture(a, b, nm, nm).k_rt)
    # the true correlation is 1 (clamped at 0.99); debiasing must move k toward it
    assert np.median(fixed_k) > np.median(raw_k) + 0.02


def test_texture_errors():
    nm = NoiseModel()
    with pytest.raises(TextureError):
        estimate_texture(np.ones((17, 17)), np.ones((17, 17)), nm, nm)
    with pytest.raises(TextureError):
        estimate_texture(np.ones((9, 9)), np.ones((9, 9)), nm, nm)


def test_texture_params_validation():
    with pytest.raises(ValueError):
        TextureParams(1, 1, 1.0, 0.5)
    with pytest.raises(ValueError):
        TextureParams(1, 1, 0.5, 1.0)
    with pytest.raises(ValueError):
        TextureParams(0, 1, 0.5, 0.5)


# -- covariance -------------------------------------------------------------------


def test_cross_block_zero_when_uncorrelated():
    pair = _pair(5)
    c = joint_covariance(ThetaPC(TextureParams(2, 3, 0.0, 0.4), (0.3, -0.2)), pair)
    assert np.all(c[:25, 25:] == 0)


def test_unit_increment_variance():
    # two pixels at distance 1, H = 0.5, sigma_x = 1, noiseless
    pair = FragmentPair(np.array([[0.0, 0.0], [0.0, 1.0]]), np.zeros(2), np.zeros(2), NoiseModel(), NoiseModel())
    c = joint_covariance(ThetaPC(TextureParams(1, 1, 0.5, 0.5)), pair)[:2, :2]
    assert c[0, 0] + c[1, 1] - 2 * c[0, 1] == pytest.approx(1.0)


@given(st.integers(0, 1000))
def test_covariance_entrywise_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 5
    offs = np.stack(np.meshgrid(np.arange(-2.0, 3), np.arange(-2.0, 3), indexing="ij"), -1).reshape(-1, 2)
    ref, tmpl = rng.uniform(50, 150, n * n), rng.uniform(50, 150, n * n)
    nr, nt = NoiseModel(1.0, 0.01, 0, 0.7), NoiseModel(2.0, 0, 1e-4, 0.0)
    pair = FragmentPair(offs, ref, tmpl, nr, nt)
    th = ThetaPC(TextureParams(rng.uniform(1, 5), rng.uniform(1, 5), rng.uniform(-0.9, 0.9), rng.uniform(0.1, 0.9)),
                 tuple(rng.uniform(-0.5, 0.5, 2)))
    t = th.texture
    got = joint_covariance(th, pair)
    m = len(offs)
    d = np.array(th.d)
    fb = lambda v: np.hypot(*v) ** (2 * t.H)
    exp = np.empty((2 * m, 2 * m))
    for a in range(m):
        for b in range(m):
            p, q = offs[a], offs[b]
            v = 0.5 * (fb(p) + fb(q) - fb(p - q))
            cross = 0.5 * (fb(p - d) + fb(q + d) - fb(p - q - d) - fb(d))
            exp[a, b] = t.sigma_ri**2 * v + noise_entry(nr, p, q, ref[a], ref[b])
            exp[m + a, m + b] = t.sigma_ti**2 * v + noise_entry(nt, p, q, tmpl[a], tmpl[b])
            exp[a, m + b] = t.k_rt * t.sigma_ri * t.sigma_ti * cross
            exp[m + b, a] = exp[a, m + b]
    np.testing.assert_allclose(got, exp, rtol=1e-12, atol=1e-12 * np.abs(exp).max())


def noise_entry(model, p, q, ip, iq):
    r = np.hypot(*(p - q))
    rho = (1.0 if r == 0 else 0.0) if model.sc == 0 else np.exp(-0.5 * (r / model.sc) ** 2)
    return np.sqrt(model.variance(ip) * model.variance(iq)) * rho


def test_degenerate_model():
    pair = FragmentPair(np.array([[0.0, 1.0], [0.0, 1.0]]), np.zeros(2), np.zeros(2), NoiseModel(), NoiseModel())
    with pytest.raises(DegenerateModel):
        fim(ThetaPC(TextureParams(1, 1, 0.5, 0.5)), pair, AccuracyConfig(jitter=0.0))


# -- FIM --------------------------------------------------------------------------


def _symbolic_fim(offsets, noise_var, theta_vals):
    """FIM of the stacked (reference, template) samples by exact symbolic differentiation.

    Valid at d = 0 with H > 1/2, where every |d|^(2H) term and its first derivatives vanish.
    """
    sr, stt, k, H, d1, d2 = sp.symbols("sr st k H d1 d2", real=True)
    params = (sr, stt, k, H, d1, d2)
    d = sp.Matrix([d1, d2])

    def pw(v):
        v = sp.Matrix(v)
        if all(sp.simplify(e.subs({d1: 0, d2: 0})) == 0 for e in v):
            return sp.Integer(0)  # vector is identically +-d (or zero)
        return (v[0] ** 2 + v[1] ** 2) ** H

    pts = [sp.Matrix([sp.Integer(a), sp.Integer(b)]) for a, b in offsets]
    m = len(pts)
    c = sp.zeros(2 * m, 2 * m)
    for a in range(m):
        for b in range(m):
            v = (pw(pts[a]) + pw(pts[b]) - pw(pts[a] - pts[b])) / 2
            x = (pw(pts[a] - d) + pw(pts[b] + d) - pw(pts[a] - pts[b] - d)) / 2
            nz = noise_var if a == b else 0
            c[a, b] = sr**2 * v + nz
            c[m + a, m + b] = stt**2 * v + nz
            c[a, m + b] = k * sr * stt * x
            c[m + b, a] = c[a, m + b]
    at = dict(zip(params, theta_vals))
    cn = np.array(c.subs(at).evalf(30), dtype=np.float64)
    dcs = [np.array(sp.diff(c, p).subs(at).evalf(30), dtype=np.float64) for p in params]
    prec = np.linalg.inv(cn)
    return np.array([[0.5 * np.trace(prec @ a @ prec @ b) for b in dcs] for a in dcs])


def test_fim_symbolic_toy_oracle():
    offsets = [(1, 0), (0, 1)]
    noise_var = 0.3
    vals = (1.3, 0.8, 0.6, 0.7, 0.0, 0.0)
    nm = NoiseModel(noise_var)
    pair = FragmentPair(np.array(offsets, float), np.zeros(2), np.zeros(2), nm, nm)
    got = fim(ThetaPC.from_vector(vals), pair, AccuracyConfig(fd_step=1e-5, jitter=0.0))
    oracle = _symbolic_fim(offsets, noise_var, vals)
    np.testing.assert_allclose(got, oracle, rtol=1e-6, atol=1e-6 * np.abs(oracle).max())


def test_fim_matches_dense_differences():
    pair = _pair(7, NoiseModel(2.0, 0.01, 0, 0.5))
    th = ThetaPC(TextureParams(3.0, 2.5, 0.8, 0.45))
    cfg = AccuracyConfig()
    a, b = fim(th, pair, cfg), fim_dense(th, pair, cfg)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-8 * np.abs(b).max())


def test_fim_symmetric_psd():
    pair = _pair(9, NoiseModel(1.0, 0.0, 0.0, 0.6))
    info = fim(ThetaPC(TextureParams(3.0, 3.0, 0.9, 0.5)), pair)
    np.testing.assert_allclose(info, info.T)
    assert np.linalg.eigvalsh(info).min() >= -1e-8 * np.linalg.norm(info)


def test_fim_joint_scaling_invariance():
    th = ThetaPC(TextureParams(3.0, 2.0, 0.8, 0.5))
    base = fim(th, _pair(9, NoiseModel(1.5)))
    scaled = fim(ThetaPC(TextureParams(6.0, 4.0, 0.8, 0.5)), _pair(9, NoiseModel(6.0)))
    np.testing.assert_allclose(scaled[4:, 4:], base[4:, 4:], rtol=1e-6)


def test_uncorrelated_pair_unbounded():
    pair = _pair(9)
    info = fim(ThetaPC(TextureParams(3.0, 3.0, 0.0, 0.5)), pair)
    try:
        assert crlb_sigma(info) > 1e3
    except UnboundedCRLB:
        pass


def test_crlb_examples():
    assert crlb_sigma(np.eye(6)) == pytest.approx(1.0)
    assert crlb_sigma(np.diag([1, 1, 1, 1, 4, 16.0])) == pytest.approx(np.sqrt((0.25 + 0.0625) / 2))
    with pytest.raises(UnboundedCRLB):
        crlb_sigma(np.diag([1, 1, 1, 1, 1, 1e-14]))


def test_validate_examples():
    v = validate(0.2)
    assert v.validated and v.sigma_pc == pytest.approx(0.2 / np.sqrt(0.1))
    assert not validate(0.35).validated
    assert validate(0.3, AccuracyConfig(e_est=1.0)).sigma_pc == pytest.approx(0.3)
    with pytest.raises(ValueError):
        validate(0.0)


@given(st.floats(1e-4, 10))
def test_validate_invariants(s):
    v = validate(s)
    assert v.sigma_pc >= v.sigma_lb
    assert v.validated == (s < 0.35)


def _sigma(th, noise):
    return crlb_sigma(fim(th, _pair(11, noise)))


def test_sigma_monotone_in_noise():
    th = ThetaPC(TextureParams(3.0, 3.0, 0.9, 0.5))
    vals = [_sigma(th, NoiseModel(0.5 * lam, 0.001 * lam, 0, 0.4)) for lam in (1, 2, 4)]
    assert vals[0] <= vals[1] <= vals[2]


def test_sigma_monotone_in_k():
    vals = [_sigma(ThetaPC(TextureParams(3.0, 3.0, k, 0.5)), NoiseModel(0.5)) for k in (0.3, 0.6, 0.9)]
    assert vals[0] >= vals[1] >= vals[2]
    neg = _sigma(ThetaPC(TextureParams(3.0, 3.0, -0.6, 0.5)), NoiseModel(0.5))
    assert neg == pytest.approx(vals[1], rel=1e-9)


def test_assess_pc_on_fbm():
    z = gen_fbm((40, 40), 0.5, 3.0, 9).intensities + 1000.0
    w = z[10:27, 10:27]
    nm = NoiseModel(0.2, 0.0002)
    rng = np.random.default_rng(1)
    a = w + rng.normal(0, 0.5, w.shape)
    b = w + rng.normal(0, 0.5, w.shape)
    ok = np.ones(w.shape, bool)
    theta, est = assess_pc(a, ok, b, ok, nm, nm)
    assert est.validated
    assert 0.01 < est.sigma_lb < 0.35
    assert theta.texture.k_rt > 0.9
    _, bad = assess_pc(np.ones((17, 17)), ok, b, ok, nm, nm)
    assert not bad.validated and bad.sigma_lb == np.inf
