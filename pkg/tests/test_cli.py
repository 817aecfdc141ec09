import json

import numpy as np
import pytest

from rae.cli import isolines, main, sigma_reg_grid
from rae.geometry import PolynomialTransform, basis
from rae.noise import NoiseModel, dump_noise_config
from rae.raster import read_f32, write_f32, write_meta
from rae.synth import SynthSpec, gen_pair


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    spec = SynthSpec(size=(136, 136), sigma_x=3.0, k_rt_target=0.95, d_max0=8.0,
                     noise_ref=NoiseModel(0.2, 0.0002), noise_tmpl=NoiseModel(0.2, 0.0002), seed=2)
    ref, _, metas, _ = gen_pair(spec)
    write_f32(d / "ref.f32", ref.intensities)
    write_meta(d / "ref.f32", metas[0])
    write_f32(d / "bare.f32", ref.intensities)
    dump_noise_config(d / "noise.json", spec.noise_ref, spec.noise_ref)
    return d


def test_self_registration_is_identity(scene, tmp_path, capsys):
    out = tmp_path / "reg"
    code = main(["register", str(scene / "ref.f32"), str(scene / "ref.f32"), "--noise", str(scene / "noise.json"),
                 "--deterministic", "--stride", "8", "--out", str(out)])
    assert code == 0
    t = PolynomialTransform.from_json(json.loads((out / "transform.json").read_text()))
    np.testing.assert_allclose(t.affine_part().A, np.eye(2), atol=1e-3)
    np.testing.assert_allclose(t.affine_part().d, 0.0, atol=1e-3)
    for name in ("correspondences.csv", "sigma_reg.f32", "trace.csv", "report.json", "progress.log"):
        assert (out / name).exists()
    assert read_f32(out / "sigma_reg.f32").shape == (17, 17)
    assert json.loads(capsys.readouterr().out)["success"] is True


def test_missing_sidecar_exit_2(scene, tmp_path, capsys):
    code = main(["register", str(scene / "ref.f32"), str(scene / "bare.f32"), "--out", str(tmp_path)])
    assert code == 2
    assert "missing metadata" in capsys.readouterr().err


def test_bad_arguments_exit_2(capsys):
    assert main(["register"]) == 2
    assert main(["predict", "x.json"]) == 2


def _transform_file(tmp_path, cov, degree=1):
    n = (degree + 2) * (degree + 1) // 2
    t = PolynomialTransform(degree, np.r_[0.0, 1.0, 0.0, [0.0] * (n - 3)], np.r_[0.0, 0.0, 1.0, [0.0] * (n - 3)],
                            cov)
    path = tmp_path / "t.json"
    path.write_text(t.dumps())
    return t, path


def test_predict_zero_cov_gives_zeros(tmp_path):
    _, path = _transform_file(tmp_path, np.zeros((3, 3)))
    assert main(["predict", str(path), "--shape", "5", "7", "--out", str(tmp_path / "p")]) == 0
    values = read_f32(tmp_path / "p" / "sigma_reg.f32")
    assert values.shape == (5, 7) and np.all(values == 0)


def test_predict_diag_oracle(tmp_path):
    cov = np.diag([0.04, 1e-6, 4e-6])
    _, path = _transform_file(tmp_path, cov)
    assert main(["predict", str(path), "--shape", "4", "6", "--out", str(tmp_path / "p")]) == 0
    values = read_f32(tmp_path / "p" / "sigma_reg.f32")
    i, j = np.meshgrid(np.arange(4.0), np.arange(6.0), indexing="ij")
    expect = np.sqrt(0.04 + 1e-6 * i**2 + 4e-6 * j**2)
    np.testing.assert_allclose(values, expect, rtol=1e-6)


def test_predict_stride_consistency(tmp_path):
    rng = np.random.default_rng(0)
    m = rng.normal(size=(6, 6)) * 1e-3
    t, _ = _transform_file(tmp_path, m @ m.T, degree=2)
    full = sigma_reg_grid(t, (20, 30), 1)
    np.testing.assert_allclose(sigma_reg_grid(t, (20, 30), 3), full[::3, ::3], rtol=1e-12)
    e = basis(np.array([[7.0, 11.0]]), 2)[0]
    assert full[7, 11] == pytest.approx(np.sqrt(e @ t.cov @ e), rel=1e-12)


def test_predict_missing_cov_exit_2(tmp_path, capsys):
    _, path = _transform_file(tmp_path, None)
    assert main(["predict", str(path), "--shape", "4", "4", "--out", str(tmp_path / "p")]) == 2
    assert "cov" in capsys.readouterr().err


def test_isolines_linear_crossing():
    values = np.array([[0.0, 0.2, 0.4], [0.3, 0.3, 0.3]])
    rows = isolines(values, stride=2, levels=(0.1, 0.25))
    assert rows == [(0.1, 0.0, 1.0), (0.25, 0.0, 2.5)]


def test_simulate_malformed_spec_exit_2(tmp_path, capsys):
    bad = tmp_path / "spec.json"
    bad.write_text(json.dumps({"size": [8, 8], "H": 1.5}))
    assert main(["simulate", str(bad), "--out", str(tmp_path / "s")]) == 2
    assert "malformed spec" in capsys.readouterr().err
    bad.write_text("{not json")
    assert main(["simulate", str(bad), "--out", str(tmp_path / "s")]) == 2


@pytest.fixture()
def fragments(tmp_path):
    rng = np.random.default_rng(4)
    a = np.cumsum(np.cumsum(rng.normal(size=(17, 17)), 0), 1) * 3.0 + 100.0
    write_f32(tmp_path / "a.f32", a)
    write_f32(tmp_path / "b.f32", a + rng.normal(scale=0.3, size=a.shape))
    write_f32(tmp_path / "n.f32", rng.normal(scale=10.0, size=a.shape))
    write_f32(tmp_path / "c.f32", np.full_like(a, 5.0))
    noise = tmp_path / "noise.json"
    dump_noise_config(noise, NoiseModel(0.1), NoiseModel(0.1))
    return tmp_path, noise


def _crlb(capsys, *args):
    code = main(["crlb", *map(str, args)])
    captured = capsys.readouterr()
    return code, (json.loads(captured.out) if code == 0 else captured.err)


def test_crlb_self_pair_validated(fragments, capsys):
    d, noise = fragments
    code, rep = _crlb(capsys, d / "a.f32", d / "b.f32", "--noise", noise)
    assert code == 0 and rep["validated"] is True
    assert rep["sigma_lb"] < 0.35
    assert rep["sigma_pc"] == pytest.approx(rep["sigma_lb"] / np.sqrt(0.1))


def test_crlb_null_pair_rejected(fragments, capsys):
    d, noise = fragments
    code, rep = _crlb(capsys, d / "a.f32", d / "n.f32", "--noise", noise)
    assert code == 0 and rep["validated"] is False


def test_crlb_constant_fragment_error(fragments, capsys):
    d, noise = fragments
    code, err = _crlb(capsys, d / "a.f32", d / "c.f32", "--noise", noise)
    assert code == 2 and "degenerate" in err
