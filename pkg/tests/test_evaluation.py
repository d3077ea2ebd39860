import csv

import numpy as np
import pytest

from timed.data import gen_sines, shuffle_split
from timed.evaluation import (
    GruTraining,
    PcaConvergenceError,
    ScoreReport,
    discriminative_score,
    equalize,
    forecast_mae,
    mmd_metric,
    pca_project,
    power_iteration,
    predictive_score,
    write_projection_csv,
    write_projection_svg,
    write_scores_csv,
)
from timed.numerics import Rng

FAST = GruTraining(steps=300, batch_size=64)


@pytest.fixture(scope="module")
def sines():
    return gen_sines(1000, 24, 4, Rng(0))


def test_discriminative_noise_is_separable(sines):
    noise = Rng(1).uniform(0, 1, sines.shape)
    assert discriminative_score(sines, noise, Rng(2), FAST) > 0.4


def test_discriminative_self_null(sines):
    a, b = shuffle_split(sines, 0.5, Rng(3))
    assert discriminative_score(a, b, Rng(4), FAST) < 0.1


def test_discriminative_validation(sines):
    with pytest.raises(ValueError, match="shapes"):
        discriminative_score(sines, np.zeros((10, 23, 4)), Rng(0), FAST)
    with pytest.raises(ValueError, match="fewer than 5"):
        discriminative_score(sines.samples[:6], sines.samples[6:12], Rng(0), FAST)


def test_discriminative_score_is_reproducible(sines):
    noise = Rng(1).uniform(0, 1, sines.shape)
    cfg = GruTraining(steps=30, batch_size=64)
    a = discriminative_score(sines, noise, Rng(9), cfg, return_details=True)
    b = discriminative_score(sines, noise, Rng(9), cfg, return_details=True)
    assert a == b
    assert a[0] == pytest.approx(abs(a[1] - 0.5))


def test_predictive_constant_sequences():
    x = np.full((256, 12, 2), 0.3, dtype=np.float32)
    assert predictive_score(x, x, Rng(0), GruTraining(steps=400, batch_size=64, lr=1e-2)) < 1e-2


def test_zero_forecaster_on_uniform_data():
    data = Rng(5).uniform(0, 1, (2000, 24, 3))
    mae = forecast_mae(lambda x: np.zeros_like(x), data)
    assert abs(mae - 0.5) < 0.05


def test_predictive_score_on_sines(sines):
    a, b = shuffle_split(sines, 0.5, Rng(1))
    assert predictive_score(a, b, Rng(2), FAST) < 0.2


def test_mmd_metric_null_shift_and_symmetry(sines):
    a, b = shuffle_split(sines, 0.5, Rng(7))
    null = mmd_metric(a, b, Rng(0))
    shifted = mmd_metric(a, b.samples + 0.5, Rng(0))
    assert abs(null) < 0.05
    assert shifted >= 5 * max(abs(null), 1e-3)
    # float32 arithmetic: symmetric up to rounding
    assert mmd_metric(b, a, Rng(0)) == pytest.approx(null, abs=1e-6)


def test_equalize_subsamples_larger_set():
    r, s = equalize(np.zeros((10, 2, 1)), np.ones((4, 2, 1)), Rng(0))
    assert len(r) == len(s) == 4


def test_score_report():
    rep = ScoreReport.from_values("discriminative", [0.1, 0.3], "fp")
    assert (rep.mean, rep.repeats) == (pytest.approx(0.2), 2)
    assert rep.std == pytest.approx(0.1)
    with pytest.raises(ValueError):
        ScoreReport.from_values("x", [])


# ---------------------------------------------------------------------------
# PCA


def _brute_eigen(cov):
    # characteristic polynomial roots, then null vectors by SVD
    d = len(cov)
    coeffs = np.poly(cov)
    vals = np.sort(np.real(np.roots(coeffs)))[::-1]
    vecs = []
    for lam in vals[:2]:
        _, _, vt = np.linalg.svd(cov - lam * np.eye(d))
        v = vt[-1]
        vecs.append(v if v[np.argmax(np.abs(v))] > 0 else -v)
    return vals[:2], np.array(vecs)


def test_pca_three_point_toy_matches_brute_force():
    real = np.array([[[0.0, 1.0, 2.0]], [[1.0, 0.5, -1.0]]])
    synth = np.array([[[2.0, -1.0, 0.5]]])
    proj = pca_project(real.reshape(2, 1, 3), synth.reshape(1, 1, 3))
    pooled = np.concatenate([real, synth]).reshape(3, 3)
    cov = np.cov(pooled.T)
    vals, vecs = _brute_eigen(cov)
    np.testing.assert_allclose(proj.eigenvalues, vals, atol=1e-6)
    np.testing.assert_allclose(proj.components, vecs, atol=1e-6)


def test_pca_orthonormal_and_ordered():
    x = Rng(0).normal((50, 6, 2)) * np.linspace(0.2, 2.0, 12).reshape(1, 6, 2)
    proj = pca_project(x[:25], x[25:])
    np.testing.assert_allclose(proj.components @ proj.components.T, np.eye(2), atol=1e-6)
    assert proj.eigenvalues[0] >= proj.eigenvalues[1]
    ref = np.sort(np.linalg.eigvalsh(np.cov(x.reshape(50, -1).T)))[::-1][:2]
    np.testing.assert_allclose(proj.eigenvalues, ref, rtol=1e-6)


def test_pca_single_axis_and_mean():
    x = np.zeros((8, 2, 2))
    x[:, 1, 0] = np.arange(8.0)
    proj = pca_project(x[:4], x[4:])
    np.testing.assert_allclose(np.abs(proj.components[0]), [0, 0, 1, 0], atol=1e-8)
    assert proj.eigenvalues[1] == pytest.approx(0.0, abs=1e-10)
    np.testing.assert_allclose(proj.project(proj.mean.reshape(1, 2, 2)), [[0.0, 0.0]], atol=1e-12)
    assert proj.sources == ["real"] * 4 + ["synthetic"] * 4


def test_pca_errors():
    with pytest.raises(ValueError):
        pca_project(np.zeros((1, 2, 1)), np.zeros((1, 2, 1)))
    cov = np.diag([1.0, 1.0 - 1e-9, 0.5])
    with pytest.raises(PcaConvergenceError) as err:
        power_iteration(cov, 1, tol=1e-14, max_iter=5)
    assert err.value.residual > 0 and err.value.iterations == 5


# ---------------------------------------------------------------------------
# monotone sanity and export


def test_noise_ladder_non_decreasing(sines):
    real, base = shuffle_split(sines, 0.5, Rng(11))
    scores = []
    for k, level in enumerate((0.0, 0.1, 0.3)):
        noisy = np.clip(base.samples + level * Rng(20 + k).normal(base.shape), 0, 1)
        scores.append(discriminative_score(real, noisy, Rng(30), FAST))
    assert scores[0] <= scores[1] <= scores[2], scores


def test_exports(tmp_path, sines):
    reps = [ScoreReport.from_values("discriminative", [0.1, 0.2]), ScoreReport.from_values("predictive", [0.05])]
    write_scores_csv(tmp_path / "scores.csv", reps)
    rows = list(csv.reader((tmp_path / "scores.csv").open()))
    assert rows[0] == ["metric", "mean", "std", "repeats"]
    assert rows[2][0] == "predictive" and rows[2][3] == "1"

    proj = pca_project(sines.samples[:20], sines.samples[20:35])
    write_projection_csv(tmp_path / "p.csv", proj)
    rows = list(csv.reader((tmp_path / "p.csv").open()))
    assert rows[0] == ["source", "pc1", "pc2"] and len(rows) == 36
    assert {r[0] for r in rows[1:]} == {"real", "synthetic"}
    np.testing.assert_allclose(float(rows[1][1]), proj.points[0, 0])

    write_projection_svg(tmp_path / "p.svg", proj)
    svg = (tmp_path / "p.svg").read_text()
    assert svg.count("<circle") == 35 and svg.startswith("<svg")


def test_scorer_trains_inside_no_grad(sines):
    from timed.numerics import no_grad

    noise = Rng(1).uniform(0, 1, sines.shape)
    with no_grad():
        assert discriminative_score(sines, noise, Rng(2), FAST) > 0.4
