"""Python smoke tests for the homogelast extension module."""

import math

import numpy as np
import pytest

import homogelast as hg


@pytest.fixture(scope="module")
def layered():
    model = hg.DensityModel.layered([0.0, 0.5, 1.0], [1.0, 4.0], alpha=0.1, p=4.0)
    record = hg.calibrate(model)
    bound = hg.ConvexBound(model, record)
    return model, record, bound


def test_distance_and_rotation():
    assert hg.dist_so(np.eye(2)) == pytest.approx(0.0, abs=1e-14)
    R = hg.rotation(0.7)
    assert hg.dist_so(R) == pytest.approx(0.0, abs=1e-12)
    F = np.array([[1.2, 0.1], [0.0, 0.9]])
    assert hg.dist_so(R @ F) == pytest.approx(hg.dist_so(F), abs=1e-12)


def test_det_calculus():
    F = np.array([[1.1, 0.2], [-0.3, 0.8]])
    det, cof, hess = hg.det_calculus(F)
    assert det == pytest.approx(np.linalg.det(F), rel=1e-12)
    h = 1e-6
    E = np.zeros((2, 2))
    E[0, 1] = 1.0
    fd = (np.linalg.det(F + h * E) - np.linalg.det(F - h * E)) / (2 * h)
    assert cof[0, 1] == pytest.approx(fd, rel=1e-6)
    assert hess.shape == (4, 4)


def test_certify_well():
    model = hg.DensityModel.well(alpha=0.1, p=4.0, modulation="constant", base=1.0)
    report = hg.certify(model, n_samples=1500, seed=11)
    assert report["all_passed"]


def test_calibration_and_matching(layered):
    _, record, bound = layered
    assert record.lambda_ > 0
    assert 0 < record.delta < 0.1
    assert bound.mu == record.mu
    rep = hg.verify_matching(bound, n_samples=400, seed=5)
    assert rep["violations"] == 0
    assert rep["passed"]


def test_corrector_and_w_hom(layered):
    model, _, bound = layered
    # rotations are energy neutral
    assert hg.w_hom(bound, hg.rotation(0.4), n=16) <= 1e-10

    F = np.eye(2)
    F[1, 0] = 0.05
    sol = hg.solve_corrector(bound, F, n=16)
    assert sol["residual"] <= 1e-10
    assert sol["phi1"].shape == (16, 16)
    assert sol["max_dist_so"] < record_delta(bound)

    oracle = hg.solve_layered(model, F)
    assert oracle["flux_residual"] <= 1e-10
    assert hg.w_hom(bound, F, n=16) == pytest.approx(oracle["energy_w"], rel=1e-9)


def record_delta(bound):
    return bound.delta


def test_homogenized_derivatives(layered):
    _, _, bound = layered
    F = np.eye(2)
    F[1, 0] = 0.03
    D = hg.dw_hom(bound, F, n=16)
    h = 1e-4
    E = np.zeros((2, 2))
    E[1, 0] = 1.0
    fd = (hg.w_hom(bound, F + h * E, n=16) - hg.w_hom(bound, F - h * E, n=16)) / (2 * h)
    assert D[1, 0] == pytest.approx(fd, rel=1e-4)

    T = hg.d2w_hom(bound, F, n=16)
    value, a, b = hg.rank_one_certificate(T)
    assert value > 0
    assert abs(np.linalg.norm(a) - 1) < 1e-12


def test_multicell_gap(layered):
    _, _, bound = layered
    F = np.eye(2)
    F[1, 0] = 0.04
    rows = hg.single_vs_multicell(bound, F, n=8, k_list=[2], n_starts=2, seed=3)
    gaps = {row["k"]: row["rel_gap"] for row in rows}
    assert gaps[2] <= 1e-5


def test_error_study_smoke(layered):
    _, _, bound = layered
    report = hg.error_study(bound, eps_list=[0.25, 0.125], mesh_factor=8, f=(0.0, -0.015))
    assert report["complete"]
    rows = report["rows"]
    assert len(rows) == 2
    assert rows[1]["err_h1"] < rows[0]["err_h1"]
