"""Finite-difference gradient verification, including negative controls."""

import numpy as np
import pytest

from microdenoise.gradcheck import CASES, check_network, run_all, run_case


def test_every_op_case_passes():
    reports = run_all(seed=0)
    failing = [r.name for r in reports if not r.passed]
    assert failing == [], f"gradient mismatches: {failing}"


def test_each_registered_case_listed_exactly_once():
    reports = run_all(seed=0)
    assert sorted(r.name for r in reports) == sorted(CASES)
    assert len(set(CASES)) == len(CASES)


def test_case_coverage_spans_the_layer_vocabulary():
    # every differentiable building block shows up in some case name
    blob = " ".join(CASES)
    for op in ("conv2d", "depthwise", "transposed", "bilinear", "batch_norm",
               "relu6", "concat", "pool", "sqrt", "mean", "sum"):
        assert op in blob, f"no finite-difference case mentions {op}"


def test_tampered_gradient_is_caught():
    # scale one op's gradients by 5%: the checker must flag it
    name = sorted(CASES)[0]
    clean = run_case(name, seed=0)
    assert clean.passed

    def scale_up(_name, grads):
        for i, g in enumerate(grads):
            grads[i] = g * 1.05

    broken = run_case(name, seed=0, tamper=scale_up)
    assert not broken.passed


def test_network_check_passes_at_default_scale():
    report = check_network(seed=0)
    assert report.passed, f"{report.name}: {report.max_rel_err} > {report.tol}"
    assert report.max_rel_err < 1e-2


def test_network_check_catches_tampering():
    def scale_up(_name, grads):
        for k in grads:
            grads[k] = grads[k] * 1.05

    report = check_network(seed=0, tamper=scale_up)
    assert not report.passed


def test_network_check_stable_across_seeds():
    worst = max(check_network(seed=s).max_rel_err for s in (1, 2, 3))
    assert worst < 1e-2
