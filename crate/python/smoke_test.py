"""Smoke test for the Python bindings.

Build and install first:

    pip install --no-build-isolation -e crates/py
    python python/smoke_test.py
"""

import cmath
import json
import math

import meso_rmt_py as mr


def close(a, b, tol):
    assert abs(a - b) <= tol, f"{a} vs {b}"


def main():
    p = mr.Profile.constant(64)
    assert p.n == 64 and p.kind == "constant"
    close(p.c_inf, 1.0, 1e-12)
    back = mr.Profile.from_json(p.to_json())
    assert back.dense() == p.dense()

    z = complex(0.3, 0.05)
    m = mr.solve_vde(p, z)
    assert len(m) == 64
    close(m[0], mr.m_sc(z), 1e-10)
    close(m[0], (-z + cmath.sqrt(z - 2) * cmath.sqrt(z + 2)) / 2, 1e-10)

    g = mr.density_grid(p, n_points=201)
    mid = g["rho"][100]
    close(mid, 1 / math.pi, 1e-3)
    assert len(g["bulk_intervals"]) == 1

    ev = mr.sample_eigenvalues(mr.Profile.smooth_kernel(100), seed=7, index=3, family="rademacher", beta=2)
    assert len(ev) == 100 and ev == sorted(ev)
    assert ev == mr.sample_eigenvalues(mr.Profile.smooth_kernel(100), seed=7, index=3, family="rademacher", beta=2)

    rep = mr.stability_report(mr.Profile.block([[1.0, 0.5], [0.5, 1.5]], 60), complex(0.1, 1e-3), complex(0.1, -1e-3))
    assert rep["gap"] >= 0.05 and rep["restricted_inverse_norm"] < 50
    assert rep["quadrature_nodes"] > 0

    close(mr.h_half_norm(json.dumps({"family": "gaussian"})), 2 * math.pi, 1e-3)
    v1 = mr.predict_variance(json.dumps({"family": "bump"}), 1)
    v2 = mr.predict_variance(json.dumps({"family": "bump"}), 2)
    close(v1 / v2, 2.0, 1e-12)

    d = 0.1
    k = mr.kernel_k_tilde(p, 0.0, d, 1e-6)
    assert abs(k - 2 / d**2) <= 0.2 * 2 / d**2

    kz = mr.kernel_k(p, complex(0.2, 0.3), complex(-0.1, -0.2), "gaussian", 2)
    kc = mr.kernel_k(p, complex(0.2, -0.3), complex(-0.1, 0.2), "gaussian", 2)
    close(kz, kc.conjugate(), 1e-9 * abs(kz))

    zero = mr.variance_via_kernel(p, json.dumps({"family": "zero"}), 0.0, 0.2)
    assert zero["v_kernel"] == 0.0 and zero["v_hhalf"] == 0.0

    try:
        mr.Profile.constant(1)
    except ValueError:
        pass
    else:
        raise AssertionError("n = 1 accepted")

    cfg = {
        "profile": {"kind": "constant"},
        "n": 80,
        "law": {"family": "gaussian", "beta": 1},
        "seed": 11,
        "test_function": {"base": {"family": "bump"}, "eta0": 0.25},
        "n_samples": 200,
    }
    s = mr.run_clt(json.dumps(cfg))
    assert len(s["statistics"]) == 200
    close(sum(s["statistics"]), 0.0, 1e-9)
    assert s["sample_variance"] > 0 and 0 <= s["ks_p"] <= 1

    print("python smoke test passed")


if __name__ == "__main__":
    main()
