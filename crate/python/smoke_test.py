"""Smoke test for the pcaplab extension module.

Build first:  pip install --no-build-isolation -e crates/python
Run:          python3 python/smoke_test.py
"""

import json
import math
import pathlib

import pcaplab

ROOT = pathlib.Path(__file__).resolve().parent.parent


def close(a, b, rel):
    return abs(a - b) <= rel * abs(b)


def main():
    params = pcaplab.Params(2, 1.5)
    assert params.q_rad == 1.0 and params.alpha_star == -1.0
    assert close(params.c_np, 2 * math.pi, 1e-12)

    try:
        pcaplab.Params(2, 2.5)
    except pcaplab.PcaplabError:
        pass
    else:
        raise AssertionError("p >= n accepted")

    disk = pcaplab.Body.ball([0.0, 0.0], 1.0)
    square = pcaplab.Body.polygon([[-1, -1], [1, -1], [1, 1], [-1, 1]])
    assert disk.contains([0.5, 0.5]) and not disk.contains([0.9, 0.9])
    assert close(square.diameter(), 2 * math.sqrt(2), 1e-9)

    big = disk.scaled(2.0, [1.0, -1.0])
    rho, xi, res = pcaplab.homothety_fit(disk, big)
    assert close(rho, 2.0, 1e-9) and res < 1e-9, (rho, xi, res)
    mid = pcaplab.minkowski_combination(disk, square, 0.5)
    assert mid.dim == 2

    sol = pcaplab.solve(disk, params, cells=128)
    assert sol.converged
    exact = pcaplab.capacity_ball_exact(1.0, params)
    cap = sol.capacity("energy")
    assert close(cap, exact, 0.03), (cap, exact)
    assert close(sol.value_at([2.0, 0.0]), 0.5, 0.02)
    level = sol.level_set(0.5)
    _, _, res = pcaplab.homothety_fit(disk, level)
    assert res < 1e-2, res
    conc = sol.concavity(seed=3)
    print(f"disk: capacity {cap:.5f} (exact {exact:.5f}), alpha_support {conc['alpha_support']:.3f}")

    bm = pcaplab.bm_deficit(disk, square, 0.5, params, cells=128)
    assert bm["deficit"] > 0, bm
    print(f"bm disk/square: deficit {bm['deficit']:.4f} tolerance {bm['tolerance']:.4f}")

    verdict, report = pcaplab.run_config((ROOT / "scenarios" / "ball.json").read_text())
    assert verdict == "PASS", verdict
    assert json.loads(report)["scenario"] == "ball"
    print("run_config ball.json:", verdict)
    print("smoke test ok")


if __name__ == "__main__":
    main()
