"""Smoke test for the sdca_py extension.

Build and run from the repository root:

    cargo build --release -p sdca-python --features extension-module
    cp target/release/libsdca_py.so python/sdca_py.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import sdca_py


def main():
    bank = sdca_py.DistributionBank(2, 2)
    pts = [[0.0, 1.0], [2.0, 1.0], [5.0, 5.0], [7.0, 3.0]]
    bank.update(pts[:1] + pts[2:3], [0, 1])
    bank.update(pts[1:2] + pts[3:], [0, 1])
    assert bank.count(0) == 2
    assert bank.mean(0) == [1.0, 1.0]
    assert abs(bank.covariance(1)[0][1] - (-1.0)) < 1e-12

    zero = [[0.0, 0.0], [0.0, 0.0]]
    q = [0.3, -0.2]
    b, grad = sdca_py.closed_form_bound(q, [1.0, 0.0], zero, [[0.0, 1.0]], [zero], 0.5)
    exact = math.log(math.exp(0.6) + math.exp(-0.4)) - 0.6
    assert abs(b - exact) < 1e-12, (b, exact)
    assert len(grad) == 2

    cov = [[0.2, 0.05], [0.05, 0.1]]
    b, _ = sdca_py.closed_form_bound(q, [1.0, 0.0], cov, [[0.0, 1.0]], [cov], 0.5)
    mc, se = sdca_py.mc_expected_loss(q, [1.0, 0.0], cov, [[0.0, 1.0]], [cov], 0.5, 20000, 1)
    assert b >= mc - 3 * se, (b, mc, se)

    per_class, miou = sdca_py.iou([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert abs(per_class[0] - 0.5) < 1e-12 and abs(miou - (0.5 + 2 / 3) / 2) < 1e-12

    loss = sdca_py.lovasz_softmax(1, 2, [[50.0, 0.0], [0.0, 50.0]], [0, 1])
    assert loss < 1e-9

    report = json.loads(sdca_py.certify(0, True))
    assert report["passed"], report

    cfg = sdca_py.ExperimentConfig()
    cfg.set("delta", "0.8")
    assert "delta = 0.8" in cfg.to_text()
    try:
        cfg.set("no_such_key", "1")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
