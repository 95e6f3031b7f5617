"""Smoke test for the Python bindings.

Build the extension first, e.g. `maturin develop -m crates/py/Cargo.toml`,
then run `python python/smoke_test.py`.
"""

import math

import rnn_constctl as rc


def close(a, b, tol):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def main():
    toy = rc.Model.from_json(
        '{"dim":1,"k":1,"decay":[1.0],"W":[[0.0]],"B":[[1.0]],'
        '"activation":{"kind":"linear"}}'
    )
    r = rc.synthesize(toy, [0.0], [1.0], 1.0, "linear")
    assert abs(r["u"][0] - 1.0 / (1.0 - math.exp(-1.0))) < 1e-12, r

    rot = rc.Model.from_json(
        '{"dim":2,"k":2,"decay":[1.0,1.0],"W":[[1.0,-4.0],[4.0,1.0]],'
        '"B":[[1.0,0.0],[0.0,1.0]],"activation":{"kind":"linear"}}'
    )
    try:
        rc.synthesize(rot, [0.0, 0.0], [1.0, 2.0], math.pi / 2, "linear")
        raise AssertionError("rotation should be singular")
    except rc.SingularSystemError:
        pass
    assert not rc.check_spectral(rot, math.pi / 2)["ok"]

    model = rc.generate_model("small_norm_tanh", 6, 3)
    assert model.dim == 6 and model.activation == "tanh"
    x0 = [0.4, -0.3, 0.2, 0.1, -0.5, 0.3]
    free = rc.flow_forward(model, x0, 0.5)
    back = rc.flow_backward(model, free, 0.5)
    assert close(back, x0, 1e-9)

    x1 = [f + 0.05 for f in free]
    for method in ("forward", "backward"):
        r = rc.synthesize(model, x0, x1, 0.5, method)
        reached = rc.simulate(model, x0, 0.5, u=r["u"])
        err = math.dist(reached, x1) / math.dist(x1, x0)
        assert err < 0.05, (method, err)

    chart = rc.reachable(model, x0, 0.25, 3)
    assert len(chart.basis) == 6 and len(chart.basis[0]) == 3
    target = chart.target([0.01, -0.02, 0.005])
    u = chart.control(target)
    assert len(u) == 3
    off = list(target)
    off[5] += 1.0
    try:
        chart.control(off)
        raise AssertionError("off-chart target accepted")
    except rc.TargetOffChartError:
        pass

    again = rc.Model.from_json(model.to_json())
    assert again.linear_part() == model.linear_part()
    print("smoke test passed")


if __name__ == "__main__":
    main()
