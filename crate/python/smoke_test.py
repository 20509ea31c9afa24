"""Smoke test for the Python bindings.

Build and install first:
    pip install --no-build-isolation ./crates/py
"""

import math

import tokenhorizon_py as th


def main():
    assert th.retained_count(0.5, 5) == 3
    assert th.retained_count(0.25, 576) == 144

    # Max-min keeps the two far-apart directions.
    picked = th.select_maxmin([[1.0, 0.0], [0.99, 0.01], [0.0, 1.0], [-1.0, 0.0]], 0.5)
    assert len(picked) == 2 and 0 in picked, picked

    names = th.Schedule.preset_names()
    assert "dart-random-64" in names
    cost = th.flops_estimate(th.Schedule.preset("dart-random-64"))
    assert abs(cost["reduction_percent"] - 74.4) <= 10.0, cost
    print(f"dart-random-64: {cost['tflops']:.3f} TFLOPs, {cost['reduction_percent']:.1f}% saved")

    ck, loss = th.train("small", steps=20)
    assert len(loss) == 20 and all(math.isfinite(x) for x in loss)
    data = th.heldout("lookup", "small")[:20]
    seq = data[0]
    assert seq.n_visual == 16

    probs = ck.probs(seq)
    assert abs(sum(probs) - 1.0) < 1e-9

    profile = ck.information_profile(seq)
    assert len(profile) == ck.n_layers + 1
    assert all(v == 0.0 for v in profile[-1])

    horizon, stats = ck.horizon(data, tau=1.0)
    assert horizon == 0 and len(stats) == ck.n_layers + 1

    sweep = ck.withdraw_sweep(data, samples=20)
    assert sweep["accuracy"][-1] == sweep["baseline"]

    half = th.Schedule.from_toml(
        'name = "half"\nratio_basis = "original"\n'
        '[[action]]\nlayer = 1\nstrategy = "random"\nretain_ratio = 0.5\nseed = 3\n'
    )
    _, alive = ck.apply_schedule(seq, half)
    assert alive[0] == 16 and alive[1] == 8, alive

    try:
        th.Checkpoint.load("/nonexistent.ckpt")
    except OSError:
        pass
    else:
        raise AssertionError("missing checkpoint loaded")

    print(f"{ck!r}: held-out accuracy after 20 steps {ck.accuracy(data):.2f}")
    print("smoke test passed")


if __name__ == "__main__":
    main()
