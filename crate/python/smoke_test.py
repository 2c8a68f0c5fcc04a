"""Smoke test for the `degm` extension module.

Build first with `maturin develop -m crates/py/Cargo.toml`, then run
`python python/smoke_test.py`.
"""

import math
import os
import tempfile

import degm


def main():
    x, labels = degm.synth_images("bars", 64, seed=1)
    assert len(x) == 64 and len(x[0]) == 144 and len(labels) == 64

    model = degm.VaeModel(144, seed=3)
    assert model.param_count == 43440

    history = model.fit(x, epochs=3, batch_size=16, seed=4)
    assert len(history) == 3 and all(math.isfinite(v) for v in history)

    elbo, _, _ = model.elbo(x, seed=5)
    iw1, _, _ = model.iwelbo(x, 1, seed=5)
    assert abs(elbo - iw1) < 1e-9, (elbo, iw1)
    nll, se = model.nll(x, k_prime=50, seed=6)
    assert nll > 0 and se >= 0
    assert len(model.reconstruct(x[:2])[0]) == 144

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.degm")
        model.save(path)
        assert degm.VaeModel.load(path).param_hash() == model.param_hash()

    assert degm.expansion_decision([5.0, 9.0], 8.0) == "specific"
    assert degm.expansion_decision([9.0], 8.0) == "basic"
    w = degm.importance_weights([2.0, 4.0, 6.0])
    assert all(abs(a - b) < 1e-12 for a, b in zip(w, [10 / 24, 8 / 24, 6 / 24])), w
    assert abs(degm.gaussian_kl([[0.0, 0.0]], [[0.0, 0.0]])) < 1e-12
    assert degm.squared_loss([1.0, 2.0], [1.0, 0.0]) == 4.0
    assert degm.discrepancy_slack(2000, 2000, 1.0, 0.05, 0.0, 0.0) > 0
    assert sorted(degm.accumulated_term_counts([1, 1, 2])) == [1, 2, 3]

    try:
        degm.importance_weights([])
    except degm.DegmError:
        pass
    else:
        raise AssertionError("expected DegmError")

    graph, final_nll = degm.train_degm(
        ["bars", "blobs"], tau=20.0, epochs=1, n_train=128, n_test=32, eval_k_prime=5, seed=7
    )
    assert graph.node_count == 2 and len(final_nll) == 2
    assert graph.kinds[0] == "basic"
    node, scores = graph.select(x[:16])
    assert node in [s[0] for s in scores]
    print("smoke test ok:", graph.kinds, [round(v, 2) for v in final_nll])


if __name__ == "__main__":
    main()
