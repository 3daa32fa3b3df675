"""Smoke test for the `entangle` extension module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`
or `pip install ./crates/py`, then run `python python/smoke_test.py`.
"""

import math

import entangle


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    eig = entangle.eig_symmetric(entangle.make_dense_gamma(3, 0.4))
    assert all(close(a, b) for a, b in zip(eig, [1.0, 0.6, 0.6])), eig

    sv = entangle.singular_values(entangle.make_orthogonal_gamma(16, seed=3))
    assert all(close(s, 1.0) for s in sv), sv

    spec = entangle.EntanglementSpec("kind=dense gamma=0.5 n=4")
    report = spec.spectrum()
    assert close(report["spectral_norm"], 1.0), report
    assert entangle.EntanglementSpec("kind=spatial gamma=0.5 k=3 c=2").kernel_file().startswith(
        "ENTANGLE-KERNEL v1\n"
    )

    # identity entanglement reduces a block to the plain residual x + f(x)
    block = entangle.Block.mlp_residual(4, 8, entangle.EntanglementSpec("identity"), seed=1)
    x = entangle.Tensor.randn([3, 4], seed=2)
    y, f = block.forward(x)
    assert max(abs(a - (b + c)) for a, b, c in zip(y.data, x.data, f.data)) <= 1e-15

    lstm = entangle.Block.lstm_cell(2, 3, entangle.EntanglementSpec("kind=dense gamma=0.3"), seed=4)
    c, h = lstm.step(entangle.Tensor([3], [0.0] * 3), entangle.Tensor([3], [0.0] * 3), entangle.Tensor([2], [1.0, -1.0]))
    assert c.shape == [3] and all(math.isfinite(v) for v in h.data)

    lo, hi = entangle.lemma1_bounds(1.0, 2.0, 1.0, 1.0)
    assert close(lo, 0.25) and math.isinf(hi)

    metrics = entangle.train_run(
        "[experiment]\ntask = spiral2d\nmodel = res_mlp\nepochs = 2\ntrain_size = 200\ntest_size = 100\n",
        seed=0,
    )
    assert metrics["status"] == "completed" and len(metrics["epochs"]) == 3, metrics

    results = entangle.check()
    assert all(passed for _, _, passed, _ in results), results
    assert not all(passed for _, _, passed, _ in entangle.check(perturb="dense"))

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
