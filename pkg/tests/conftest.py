import numpy as np
import pytest

from hygrec.hypergraph import Hyperedge, build_incidence


def make_random_hypergraph(rng, max_nodes=60, max_edges=40, view_tag="item"):
    """Random non-degenerate hypergraph for property tests."""
    n_nodes = int(rng.integers(3, max_nodes + 1))
    n_edges = int(rng.integers(1, max_edges + 1))
    edges = []
    for h in range(n_edges):
        size = int(rng.integers(1, min(6, n_nodes) + 1))
        members = rng.choice(n_nodes, size=size, replace=False)
        edges.append(Hyperedge(members, provenance=f"e{h}"))
    return build_incidence(edges, n_nodes, view_tag=view_tag)


def finite_difference(loss_fn, params, step=1e-5):
    """Max relative error between analytic gradients and central
    differences, over every entry of every parameter.

    ``loss_fn`` rebuilds the computation and returns (tape, loss) so each
    probe re-evaluates from scratch; analytic gradients must already be
    in ``param.grad``.
    """
    from hygrec.kernels import backward

    tape, loss = loss_fn()
    backward(tape, loss)
    analytic = {p.name: p.grad.copy() for p in params}
    for p in params:
        p.grad[...] = 0.0

    worst = 0.0
    for p in params:
        fd = np.zeros_like(p.value)
        it = np.nditer(p.value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p.value[idx]
            p.value[idx] = orig + step
            _, lp = loss_fn()
            p.value[idx] = orig - step
            _, lm = loss_fn()
            p.value[idx] = orig
            fd[idx] = (float(lp.value) - float(lm.value)) / (2.0 * step)
        a = analytic[p.name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-4)
        worst = max(worst, float(np.max(np.abs(a - fd) / denom)))
    return worst


@pytest.fixture(scope="session")
def tiny_synthetic():
    from hygrec.synthetic import generate

    return generate(seed=1234, n_sessions=24, n_items=16, head_size=6)
