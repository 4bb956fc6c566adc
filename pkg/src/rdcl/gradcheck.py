"""Central-difference gradient checks for every differentiable building block.

``run_suite(seed)`` returns ``{check name: max relative error}`` for one
random draw at toy shapes.  Kinked ops (relu, abs, hinge, max) are checked
at inputs pushed away from their kinks so the finite difference is valid.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .clm import CLM, ClmHyper, clm_forward, draw_intervention_noise, tie_loss
from .dse import DSE, DseHyper, DseNoise, dse_forward, dse_plus_forward
from .imlm import IMLM, imlm_forward
from .nn import LSTMCell, bilstm_forward

DEFAULT_TOL = 1e-4


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.uniform(gap, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _op_checks(rng: np.random.Generator) -> dict[str, float]:
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    kinked = _away_from_zero(rng, (3, 4))
    bt = Tensor(b)
    wsum = Tensor(rng.standard_normal((3, 4)))  # random projection makes every output coordinate matter
    proj = lambda y: (y * wsum).sum() if y.shape == wsum.shape else (y * y).sum()

    out = {
        "add": ag.grad_check(lambda x: proj(ag.add(x, bt)), a),
        "sub": ag.grad_check(lambda x: proj(ag.sub(bt, x)), a),
        "mul": ag.grad_check(lambda x: proj(ag.mul(x, bt)), a),
        "div": ag.grad_check(lambda x: proj(ag.div(bt, x)), pos),
        "exp": ag.grad_check(lambda x: proj(ag.exp(x)), a),
        "log": ag.grad_check(lambda x: proj(ag.log(x)), pos),
        "tanh": ag.grad_check(lambda x: proj(ag.tanh(x)), a),
        "sigmoid": ag.grad_check(lambda x: proj(ag.sigmoid(x)), a),
        "relu": ag.grad_check(lambda x: proj(ag.relu(x)), kinked),
        "max_with_scalar": ag.grad_check(lambda x: proj(ag.max_with_scalar(x, 0.0)), kinked),
        "abs": ag.grad_check(lambda x: proj(ag.absolute(x)), kinked),
        "sqrt": ag.grad_check(lambda x: proj(ag.sqrt(x)), pos),
        "matmul": ag.grad_check(lambda x: (ag.matmul(x, Tensor(w)) ** 2).sum(), a),
        "logsumexp": ag.grad_check(lambda x: (ag.logsumexp(x, axis=1) * Tensor(np.arange(1.0, 4.0))).sum(), a),
        "mean": ag.grad_check(lambda x: (ag.mean(x, axis=0) ** 2).sum(), a),
        "getitem": ag.grad_check(lambda x: (x[np.array([2, 0, 2])] ** 2).sum(), a),
        "concat": ag.grad_check(lambda x: proj(ag.concat([x[:, :1], x[:, 1:] * 2.0], axis=1)), a),
        "stack": ag.grad_check(lambda x: (ag.stack([x, x * x], axis=0) * Tensor(np.ones((2, 3, 4)))).sum(), a),
        "linear": ag.grad_check(lambda x: (ag.linear(Tensor(a), x, Tensor(np.ones(2))) ** 2).sum(), w.T.copy()),
    }
    return out


def _lstm_checks(rng: np.random.Generator, T: int, d: int) -> dict[str, float]:
    cell = LSTMCell(d, 3, rng)
    seq = [Tensor(rng.standard_normal(d)) for _ in range(3)]

    def loss():
        return cell.run(seq)[-1].sum()

    bwd = LSTMCell(d, 3, rng)
    x = rng.standard_normal((T, d))
    out = {"lstm_cell": ag.grad_check_params(loss, cell.parameters())}
    out["bilstm_input"] = ag.grad_check(
        lambda xs: (bilstm_forward(cell, bwd, xs) * Tensor(np.linspace(-1, 1, 6 * T).reshape(T, 6))).sum(), x)
    return out


def _model_checks(rng: np.random.Generator, T: int, d: int, B: int, n_coords: int) -> dict[str, float]:
    hyper = DseHyper(d=d, d_lat=2, hidden=3, T=T, gamma=1.0, theta=5.0, tau=0.5, delta=0.2,
                     motion_noise=0.1)
    dse = DSE(hyper, rng)
    x1 = rng.standard_normal((B, T, d))
    x2 = rng.standard_normal((B, T, d))
    noise = DseNoise.draw(rng, 2 * B, T, d, hyper)
    out = {}
    sub = np.random.default_rng(rng.integers(2**31))

    out["dse_loss"] = ag.grad_check_params(
        lambda: dse_forward(dse, x1, hyper, noise.take(np.arange(B))).loss, dse.parameters(),
        n_coords=n_coords, rng=sub)
    out["dse_plus_loss"] = ag.grad_check_params(
        lambda: dse_plus_forward(dse, x1, x2, hyper, noise).loss, dse.parameters(),
        n_coords=n_coords, rng=sub)

    widths = {"audio": d, "static": 2, "dynamic": 2}
    clm = CLM(widths, 4, d, rng)
    ch = ClmHyper(tau=2.0, k=2, n_mc_train=2, n_mc_eval=2)
    feats = [rng.standard_normal((2 * B, widths[m])) for m in ("audio", "static", "dynamic")]
    clm.intervention.init_from(dict(zip(("audio", "static", "dynamic"), feats)))
    W = draw_intervention_noise(rng, 2 * B, widths, 2)
    q = Tensor(rng.standard_normal((B, d)))
    labels = rng.integers(0, 2, B)

    def clm_loss():
        return tie_loss(clm_forward(clm, feats_t, q, ch, W).tie_logits, labels)

    feats_t = tuple(Tensor(f) for f in feats)
    out["tie_loss"] = ag.grad_check_params(clm_loss, clm.parameters(), n_coords=n_coords, rng=sub)
    out["tie_loss_features"] = ag.grad_check_params(clm_loss, list(feats_t), n_coords=n_coords, rng=sub)

    imlm = IMLM(widths, 3, rng, zero_projection=False)
    ifeats = {m: Tensor(f) for m, f in zip(("audio", "static", "dynamic"), feats)}
    complete = {m: np.zeros(2 * B, bool) for m in widths}
    missing = {m: np.zeros(2 * B, bool) for m in widths}
    missing["audio"][0] = True
    missing["static"][1] = missing["dynamic"][1] = True
    proj = {m: Tensor(rng.standard_normal((2 * B, widths[m]))) for m in widths}

    def imlm_total():
        res = imlm_forward(imlm, ifeats, complete)
        tail = sum(((res.bundle.out[m] * proj[m]).sum() for m in widths), Tensor(0.0))
        return res.loss + tail

    # completed unique features are constants by design, so the missing-data
    # check covers the loss terms, which only see encoded features
    out["imlm_loss"] = ag.grad_check_params(imlm_total, imlm.parameters(), n_coords=n_coords, rng=sub)
    out["imlm_loss_missing"] = ag.grad_check_params(
        lambda: imlm_forward(imlm, ifeats, missing).loss, imlm.parameters(), n_coords=n_coords, rng=sub)
    return out


def run_suite(seed: int = 0, T: int = 4, d: int = 3, B: int = 3, n_coords: int = 10) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    res = _op_checks(rng)
    res.update(_lstm_checks(rng, T, d))
    res.update(_model_checks(rng, T, d, B, n_coords))
    return res


def run_many(seeds, tol: float = DEFAULT_TOL, **kw) -> tuple[bool, dict[str, float]]:
    """Worst error per check over ``seeds``; passes when every check is within ``tol``."""
    worst: dict[str, float] = {}
    for s in seeds:
        for k, v in run_suite(int(s), **kw).items():
            worst[k] = max(worst.get(k, 0.0), v)
    return all(v <= tol for v in worst.values()), worst
