"""Counterfactual learning over batch affinity graphs.

Objects in a batch are graph nodes.  For each modality (audio, static factor,
dynamic summary) a similarity matrix ``exp(cos / tau)`` is sparsified to the
top-k entries per row and row-normalized; message passing mixes every
object's features with its neighbours'.  Predictions come from a fusion MLP
and a two-way classifier.  The Total Indirect Effect (TIE) subtracts the
mean prediction obtained when the affinity graphs are rebuilt from Gaussian
counterfactual features while the features that are passed stay factual.

The top-k selection mask is treated as a constant during differentiation.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import NumericDomainError, ShapeError, Tensor
from .nn import Linear, MLP2, Module

MODALITIES = ("audio", "static", "dynamic")


@dataclass
class ClmHyper:
    tau: float = 2.0
    k: int = 5
    n_mc_train: int = 1
    n_mc_eval: int = 5

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.n_mc_train < 1 or self.n_mc_eval < 1:
            raise ValueError("Monte-Carlo sample counts must be at least 1")


# ------------------------------------------------------------------- graphs
def similarity_matrix(X, tau: float, allow_zero_rows: bool = False) -> Tensor:
    """``S[i, j] = exp(cos(x_i, x_j) / tau)`` with an exact ``exp(1 / tau)`` diagonal.

    Zero-norm rows raise unless ``allow_zero_rows``, in which case their
    off-diagonal cosines are 0.
    """
    X = ag.as_tensor(X)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ShapeError(f"similarity_matrix expects (B, d) with B >= 1, got {X.shape}")
    sq = (X * X).sum(axis=1, keepdims=True)
    zero = sq.data[:, 0] == 0.0
    if zero.any():
        if not allow_zero_rows:
            raise NumericDomainError(f"similarity_matrix: row {int(np.argmax(zero))} has zero norm")
        sq = sq + Tensor(zero[:, None].astype(float))
    Xn = X / ag.sqrt(sq)
    C = ag.matmul(Xn, ag.transpose(Xn))
    eye = np.eye(X.shape[0])
    C = C * Tensor(1.0 - eye) + Tensor(eye)
    return ag.exp(C / tau)


def topk_mask(values: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row; ties go to the lowest column."""
    B = values.shape[1]
    if not 1 <= k <= B:
        raise ValueError(f"k={k} outside [1, {B}]")
    order = np.argsort(-values, axis=1, kind="stable")[:, :k]
    mask = np.zeros(values.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def topk_filter(S, k: int) -> Tensor:
    S = ag.as_tensor(S)
    return S * Tensor(topk_mask(S.data, k).astype(float))


def row_normalize(S_prime) -> Tensor:
    S_prime = ag.as_tensor(S_prime)
    rows = S_prime.sum(axis=1, keepdims=True)
    if np.any(rows.data <= 0.0):
        raise NumericDomainError("row_normalize: a row sums to zero")
    return S_prime / rows


@dataclass
class AffinityMatrix:
    A: Tensor
    k: int

    def check(self, tol: float = 1e-9) -> None:
        a = self.A.data
        if (a < 0).any():
            raise AssertionError("negative affinity")
        if ((a != 0).sum(axis=1) > self.k).any():
            raise AssertionError("row exceeds k neighbours")
        if np.abs(a.sum(axis=1) - 1.0).max() > tol:
            raise AssertionError("row does not sum to one")

    def neighbours(self) -> list[list[tuple[int, float]]]:
        a = self.A.data
        out = []
        for row in a:
            idx = np.flatnonzero(row)
            idx = idx[np.argsort(-row[idx], kind="stable")]
            out.append([(int(j), float(row[j])) for j in idx])
        return out


@dataclass
class AugmentedAffinity:
    audio: AffinityMatrix
    static: AffinityMatrix
    dynamic: AffinityMatrix

    def blocks(self) -> tuple[AffinityMatrix, AffinityMatrix, AffinityMatrix]:
        return self.audio, self.static, self.dynamic


def build_affinity(X, tau: float, k: int, allow_zero_rows: bool = False) -> AffinityMatrix:
    S = similarity_matrix(X, tau, allow_zero_rows)
    return AffinityMatrix(row_normalize(topk_filter(S, k)), k)


def build_augmented_affinity(X_audio, X_static, X_dynamic, hyper: ClmHyper,
                             allow_zero_rows: bool = False) -> AugmentedAffinity:
    Xs = [ag.as_tensor(X) for X in (X_audio, X_static, X_dynamic)]
    B = Xs[0].shape[0]
    if any(X.shape[0] != B for X in Xs):
        raise ShapeError("modalities disagree on batch size")
    k = min(hyper.k, B)
    return AugmentedAffinity(*(build_affinity(X, hyper.tau, k, allow_zero_rows) for X in Xs))


def message_pass(aff: AugmentedAffinity, X_audio, X_static, X_dynamic) -> Tensor:
    """``[A_a X_a || A_s X_s || A_z X_z]``: per-modality propagation, concatenated on features."""
    parts = []
    for blk, X in zip(aff.blocks(), (X_audio, X_static, X_dynamic)):
        X = ag.as_tensor(X)
        if blk.A.shape[1] != X.shape[0]:
            raise ShapeError(f"affinity {blk.A.shape} cannot propagate features {X.shape}")
        parts.append(ag.matmul(blk.A, X))
    return ag.concat(parts, axis=1)


# -------------------------------------------------------------- intervention
class InterventionParams(Module):
    """Learnable per-modality Gaussian (mu, log sigma) for counterfactual features."""

    _leaves = ("mu_audio", "logsig_audio", "mu_static", "logsig_static",
               "mu_dynamic", "logsig_dynamic")

    def __init__(self, widths: dict[str, int]):
        for m in MODALITIES:
            setattr(self, f"mu_{m}", Tensor(np.zeros(widths[m]), requires_grad=True))
            setattr(self, f"logsig_{m}", Tensor(np.zeros(widths[m]), requires_grad=True))
        self.initialized = False

    def get(self, m: str) -> tuple[Tensor, Tensor]:
        return getattr(self, f"mu_{m}"), ag.exp(getattr(self, f"logsig_{m}"))

    def init_from(self, feats: dict[str, np.ndarray], floor: float = 1e-3) -> None:
        """Set (mu, sigma) to the per-dimension mean and std of a batch."""
        for m in MODALITIES:
            f = np.asarray(feats[m])
            getattr(self, f"mu_{m}").data[...] = f.mean(axis=0)
            getattr(self, f"logsig_{m}").data[...] = np.log(np.maximum(f.std(axis=0), floor))
        self.initialized = True


def intervene(X_m, mu, sigma, W) -> Tensor:
    """Counterfactual features ``sigma * W + mu``; ``X_m`` only fixes the shape."""
    X_m, W = ag.as_tensor(X_m), ag.as_tensor(W)
    if W.shape != X_m.shape:
        raise ShapeError(f"noise {W.shape} does not match features {X_m.shape}")
    mu, sigma = ag.as_tensor(mu), ag.as_tensor(sigma)
    if mu.shape != X_m.shape[1:] or sigma.shape != X_m.shape[1:]:
        raise ShapeError("intervention parameters do not match feature width")
    return sigma * W + mu


# ------------------------------------------------------------ fusion / heads
class CLM(Module):
    _children = ("obj_mlp", "mlp2", "mlp1", "classifier", "intervention")

    def __init__(self, widths: dict[str, int], d: int, d_q: int, rng: np.random.Generator):
        self.widths = dict(widths)
        d_in = sum(widths[m] for m in MODALITIES)
        self.obj_mlp = MLP2(d_in, d, d, rng)
        self.mlp2 = MLP2(2 * d, d, d, rng)
        self.mlp1 = MLP2(d + d_q, d, d, rng)
        self.classifier = Linear(d, 2, rng)
        self.intervention = InterventionParams(widths)


def fuse(model: CLM, F1, F2, X_t) -> Tensor:
    """``MLP1(MLP2(F1 || F2) || X_t)`` on per-object transferred features."""
    return model.mlp1(ag.concat([model.mlp2(ag.concat([F1, F2], axis=-1)), X_t], axis=-1))


def classify(model: CLM, hidden) -> Tensor:
    """Two logits: index 0 picks object 1, index 1 picks object 2."""
    return model.classifier(hidden)


def predict(model: CLM, aff: AugmentedAffinity, feats: tuple[Tensor, Tensor, Tensor], X_t) -> Tensor:
    """Logits for a batch whose 2B graph nodes are object-1 rows then object-2 rows."""
    F = model.obj_mlp(message_pass(aff, *feats))
    B = F.shape[0] // 2
    return classify(model, fuse(model, F[:B], F[B:], X_t))


def tie(logits_factual, logits_cf: list) -> Tensor:
    """Factual logits minus the running mean of counterfactual logits.

    The running mean ``m += (y - m) / n`` returns ``y`` bit-for-bit when all
    counterfactuals coincide.
    """
    if not logits_cf:
        raise ValueError("tie needs at least one counterfactual prediction")
    mean = ag.as_tensor(logits_cf[0])
    for n, y in enumerate(logits_cf[1:], start=2):
        mean = mean + (ag.as_tensor(y) - mean) / float(n)
    return ag.as_tensor(logits_factual) - mean


def tie_loss(tie_logits, labels) -> Tensor:
    """Softmax cross-entropy of TIE logits, averaged over the batch."""
    z = ag.as_tensor(tie_logits)
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z.ndim == 1:
        z = z.reshape(1, -1)
    if np.any((lab < 0) | (lab >= z.shape[1])) or len(lab) != z.shape[0]:
        raise ValueError("labels must be class indices, one per row")
    onehot = np.eye(z.shape[1])[lab]
    picked = (z * Tensor(onehot)).sum(axis=1)
    return (ag.logsumexp(z, axis=1) - picked).mean()


@dataclass
class ClmOutput:
    tie_logits: Tensor
    factual: Tensor
    counterfactual: list[Tensor]
    affinity: AugmentedAffinity


def clm_forward(model: CLM, feats: tuple, X_t, hyper: ClmHyper, noise: list[dict[str, np.ndarray]],
                allow_zero_rows: bool = False, cf_feats: list[tuple] | None = None) -> ClmOutput:
    """Factual and counterfactual predictions plus their TIE.

    ``noise`` holds one standard-normal draw per modality per Monte-Carlo
    sample.  ``cf_feats`` overrides the intervened features directly (used to
    verify the null intervention).
    """
    feats = tuple(ag.as_tensor(f) for f in feats)
    aff = build_augmented_affinity(*feats, hyper, allow_zero_rows=allow_zero_rows)
    y_fact = predict(model, aff, feats, X_t)
    ys = []
    if cf_feats is None:
        cf_feats = []
        for W in noise:
            cf_feats.append(tuple(
                intervene(f, *model.intervention.get(m), W[m]) for f, m in zip(feats, MODALITIES)
            ))
    for xs in cf_feats:
        aff_star = build_augmented_affinity(*xs, hyper)
        ys.append(predict(model, aff_star, feats, X_t))
    return ClmOutput(tie(y_fact, ys), y_fact, ys, aff)


def draw_intervention_noise(rng: np.random.Generator, n: int, widths: dict[str, int],
                            n_mc: int) -> list[dict[str, np.ndarray]]:
    """Independent standard-normal draws per modality and Monte-Carlo sample."""
    return [{m: rng.standard_normal((n, widths[m])) for m in MODALITIES} for _ in range(n_mc)]


# --------------------------------------------------------------------- dump
def dump_affinity(aff: AugmentedAffinity, path) -> None:
    """Write neighbours per row as CSV (``.csv``) or JSON (anything else).

    CSV columns: modality, row, rank, neighbour, weight.  JSON maps each
    modality to a list of ``{"row", "neighbours", "weights"}`` records.
    """
    path = Path(path)
    blocks = dict(zip(MODALITIES, aff.blocks()))
    if path.suffix.lower() == ".csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["modality", "row", "rank", "neighbour", "weight"])
            for m, blk in blocks.items():
                for i, nb in enumerate(blk.neighbours()):
                    for r, (j, wt) in enumerate(nb):
                        w.writerow([m, i, r, j, repr(wt)])
        return
    doc = {
        m: [{"row": i, "neighbours": [j for j, _ in nb], "weights": [wt for _, wt in nb]}
            for i, nb in enumerate(blk.neighbours())]
        for m, blk in blocks.items()
    }
    path.write_text(json.dumps(doc, indent=1))
