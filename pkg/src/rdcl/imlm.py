"""Incomplete multi-modal learning: shared/unique decomposition and completion.

Audio features, static factors and dynamic summaries are each mapped by a
shared encoder and a unique encoder (one set of weights for all three
modalities), projected back and added residually to the input.  Missing
modalities are completed from the shared features of the modalities that
are present and from the mean unique feature of complete samples.

Modalities of different widths are zero-padded on the right to a common
width before encoding; the projection output is cropped back to each
modality's width.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Linear, MLP2, Module

MODALITIES = ("audio", "static", "dynamic")
_BCE_EPS = 1e-7


@dataclass
class MissingMask:
    missing: np.ndarray   # sorted indices (B_miss)
    complete: np.ndarray  # sorted indices (B_com)
    alpha: float

    @property
    def n(self) -> int:
        return len(self.missing) + len(self.complete)

    def flags(self) -> np.ndarray:
        f = np.zeros(self.n, dtype=bool)
        f[self.missing] = True
        return f


def mark_missing(N: int, alpha: float, rng: np.random.Generator,
                 exclude: np.ndarray | None = None) -> MissingMask:
    """Sample ``floor(N * alpha)`` distinct missing indices uniformly.

    Indices in ``exclude`` are never chosen (used to keep one modality
    present for every sample).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")
    n_miss = int(np.floor(N * alpha + 1e-12))
    pool = np.arange(N)
    if exclude is not None and len(exclude):
        pool = np.setdiff1d(pool, exclude)
        if n_miss > len(pool):
            raise ValueError("not enough samples left to mark missing without overlap")
    missing = np.sort(rng.choice(pool, size=n_miss, replace=False)) if n_miss else np.array([], dtype=np.int64)
    complete = np.setdiff1d(np.arange(N), missing)
    return MissingMask(missing.astype(np.int64), complete.astype(np.int64), float(alpha))


class IMLM(Module):
    _children = ("f_share", "f_unique", "f_pro", "f_modal")

    def __init__(self, widths: dict[str, int], d_r: int, rng: np.random.Generator,
                 zero_projection: bool = True):
        self.widths = dict(widths)
        self.width = max(widths.values())
        self.d_r = d_r
        self.f_share = MLP2(self.width, d_r, d_r, rng)
        self.f_unique = MLP2(self.width, d_r, d_r, rng)
        self.f_pro = MLP2(2 * d_r, self.width, self.width, rng, zero_out=zero_projection)
        self.f_modal = Linear(d_r, len(MODALITIES), rng)

    def pad(self, x: Tensor) -> Tensor:
        x = ag.as_tensor(x)
        gap = self.width - x.shape[-1]
        if gap == 0:
            return x
        return ag.concat([x, Tensor(np.zeros(x.shape[:-1] + (gap,)))], axis=-1)


def encode_shared(model: IMLM, x_m, missing: bool = False) -> Tensor:
    if missing:
        raise ValueError("missing modality: use the completion path, not the encoder")
    return model.f_share(model.pad(x_m))


def encode_unique(model: IMLM, x_m, missing: bool = False) -> Tensor:
    if missing:
        raise ValueError("missing modality: use the completion path, not the encoder")
    return model.f_unique(model.pad(x_m))


def project_residual(model: IMLM, r_share, r_unique, x_m) -> Tensor:
    """``f_pro(r_share || r_unique) + x_m`` (projection cropped to the width of ``x_m``)."""
    x_m = ag.as_tensor(x_m)
    proj = model.f_pro(ag.concat([r_share, r_unique], axis=-1))
    w = x_m.shape[-1]
    if w != model.width:
        proj = proj[..., :w]
    return proj + x_m


def complete_shared_audio(r_share_z, r_share_s) -> Tensor:
    return 0.5 * (ag.as_tensor(r_share_z) + ag.as_tensor(r_share_s))


def complete_shared_general(available: list) -> Tensor:
    """Mean of the shared features of whichever modalities are present."""
    if not available:
        raise ValueError("no modality available to complete from")
    acc = ag.as_tensor(available[0])
    for r in available[1:]:
        acc = acc + ag.as_tensor(r)
    return acc / float(len(available)) if len(available) > 1 else acc


def complete_unique(r_unique_complete) -> Tensor:
    """Column mean of complete samples' unique features, as a constant."""
    arr = np.asarray(r_unique_complete.data if isinstance(r_unique_complete, Tensor) else r_unique_complete)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError("complete_unique needs at least one complete sample")
    return Tensor(arr.mean(axis=0))


def _clip_prob(p: Tensor) -> Tensor:
    p = ag.max_with_scalar(p, _BCE_EPS)
    return ag.neg(ag.max_with_scalar(ag.neg(p), -(1.0 - _BCE_EPS)))


def binary_cross_entropy(p, y) -> Tensor:
    """Mean BCE with probabilities clamped to ``[1e-7, 1 - 1e-7]``."""
    p = _clip_prob(ag.as_tensor(p))
    y = np.asarray(y, dtype=np.float64)
    return ag.neg((Tensor(y) * ag.log(p) + Tensor(1.0 - y) * ag.log(1.0 - p)).mean())


def modality_probs(model: IMLM, r_unique) -> Tensor:
    """One-vs-rest membership probabilities, one sigmoid head per modality."""
    return ag.sigmoid(model.f_modal(r_unique))


def unique_loss(model: IMLM, r_unique: dict[str, Tensor]) -> Tensor:
    """Domain-classification BCE averaged over complete samples, modalities and heads.

    ``r_unique[m]`` holds the unique features of the complete samples of
    modality ``m``; the target of head ``h`` is 1 exactly when ``h == m``.
    """
    probs, targets = [], []
    for j, m in enumerate(MODALITIES):
        r = r_unique.get(m)
        if r is None or r.shape[0] == 0:
            continue
        probs.append(modality_probs(model, r))
        t = np.zeros((r.shape[0], len(MODALITIES)))
        t[:, j] = 1.0
        targets.append(t)
    if not probs:
        raise ValueError("unique_loss: no complete samples")
    return binary_cross_entropy(ag.concat(probs, axis=0), np.concatenate(targets))


def share_loss(r_a, r_z, r_s) -> Tensor:
    """Sum over the six ordered modality pairs of the L1 distance, summed over the batch."""
    r_a, r_z, r_s = ag.as_tensor(r_a), ag.as_tensor(r_z), ag.as_tensor(r_s)
    total = (ag.absolute(r_a - r_z).sum() + ag.absolute(r_a - r_s).sum()
             + ag.absolute(r_z - r_s).sum())
    return 2.0 * total


def imlm_loss(l_unique, l_share) -> Tensor:
    return ag.as_tensor(l_unique) + ag.as_tensor(l_share)


@dataclass
class ModalityBundle:
    """Batch of per-object modality features before and after completion."""

    x: dict[str, Tensor]
    missing: dict[str, np.ndarray]  # boolean flags per modality
    r_share: dict[str, Tensor] = field(default_factory=dict)
    r_unique: dict[str, Tensor] = field(default_factory=dict)
    out: dict[str, Tensor] = field(default_factory=dict)

    def complete(self) -> bool:
        return all(m in self.r_share and m in self.r_unique and m in self.out for m in MODALITIES)


@dataclass
class ImlmOutput:
    bundle: ModalityBundle
    loss: Tensor
    unique: Tensor
    share: Tensor


def _scatter_rows(n: int, parts: list[tuple[np.ndarray, Tensor]]) -> Tensor:
    """Assemble an (n, w) tensor from disjoint row groups, keeping gradients."""
    pieces, order = [], []
    for idx, t in parts:
        if len(idx):
            pieces.append(t)
            order.append(idx)
    rows = np.concatenate(order)
    stacked = ag.concat(pieces, axis=0)
    inv = np.empty(n, dtype=np.int64)
    inv[rows] = np.arange(n)
    if np.array_equal(inv, np.arange(n)):
        return stacked
    return stacked[inv]


def imlm_forward(model: IMLM, x: dict[str, Tensor], missing: dict[str, np.ndarray]) -> ImlmOutput:
    """Encode present modalities, complete missing ones, project residually.

    ``missing[m]`` flags the rows whose modality ``m`` is absent; their
    inputs are taken as zero.  A row may miss audio or video (static and
    dynamic together) but not both.
    """
    n = next(iter(x.values())).shape[0]
    flags = {m: np.asarray(missing.get(m, np.zeros(n, bool)), dtype=bool) for m in MODALITIES}
    if (flags["audio"] & (flags["static"] | flags["dynamic"])).any():
        raise ValueError("a sample is missing every modality group; nothing to complete from")
    present = {m: np.flatnonzero(~flags[m]) for m in MODALITIES}
    absent = {m: np.flatnonzero(flags[m]) for m in MODALITIES}

    share_c, uniq_c = {}, {}
    for m in MODALITIES:
        if len(present[m]):
            xm = ag.as_tensor(x[m])
            xp = xm if len(absent[m]) == 0 else xm[present[m]]
            share_c[m] = encode_shared(model, xp)
            uniq_c[m] = encode_unique(model, xp)

    def share_row_lookup(m: str) -> Tensor:
        """Full (n, d_r) shared features for a present-only modality tensor."""
        return _scatter_rows(n, [(present[m], share_c[m])] + (
            [(absent[m], Tensor(np.zeros((len(absent[m]), model.d_r))))] if len(absent[m]) else []))

    r_share, r_unique, out = {}, {}, {}
    full_share = {m: share_row_lookup(m) for m in MODALITIES if m in share_c}
    for m in MODALITIES:
        if len(absent[m]) == 0:
            r_share[m], r_unique[m] = share_c[m], uniq_c[m]
        else:
            idx = absent[m]
            others = [o for o in MODALITIES if o != m and o in full_share and not flags[o][idx].any()]
            if not others:
                raise ValueError(f"cannot complete modality {m!r}: no source modality present")
            filled_share = complete_shared_general([full_share[o][idx] for o in others])
            if m not in uniq_c:
                raise ValueError(f"modality {m!r} missing for every sample; unique mean undefined")
            mean_u = complete_unique(uniq_c[m])
            filled_unique = Tensor(np.broadcast_to(mean_u.data, (len(idx), model.d_r)).copy())
            parts_s = [(idx, filled_share)]
            parts_u = [(idx, filled_unique)]
            if m in share_c:
                parts_s.append((present[m], share_c[m]))
                parts_u.append((present[m], uniq_c[m]))
            r_share[m] = _scatter_rows(n, parts_s)
            r_unique[m] = _scatter_rows(n, parts_u)
        xm = ag.as_tensor(x[m])
        if len(absent[m]):
            keep = np.ones((n, 1))
            keep[absent[m]] = 0.0
            xm = xm * Tensor(keep)
        out[m] = project_residual(model, r_share[m], r_unique[m], xm)

    l_unique = unique_loss(model, uniq_c)
    l_share = share_loss(r_share["audio"], r_share["dynamic"], r_share["static"])
    bundle = ModalityBundle({m: ag.as_tensor(x[m]) for m in MODALITIES}, flags, r_share, r_unique, out)
    return ImlmOutput(bundle, imlm_loss(l_unique, l_share), l_unique, l_share)
