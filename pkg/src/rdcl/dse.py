"""Disentangled sequential encoder.

A sequential VAE that splits a feature sequence ``x_{1:T}`` into one static
latent ``s`` and per-step dynamic latents ``z_{1:T}``:

* ``q(s | x_{1:T})`` reads the final states of a bidirectional LSTM;
* ``q(z_t | z_{<t}, x_{<=t})`` is an LSTM over ``[bilstm_t || z_{t-1}]``;
* the dynamic prior ``p(z_t | z_{<t})`` is an LSTM over ``z_{t-1}`` (``z_0 = 0``);
* the decoder is a time-shared two-layer MLP on ``[z_t || s]``.

The training objective adds contrastive mutual-information terms (augmented
views as positives, other batch members as negatives) and a mini-batch
mixture estimate of ``I(z; s)`` to the usual ELBO.  The pairwise hinge
losses on static/dynamic cosine similarity extend it for object pairs.

Batched tensors carry the sequence index first: ``x`` is (N, T, d).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import NumericDomainError, ShapeError, Tensor
from .nn import LSTMCell, Linear, MLP2, Module, bilstm_states


@dataclass
class DseHyper:
    d: int = 32
    d_lat: int = 16
    hidden: int = 32
    T: int = 8
    gamma: float = 1.0
    theta: float = 50.0
    tau: float = 0.5
    delta: float = 0.2
    motion_noise: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.delta < 1.0 + 1e-12:
            raise ValueError("delta must lie in [0, 1]")
        if self.gamma < 0 or self.theta < 0:
            raise ValueError("gamma and theta must be non-negative")
        if self.motion_noise < 0:
            raise ValueError("motion_noise must be non-negative")


@dataclass
class GaussianParams:
    mu: Tensor
    log_sigma: Tensor

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.data)

    @classmethod
    def standard(cls, shape) -> "GaussianParams":
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


@dataclass
class LatentFactors:
    s: Tensor                 # (N, d_lat)
    z: Tensor                 # (N, T, d_lat)
    q_s: GaussianParams       # (N, d_lat)
    q_z: list[GaussianParams]  # T entries of (N, d_lat)
    eps_s: np.ndarray
    eps_z: np.ndarray

    @property
    def z_last(self) -> Tensor:
        """Dynamic summary: the final step's dynamic latent."""
        return self.z[:, -1]

    def z_flat(self) -> Tensor:
        n, t, k = self.z.shape
        return self.z.reshape(n, t * k)

    def rows(self, lo: int, hi: int) -> "LatentFactors":
        """Latents of sequences ``lo:hi`` (gradients still flow to the full batch)."""
        sl = slice(lo, hi)
        return LatentFactors(
            self.s[sl], self.z[sl], GaussianParams(self.q_s.mu[sl], self.q_s.log_sigma[sl]),
            [GaussianParams(q.mu[sl], q.log_sigma[sl]) for q in self.q_z],
            self.eps_s[sl], self.eps_z[sl],
        )


class DSE(Module):
    _children = ("enc_fwd", "enc_bwd", "s_mu", "s_logsig", "z_rnn", "z_mu", "z_logsig",
                 "prior_rnn", "p_mu", "p_logsig", "decoder")

    def __init__(self, hyper: DseHyper, rng: np.random.Generator):
        d, k, h = hyper.d, hyper.d_lat, hyper.hidden
        self.hyper = hyper
        self.enc_fwd = LSTMCell(d, h, rng)
        self.enc_bwd = LSTMCell(d, h, rng)
        self.s_mu = Linear(2 * h, k, rng)
        self.s_logsig = Linear(2 * h, k, rng)
        self.z_rnn = LSTMCell(2 * h + k, h, rng)
        self.z_mu = Linear(h, k, rng)
        self.z_logsig = Linear(h, k, rng)
        self.prior_rnn = LSTMCell(k, h, rng)
        self.p_mu = Linear(h, k, rng)
        self.p_logsig = Linear(h, k, rng)
        self.decoder = MLP2(2 * k, d, d, rng)


def _as_batch(x) -> Tensor:
    x = ag.as_tensor(x)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    if x.ndim != 3:
        raise ShapeError(f"expected (T, d) or (N, T, d), got {x.shape}")
    if x.shape[1] == 0:
        raise ShapeError("empty sequence (T = 0)")
    return x


def encode(model: DSE, x, rng: np.random.Generator | None = None,
           eps_s: np.ndarray | None = None, eps_z: np.ndarray | None = None,
           sample: bool = True) -> LatentFactors:
    """Posterior pass with reparameterized sampling.

    Noise comes from ``eps_s``/``eps_z`` when given, else from ``rng``; with
    ``sample=False`` the posterior means are returned (noise = 0).
    """
    x = _as_batch(x)
    n, T, _ = x.shape
    k = model.hyper.d_lat
    if x.shape[2] != model.enc_fwd.W_ih.shape[1]:
        raise ShapeError(f"feature width {x.shape[2]} does not match the encoder")
    if not sample:
        eps_s, eps_z = np.zeros((n, k)), np.zeros((n, T, k))
    else:
        if eps_s is None:
            eps_s = rng.standard_normal((n, k))
        if eps_z is None:
            eps_z = rng.standard_normal((n, T, k))
    hf, hb = bilstm_states(model.enc_fwd, model.enc_bwd, x)
    final = ag.concat([hf[-1], hb[0]], axis=-1)
    q_s = GaussianParams(model.s_mu(final), model.s_logsig(final))
    s = q_s.mu + ag.exp(q_s.log_sigma) * eps_s

    h, c = model.z_rnn.zero_state((n,))
    z_prev = Tensor(np.zeros((n, k)))
    zs, q_z = [], []
    for t in range(T):
        inp = ag.concat([hf[t], hb[t], z_prev], axis=-1)
        h, c = model.z_rnn(inp, h, c)
        q = GaussianParams(model.z_mu(h), model.z_logsig(h))
        z_prev = q.mu + ag.exp(q.log_sigma) * eps_z[:, t]
        zs.append(z_prev)
        q_z.append(q)
    return LatentFactors(s, ag.stack(zs, axis=1), q_s, q_z, eps_s, eps_z)


def prior_params(model: DSE, z: Tensor) -> list[GaussianParams]:
    """``p(z_t | z_{<t})`` for every step of ``z`` (N, T, d_lat), with ``z_0 = 0``."""
    n, T, k = z.shape
    h, c = model.prior_rnn.zero_state((n,))
    prev = Tensor(np.zeros((n, k)))
    out = []
    for t in range(T):
        h, c = model.prior_rnn(prev, h, c)
        out.append(GaussianParams(model.p_mu(h), model.p_logsig(h)))
        prev = z[:, t]
    return out


def prior_step_params(model: DSE, z_prefix) -> GaussianParams:
    """Prior for the step following ``z_prefix`` of shape (t, d_lat) or (N, t, d_lat).

    An empty prefix (t = 0) gives the first-step prior conditioned on ``z_0 = 0``.
    """
    zp = ag.as_tensor(z_prefix)
    squeeze = zp.ndim == 2
    if squeeze:
        zp = zp.reshape(1, *zp.shape)
    n, t, k = zp.shape
    padded = ag.concat([zp, Tensor(np.zeros((n, 1, k)))], axis=1) if t else Tensor(np.zeros((n, 1, k)))
    q = prior_params(model, padded)[-1]
    if squeeze:
        return GaussianParams(q.mu[0], q.log_sigma[0])
    return q


def decode(model: DSE, lat: LatentFactors) -> Tensor:
    """Reconstruct (N, T, d) from ``[z_t || s]`` with the time-shared decoder."""
    n, T, k = lat.z.shape
    s_rep = lat.s.reshape(n, 1, k) + Tensor(np.zeros((1, T, 1)))
    return model.decoder(ag.concat([lat.z, s_rep], axis=-1))


def kl_gaussian(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Closed-form KL(q || p) of diagonal Gaussians, summed over the last axis."""
    if q.mu.shape != p.mu.shape:
        raise ShapeError(f"kl_gaussian: {q.mu.shape} vs {p.mu.shape}")
    var_q = ag.exp(2.0 * q.log_sigma)
    var_p = ag.exp(2.0 * p.log_sigma)
    diff = q.mu - p.mu
    terms = p.log_sigma - q.log_sigma + (var_q + diff * diff) / (2.0 * var_p) - 0.5
    return terms.sum(axis=-1)


# ------------------------------------------------------------- similarities
def _norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    sq = (a * a).sum(axis=axis, keepdims=keepdims)
    if np.any(sq.data == 0.0):
        raise NumericDomainError("cosine similarity of a zero-norm vector")
    return ag.sqrt(sq)


def cosine(a, b) -> Tensor:
    """Cosine similarity along the last axis (vectors are flattened first when 1-D mismatched)."""
    a, b = ag.as_tensor(a), ag.as_tensor(b)
    if a.ndim != b.ndim or a.shape[-1] != b.shape[-1]:
        a, b = a.reshape(-1), b.reshape(-1)
        if a.shape != b.shape:
            raise ShapeError("cosine: flattened sizes differ")
    return (a * b).sum(axis=-1) / (_norm(a) * _norm(b))


def cosine_matrix(A, B) -> Tensor:
    """Pairwise cosine similarities between rows of ``A`` (N, D) and ``B`` (M, D)."""
    A, B = ag.as_tensor(A), ag.as_tensor(B)
    An = A / _norm(A, keepdims=True)
    Bn = B / _norm(B, keepdims=True)
    return ag.matmul(An, ag.transpose(Bn))


def contrastive_score(z, x, tau: float) -> Tensor:
    """``exp(cos(z, x) / tau)`` on flattened inputs."""
    z, x = ag.as_tensor(z), ag.as_tensor(x)
    if z.size != x.size:
        raise ShapeError("contrastive_score: flattened sizes differ")
    return ag.exp(cosine(z.reshape(-1), x.reshape(-1)) / tau)


def contrastive_mi(anchor, positive, negatives, tau: float) -> Tensor:
    """log( phi(a, +) / (phi(a, +) + sum_j phi(a, neg_j)) ), computed in log space."""
    if len(negatives) < 1:
        raise ValueError("contrastive_mi needs at least one negative")
    a = ag.as_tensor(anchor).reshape(-1)
    logits = [cosine(a, ag.as_tensor(positive).reshape(-1)) / tau]
    logits += [cosine(a, ag.as_tensor(n).reshape(-1)) / tau for n in negatives]
    row = ag.stack(logits)
    return logits[0] - ag.logsumexp(row, axis=0)


def _infonce_both_ways(A: Tensor, B: Tensor, tau: float) -> tuple[Tensor, Tensor]:
    """Batch-averaged contrastive terms with A[i] <-> B[i] as positives.

    Returns (anchors from A, anchors from B); negatives are the other rows of
    the opposite view.
    """
    M = cosine_matrix(A, B) / tau
    n = M.shape[0]
    diag = (M * Tensor(np.eye(n))).sum(axis=1)
    c_a = (diag - ag.logsumexp(M, axis=1)).mean()
    c_b = (diag - ag.logsumexp(M, axis=0)).mean()
    return c_a, c_b


# ------------------------------------------------------------- augmentation
def content_augment(x, rng: np.random.Generator) -> np.ndarray:
    """Random frame permutation; each sequence of a batch gets its own permutation."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    T = arr.shape[-2]
    if T < 2:
        raise ValueError("content_augment needs at least two frames")
    if arr.ndim == 2:
        return arr[rng.permutation(T)]
    return np.stack([seq[rng.permutation(T)] for seq in arr])


def motion_augment(x, rng: np.random.Generator, noise_std: float) -> np.ndarray:
    """Per-frame additive Gaussian noise; frame order untouched."""
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if noise_std == 0:
        return arr.copy()
    return arr + noise_std * rng.standard_normal(arr.shape)


# --------------------------------------------------------------- MI terms
def mi_terms(lat: LatentFactors, lat_motion: LatentFactors, lat_content: LatentFactors,
             tau: float) -> tuple[Tensor, Tensor]:
    """Contrastive estimates ``(I(z; x), I(s; x))``.

    ``I_z = (C(z) + C(z^m)) / 2`` with the motion-augmented view as positive;
    ``I_s = (C(s) + C(s^c)) / 2`` with the content-augmented (shuffled) view.
    """
    n = lat.s.shape[0]
    if n < 2:
        raise ValueError("mi_terms needs a batch of at least two sequences")
    cz, czm = _infonce_both_ways(lat.z_flat(), lat_motion.z_flat(), tau)
    cs, csc = _infonce_both_ways(lat.s, lat_content.s, tau)
    return 0.5 * (cz + czm), 0.5 * (cs + csc)


_LOG_2PI = math.log(2.0 * math.pi)


def _pairwise_log_density(x: Tensor, mu: Tensor, log_sigma: Tensor) -> Tensor:
    """``L[i, j] = log N(x_i; mu_j, sigma_j)`` summed over trailing axes.

    ``x``, ``mu``, ``log_sigma`` are (N, ...); the result is (N, N).
    """
    n = x.shape[0]
    rest = x.shape[1:]
    xi = x.reshape(n, 1, *rest)
    mj = mu.reshape(1, n, *rest)
    lj = log_sigma.reshape(1, n, *rest)
    zsc = (xi - mj) / ag.exp(lj)
    dens = -0.5 * zsc * zsc - lj - 0.5 * _LOG_2PI
    axes = tuple(range(2, 2 + len(rest)))
    return dens.sum(axis=axes)


def mi_zs_penalty(s: Tensor, z: Tensor, q_s: GaussianParams, q_z: list[GaussianParams]) -> Tensor:
    """Mini-batch mixture estimate of ``I(z_{1:T}; s)``.

    Each sample's ``(s_i, z_i)`` is scored under the batch mixture of
    posteriors: ``mean_i [log q(z_i, s_i) - log q(z_i) - log q(s_i)]``.
    Biased for small batches; exact-zero when all posteriors coincide.
    """
    n = s.shape[0]
    if n < 2:
        raise ValueError("mi_zs_penalty needs a batch of at least two sequences")
    Ls = _pairwise_log_density(s, q_s.mu, q_s.log_sigma)
    mu_z = ag.stack([q.mu for q in q_z], axis=1)
    ls_z = ag.stack([q.log_sigma for q in q_z], axis=1)
    Lz = _pairwise_log_density(z, mu_z, ls_z)
    joint = ag.logsumexp(Ls + Lz, axis=1)
    marg_s = ag.logsumexp(Ls, axis=1)
    marg_z = ag.logsumexp(Lz, axis=1)
    return (joint - marg_s - marg_z).mean() + math.log(n)


# ------------------------------------------------------------------ losses
@dataclass
class DseNoise:
    """Per-sequence randomness for one loss evaluation (row i belongs to sequence i)."""

    eps_s: np.ndarray
    eps_z: np.ndarray
    eps_s_motion: np.ndarray
    eps_z_motion: np.ndarray
    eps_s_content: np.ndarray
    eps_z_content: np.ndarray
    perms: np.ndarray
    motion: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, n: int, T: int, d: int, hyper: DseHyper) -> "DseNoise":
        k = hyper.d_lat
        return cls(
            eps_s=rng.standard_normal((n, k)),
            eps_z=rng.standard_normal((n, T, k)),
            eps_s_motion=rng.standard_normal((n, k)),
            eps_z_motion=rng.standard_normal((n, T, k)),
            eps_s_content=rng.standard_normal((n, k)),
            eps_z_content=rng.standard_normal((n, T, k)),
            perms=np.stack([rng.permutation(T) for _ in range(n)]) if T >= 2 else np.zeros((n, T), int),
            motion=hyper.motion_noise * rng.standard_normal((n, T, d)),
        )

    def take(self, idx) -> "DseNoise":
        return DseNoise(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


@dataclass
class DseOutput:
    loss: Tensor
    components: dict[str, Tensor]
    lat: LatentFactors
    recon: Tensor = field(repr=False)


def dse_forward(model: DSE, x, hyper: DseHyper, noise: DseNoise) -> DseOutput:
    """Full DSE objective on a batch; every component is a per-sequence mean.

    loss = recon + gamma (KL_s + KL_z) - gamma (I_z + I_s) + theta I(z; s)
    """
    x = _as_batch(x)
    n, T, _ = x.shape
    if n >= 2 and hyper.gamma > 0:
        # the original and both augmented views share one recurrent pass
        x_motion = x.data + noise.motion
        x_content = np.take_along_axis(x.data, noise.perms[:, :, None], axis=1)
        lat_all = encode(model, ag.concat([x, Tensor(x_motion), Tensor(x_content)], axis=0),
                         eps_s=np.concatenate([noise.eps_s, noise.eps_s_motion, noise.eps_s_content]),
                         eps_z=np.concatenate([noise.eps_z, noise.eps_z_motion, noise.eps_z_content]))
        lat, lat_m, lat_c = (lat_all.rows(i * n, (i + 1) * n) for i in range(3))
    else:
        lat = encode(model, x, eps_s=noise.eps_s, eps_z=noise.eps_z)
    xhat = decode(model, lat)
    diff = x - xhat
    recon = 0.5 * (diff * diff).sum() / n

    kl_s = kl_gaussian(lat.q_s, GaussianParams.standard(lat.q_s.mu.shape)).sum() / n
    priors = prior_params(model, lat.z)
    kl_z = ag.stack([kl_gaussian(q, p) for q, p in zip(lat.q_z, priors)], axis=1).sum() / n

    comps = {"recon": recon, "kl_s": kl_s, "kl_z": kl_z}
    loss = recon
    if hyper.gamma > 0:
        loss = loss + hyper.gamma * (kl_s + kl_z)
    if n >= 2 and (hyper.gamma > 0 or hyper.theta > 0):
        if hyper.gamma > 0:
            i_z, i_s = mi_terms(lat, lat_m, lat_c, hyper.tau)
            comps["mi_z"], comps["mi_s"] = i_z, i_s
            loss = loss - hyper.gamma * (i_z + i_s)
        if hyper.theta > 0:
            i_zs = mi_zs_penalty(lat.s, lat.z, lat.q_s, lat.q_z)
            comps["mi_zs"] = i_zs
            loss = loss + hyper.theta * i_zs
    return DseOutput(loss, comps, lat, xhat)


def dse_loss(model: DSE, x, hyper: DseHyper, rng: np.random.Generator) -> tuple[Tensor, dict[str, Tensor]]:
    x = _as_batch(x)
    noise = DseNoise.draw(rng, x.shape[0], x.shape[1], x.shape[2], hyper)
    out = dse_forward(model, x, hyper, noise)
    return out.loss, out.components


def pair_contrastive_losses(s1, s2, z1, z2, delta: float) -> tuple[Tensor, Tensor]:
    """Hinges ``max(0, cos(s1, s2) - delta)`` and ``max(0, cos(z1, z2) - delta)``.

    Inputs may be single vectors or batches of paired rows; batches return
    per-pair values.
    """
    ls = ag.max_with_scalar(cosine(s1, s2) - delta, 0.0)
    lz = ag.max_with_scalar(cosine(z1, z2) - delta, 0.0)
    return ls, lz


def dse_plus_forward(model: DSE, x1, x2, hyper: DseHyper, noise: DseNoise,
                     contrastive: bool = True) -> DseOutput:
    """DSE objective over both objects' sequences plus the pairwise hinges.

    ``x1``/``x2`` are (B, T, d); the DSE part runs on the 2B stacked
    sequences (object-1 rows first), the hinges are averaged over the B pairs.
    """
    x1, x2 = _as_batch(x1), _as_batch(x2)
    B = x1.shape[0]
    out = dse_forward(model, ag.concat([x1, x2], axis=0), hyper, noise)
    comps = dict(out.components)
    comps["dse"] = out.loss
    loss = out.loss
    if contrastive:
        lat = out.lat
        z_last = lat.z_last
        ls, lz = pair_contrastive_losses(lat.s[:B], lat.s[B:], z_last[:B], z_last[B:], hyper.delta)
        comps["contra_s"], comps["contra_z"] = ls.mean(), lz.mean()
        loss = loss + comps["contra_s"] + comps["contra_z"]
    return DseOutput(loss, comps, out.lat, out.recon)


def dse_plus_loss(model: DSE, x1, x2, hyper: DseHyper, rng: np.random.Generator,
                  contrastive: bool = True) -> Tensor:
    x1 = _as_batch(x1)
    noise = DseNoise.draw(rng, 2 * x1.shape[0], x1.shape[1], x1.shape[2], hyper)
    return dse_plus_forward(model, x1, x2, hyper, noise, contrastive).loss
