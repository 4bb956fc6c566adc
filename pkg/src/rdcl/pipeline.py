"""Batch-wise DCL / RDCL training, evaluation and linear probes.

One training step runs: sequential encoder on both objects of every episode
-> (RDCL) shared/unique completion -> affinity graphs and message passing
-> factual and counterfactual predictions -> TIE -> summed loss -> one
optimizer update.

Randomness is drawn from a per-run ``np.random.Generator`` in a fixed order
(encoder noise, missing masks, intervention noise), identically in both
modes, so DCL and RDCL consume the same stream.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import container
from .autograd import Tensor
from .clm import CLM, MODALITIES, clm_forward, draw_intervention_noise, tie_loss
from .config import TrainConfig
from .dse import DSE, DseNoise, dse_plus_forward, encode
from .imlm import IMLM, imlm_forward, mark_missing
from .nn import SGD, Adam
from .synth import Dataset, generate_dataset

CHECKPOINT_KIND = "rdcl-checkpoint"
_EVAL_KEY, _TRAIN_KEY, _PROBE_KEY, _DATA_VAL_OFFSET = 101, 102, 103, 1_000_000


def _stream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


class RdclModel:
    """Encoder, counterfactual module and incomplete-modality module.

    Each part is initialized from its own seed stream, so DCL and RDCL
    models built from one seed share identical encoder/CLM weights.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.widths = {"audio": cfg.d, "static": cfg.d_lat, "dynamic": cfg.d_lat}
        self.dse = DSE(cfg.dse_hyper(), _stream(cfg.seed, 1))
        self.clm = CLM(self.widths, cfg.d, cfg.d, _stream(cfg.seed, 2))
        self.imlm = IMLM(self.widths, cfg.repr_width, _stream(cfg.seed, 3),
                         zero_projection=cfg.zero_projection)

    def named_parameters(self):
        yield from self.dse.named_parameters("dse.")
        yield from self.clm.named_parameters("clm.")
        yield from self.imlm.named_parameters("imlm.")

    def parameters(self, mode: str | None = None) -> list[Tensor]:
        mode = mode or self.cfg.mode
        ps = self.dse.parameters() + self.clm.parameters()
        if mode == "rdcl":
            ps += self.imlm.parameters()
        return ps

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            raise KeyError(f"checkpoint parameters differ: {sorted(set(own) ^ set(state))}")
        for k, p in own.items():
            if p.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]


def save_checkpoint(path, model: RdclModel, extra: dict | None = None) -> None:
    meta = {"config": model.cfg.to_dict(),
            "intervention_initialized": model.clm.intervention.initialized}
    meta.update(extra or {})
    container.save(path, model.state_dict(), CHECKPOINT_KIND, meta)


def load_checkpoint(path, cfg: TrainConfig | None = None) -> tuple[RdclModel, dict]:
    state, meta = container.load(path, kind=CHECKPOINT_KIND)
    cfg = cfg or TrainConfig.from_dict(meta["config"])
    model = RdclModel(cfg)
    model.load_state_dict(state)
    model.clm.intervention.initialized = bool(meta.get("intervention_initialized", True))
    return model, meta


# ------------------------------------------------------------------ batches
@dataclass
class Batch:
    x1: np.ndarray
    x2: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    q: np.ndarray
    label: np.ndarray
    qtype: np.ndarray

    @classmethod
    def from_dataset(cls, ds: Dataset, idx) -> "Batch":
        return cls(ds.x1[idx], ds.x2[idx], ds.a1[idx], ds.a2[idx], ds.q[idx], ds.label[idx],
                   ds.qtype[idx])

    def __len__(self) -> int:
        return len(self.label)


def draw_missing(rng: np.random.Generator, B: int, alpha_audio: float,
                 alpha_video: float) -> dict[str, np.ndarray]:
    """Missing flags over the 2B graph nodes; each object side is masked separately.

    Video-missing rows are drawn among rows that keep their audio.
    """
    audio = np.zeros(2 * B, dtype=bool)
    video = np.zeros(2 * B, dtype=bool)
    for side in range(2):
        ma = mark_missing(B, alpha_audio, rng)
        mv = mark_missing(B, alpha_video, rng, exclude=ma.missing)
        audio[side * B + ma.missing] = True
        video[side * B + mv.missing] = True
    return {"audio": audio, "static": video, "dynamic": video.copy()}


@dataclass
class StepResult:
    total: Tensor
    components: dict[str, float]
    tie_logits: np.ndarray
    clm_inputs: tuple[np.ndarray, np.ndarray, np.ndarray]
    bundle_complete: bool = True


def forward_batch(model: RdclModel, batch: Batch, cfg: TrainConfig, rng: np.random.Generator,
                  mode: str, train: bool = True) -> StepResult:
    B = len(batch)
    hyper = cfg.dse_hyper()
    ch = cfg.clm_hyper()
    noise = DseNoise.draw(rng, 2 * B, cfg.T, cfg.d, hyper)
    missing = draw_missing(rng, B, cfg.alpha_audio, cfg.alpha_video)
    W = draw_intervention_noise(rng, 2 * B, model.widths, ch.n_mc_train if train else ch.n_mc_eval)

    video_keep = (~missing["static"]).astype(float)
    x_all = np.concatenate([batch.x1, batch.x2]) * video_keep[:, None, None]
    comps: dict[str, Tensor] = {}
    if train:
        dout = dse_plus_forward(model.dse, x_all[:B], x_all[B:], hyper, noise, cfg.contrastive)
        lat = dout.lat
        comps.update({k: v for k, v in dout.components.items() if k != "dse"})
        comps["dse_plus"] = dout.loss
        total = dout.loss
    else:
        lat = encode(model.dse, x_all, sample=False)
        total = Tensor(0.0)

    feats = {"audio": Tensor(np.concatenate([batch.a1, batch.a2])),
             "static": lat.s, "dynamic": lat.z_last}
    any_missing = False
    for m in MODALITIES:
        if missing[m].any():
            any_missing = True
            keep = Tensor((~missing[m]).astype(float)[:, None])
            feats[m] = feats[m] * keep

    complete = True
    if mode == "rdcl":
        iout = imlm_forward(model.imlm, feats, missing)
        feats = dict(iout.bundle.out)
        complete = iout.bundle.complete()
        comps["unique"], comps["share"] = iout.unique, iout.share
        comps["imlm"] = iout.loss
        if train:
            total = total + iout.loss

    f = tuple(feats[m] for m in MODALITIES)
    iv = model.clm.intervention
    if not iv.initialized:
        iv.init_from({m: feats[m].data for m in MODALITIES})
    out = clm_forward(model.clm, f, Tensor(batch.q), ch, W,
                      allow_zero_rows=any_missing)
    l_tie = tie_loss(out.tie_logits, batch.label)
    comps["tie"] = l_tie
    if train:
        total = total + l_tie
    comps["total"] = total
    return StepResult(total, {k: v.item() for k, v in comps.items()}, out.tie_logits.data.copy(),
                      tuple(x.data.copy() for x in f), complete)


def make_optimizer(model: RdclModel, cfg: TrainConfig):
    params = model.parameters(cfg.mode)
    if cfg.optimizer == "sgd":
        return SGD(params, lr=cfg.learning_rate)
    return Adam(params, lr=cfg.learning_rate)


def train_step(model: RdclModel, batch: Batch, cfg: TrainConfig, rng: np.random.Generator,
               optimizer, mode: str | None = None) -> StepResult:
    mode = mode or cfg.mode
    optimizer.zero_grad()
    res = forward_batch(model, batch, cfg, rng, mode, train=True)
    res.total.backward()
    optimizer.step()
    return res


def train_step_dcl(model, batch, cfg, rng, optimizer) -> StepResult:
    return train_step(model, batch, cfg, rng, optimizer, "dcl")


def train_step_rdcl(model, batch, cfg, rng, optimizer) -> StepResult:
    return train_step(model, batch, cfg, rng, optimizer, "rdcl")


# --------------------------------------------------------------- evaluation
def eval_batches(n: int, batch_size: int) -> list[np.ndarray]:
    """Fixed contiguous evaluation batches of near-equal size (every batch >= 2 when n >= 2)."""
    n_batches = max(1, -(-n // batch_size))
    return [b for b in np.array_split(np.arange(n), n_batches) if len(b)]


def predict_dataset(model: RdclModel, ds: Dataset, cfg: TrainConfig) -> np.ndarray:
    rng = _stream(cfg.seed, _EVAL_KEY)
    logits = []
    with ag.no_grad():
        for idx in eval_batches(len(ds), cfg.batch_size):
            res = forward_batch(model, Batch.from_dataset(ds, idx), cfg, rng, cfg.mode, train=False)
            logits.append(res.tie_logits)
    return np.concatenate(logits)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model: RdclModel, ds: Dataset, cfg: TrainConfig) -> dict:
    logits = predict_dataset(model, ds, cfg)
    hit = np.argmax(logits, axis=1) == ds.label
    out = {"accuracy": float(hit.mean())}
    for qt, name in ((0, "static"), (1, "dynamic")):
        sel = ds.qtype == qt
        out[f"accuracy_{name}_questions"] = float(hit[sel].mean()) if sel.any() else float("nan")
    return out


# ------------------------------------------------------------------- probes
def ridge_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                lam: float = 1e-2) -> tuple[float, bool]:
    """Closed-form ridge regression onto one-hot labels; returns (accuracy, degenerate).

    Features are standardized with training statistics.  Constant features
    fall back to predicting the training majority class and are flagged.
    """
    classes = np.unique(train_y)
    std = train_x.std(axis=0)
    if np.all(std < 1e-12):
        major = classes[np.argmax([(train_y == c).sum() for c in classes])]
        return float(np.mean(test_y == major)), True
    mu = train_x.mean(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    Xtr = np.hstack([(train_x - mu) / std, np.ones((len(train_x), 1))])
    Xte = np.hstack([(test_x - mu) / std, np.ones((len(test_x), 1))])
    Y = (train_y[:, None] == classes[None, :]).astype(float)
    reg = lam * len(Xtr) * np.eye(Xtr.shape[1])
    reg[-1, -1] = 0.0
    Wt = np.linalg.solve(Xtr.T @ Xtr + reg, Xtr.T @ Y)
    pred = classes[np.argmax(Xte @ Wt, axis=1)]
    return float(np.mean(pred == test_y)), False


def latent_features(model: RdclModel, x: np.ndarray, rng: np.random.Generator | None = None,
                    chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Static factors and flattened dynamic factors.

    With ``rng`` one reparameterized sample is drawn per object; without it the
    posterior means are returned. Means can expose directions whose posterior
    variance is near one, which the decoder cannot read, so probes use samples.
    """
    ss, zs = [], []
    with ag.no_grad():
        for lo in range(0, len(x), chunk):
            lat = encode(model.dse, x[lo:lo + chunk], rng=rng, sample=rng is not None)
            ss.append(lat.s.data)
            zs.append(lat.z_flat().data)
    return np.concatenate(ss), np.concatenate(zs)


def probe_disentanglement(model: RdclModel, train: Dataset, test: Dataset, seed: int = 0) -> dict:
    """Linear-probe accuracies from each sampled factor to each ground-truth class."""
    rng = _stream(seed, _PROBE_KEY)
    xtr, ctr = train.objects()
    xte, cte = test.objects()
    s_tr, z_tr = latent_features(model, xtr, rng)
    s_te, z_te = latent_features(model, xte, rng)
    out, flags = {}, []
    for fname, ftr, fte in (("s", s_tr, s_te), ("z", z_tr, z_te)):
        for j, cname in ((0, "static"), (1, "dynamic")):
            acc, degenerate = ridge_probe(ftr, ctr[:, j], fte, cte[:, j])
            out[f"{fname}_{cname}"] = acc
            if degenerate:
                flags.append(f"{fname}_{cname}")
    out["degenerate"] = flags
    return out


# ----------------------------------------------------------------- training
METRIC_COLUMNS = [
    "epoch", "total", "dse_plus", "recon", "kl_s", "kl_z", "mi_z", "mi_s", "mi_zs",
    "contra_s", "contra_z", "tie", "imlm", "unique", "share", "train_acc", "val_acc",
    "probe_s_static", "probe_s_dynamic", "probe_z_static", "probe_z_dynamic",
]


@dataclass
class RunResult:
    model: RdclModel
    records: list[dict]
    final_accuracy: float
    probe: dict | None
    wall_clock: float
    step_losses: list[dict] = field(default_factory=list)


def make_datasets(cfg: TrainConfig) -> tuple[Dataset, Dataset]:
    spec = cfg.spec()
    return generate_dataset(spec, cfg.n_train), generate_dataset(spec, cfg.n_val, start=_DATA_VAL_OFFSET)


def train(cfg: TrainConfig, train_ds: Dataset | None = None, val_ds: Dataset | None = None,
          max_steps: int | None = None, log=None) -> RunResult:
    """Run ``cfg.epochs`` epochs; returns per-epoch metric records and the model."""
    t0 = time.perf_counter()
    if train_ds is None or val_ds is None:
        train_ds, val_ds = make_datasets(cfg)
    model = RdclModel(cfg)
    opt = make_optimizer(model, cfg)
    rng = _stream(cfg.seed, _TRAIN_KEY)
    records, step_losses = [], []
    steps = 0
    B = cfg.batch_size
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_ds))
        sums: dict[str, float] = {}
        hits = n_seen = n_batches = 0
        for lo in range(0, len(order) - B + 1, B):
            batch = Batch.from_dataset(train_ds, order[lo:lo + B])
            res = train_step(model, batch, cfg, rng, opt)
            step_losses.append(res.components)
            for k, v in res.components.items():
                sums[k] = sums.get(k, 0.0) + v
            hits += int((np.argmax(res.tie_logits, axis=1) == batch.label).sum())
            n_seen += len(batch)
            n_batches += 1
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        rec = {c: "" for c in METRIC_COLUMNS}
        rec["epoch"] = epoch
        for k, v in sums.items():
            rec[k] = v / n_batches
        rec["train_acc"] = hits / max(n_seen, 1)
        rec["val_acc"] = evaluate(model, val_ds, cfg)["accuracy"]
        records.append(rec)
        if log:
            log(f"epoch {epoch}: total={rec['total']:.4f} tie={rec['tie']:.4f} "
                f"train_acc={rec['train_acc']:.3f} val_acc={rec['val_acc']:.3f}")
        if max_steps is not None and steps >= max_steps:
            break
    probe = None
    if cfg.probe and records:
        probe = probe_disentanglement(model, train_ds, val_ds, cfg.seed)
        for key in ("s_static", "s_dynamic", "z_static", "z_dynamic"):
            records[-1][f"probe_{key}"] = probe[key]
    final = records[-1]["val_acc"] if records else evaluate(model, val_ds, cfg)["accuracy"]
    return RunResult(model, records, final, probe, time.perf_counter() - t0, step_losses)


def metrics_csv(records: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for rec in records:
        w.writerow([repr(float(rec[c])) if isinstance(rec[c], float) else rec[c] for c in METRIC_COLUMNS])
    return buf.getvalue()


def summary_json(cfg: TrainConfig, result: RunResult) -> str:
    doc = {
        "config": cfg.to_dict(),
        "final_val_accuracy": result.final_accuracy,
        "epochs_run": len(result.records),
        "probe": result.probe,
        "wall_clock_seconds": result.wall_clock,
    }
    return json.dumps(doc, indent=2, sort_keys=True)
