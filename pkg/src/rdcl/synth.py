"""Synthetic audiovisual-style episodes with known generative factors.

Every object has a static class and a dynamic class.  Its frame features are

    x_t = static_emb[static] + traj[dynamic][t] + noise

where ``traj[k][t] = u cos(2 pi pi_k(t) / T) + w sin(2 pi pi_k(t) / T)`` and
``pi_k(t) = (a_k t + b_k) mod T`` with ``gcd(a_k, T) = 1``.  Each dynamic
class is a time permutation of one zero-mean base trajectory, so all dynamic
classes share the same multiset of frames: the frame mean equals the static
embedding and carries no dynamic information at all.  Audio is
``audio_static[static] + audio_dynamic[dynamic] + noise``, so audio and
video share semantics.

An episode pairs two objects with a question asking which object has the
larger static (question type 0) or dynamic (type 1) class.  The label is 1
when object 2 wins, else 0; the queried classes always differ.

Episode ``i`` draws from ``SeedSequence(seed, spawn_key=(i,))`` and the
fixed embeddings from ``SeedSequence(seed, spawn_key=(2**32,))``, so any
subset of episodes can be generated independently and reproducibly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import container

DATASET_KIND = "rdcl-dataset"
STATIC_QUESTION, DYNAMIC_QUESTION = 0, 1
_WORLD_KEY = 2 ** 32


@dataclass(frozen=True)
class GenerativeSpec:
    n_static_classes: int = 4
    n_dynamic_classes: int = 4
    T: int = 8
    d: int = 32
    noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_static_classes < 2 or self.n_dynamic_classes < 2:
            raise ValueError("need at least two static and two dynamic classes")
        if self.T < 2:
            raise ValueError("T must be at least 2")
        if self.d < 2:
            raise ValueError("d must be at least 2 (question embeddings are orthogonal)")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.n_dynamic_classes > len(_time_maps(self.T)):
            raise ValueError(f"T={self.T} admits at most {len(_time_maps(self.T))} dynamic classes")


def _time_maps(T: int) -> list[tuple[int, int]]:
    """Distinct affine time permutations ``t -> (a t + b) mod T``, ordered for spread."""
    slopes = [a for a in range(1, T) if math.gcd(a, T) == 1] or [1]
    maps = []
    for b in [0, T // 2] + [b for b in range(T) if b not in (0, T // 2)]:
        for a in slopes:
            if (a, b) not in maps:
                maps.append((a, b))
    return maps


@dataclass
class World:
    """Fixed embeddings shared by every episode of a spec."""

    static_emb: np.ndarray    # (n_static, d)
    traj: np.ndarray          # (n_dynamic, T, d)
    audio_static: np.ndarray  # (n_static, d)
    audio_dynamic: np.ndarray  # (n_dynamic, d)
    questions: np.ndarray     # (2, d), orthonormal rows

    @classmethod
    def from_spec(cls, spec: GenerativeSpec) -> "World":
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(_WORLD_KEY,)))
        d, T = spec.d, spec.T
        scale = 1.0  # unit variance per component, matching the unit-variance likelihood
        static_emb = rng.standard_normal((spec.n_static_classes, d)) * scale
        u, w = rng.standard_normal((2, d)) * scale
        t = np.arange(T)
        traj = []
        for a, b in _time_maps(T)[: spec.n_dynamic_classes]:
            ang = 2.0 * math.pi * ((a * t + b) % T) / T
            traj.append(np.outer(np.cos(ang), u) + np.outer(np.sin(ang), w))
        traj = np.stack(traj)
        traj -= traj.mean(axis=1, keepdims=True)  # exact zero mean (T = 2 leaves a tiny sin residue)
        audio_static = rng.standard_normal((spec.n_static_classes, d)) * scale
        audio_dynamic = rng.standard_normal((spec.n_dynamic_classes, d)) * scale
        q, _ = np.linalg.qr(rng.standard_normal((d, 2)))
        return cls(static_emb, traj, audio_static, audio_dynamic, q.T.copy())


@dataclass
class ObjectRecord:
    features: np.ndarray  # (T, d)
    audio: np.ndarray     # (d,)
    true_static_class: int
    true_dynamic_class: int


@dataclass
class Episode:
    obj1: ObjectRecord
    obj2: ObjectRecord
    question: np.ndarray
    question_type: int
    label: int


def generate_object(spec: GenerativeSpec, rng: np.random.Generator, world: World | None = None,
                    static: int | None = None, dynamic: int | None = None) -> ObjectRecord:
    world = world or World.from_spec(spec)
    if static is None:
        static = int(rng.integers(spec.n_static_classes))
    if dynamic is None:
        dynamic = int(rng.integers(spec.n_dynamic_classes))
    x = world.static_emb[static] + world.traj[dynamic]
    a = world.audio_static[static] + world.audio_dynamic[dynamic]
    if spec.noise_std > 0:
        x = x + spec.noise_std * rng.standard_normal(x.shape)
        a = a + spec.noise_std * rng.standard_normal(a.shape)
    return ObjectRecord(x, a, static, dynamic)


def label_rule(question_type: int, classes1: tuple[int, int], classes2: tuple[int, int]) -> int:
    """1 when object 2 has the larger queried class, else 0."""
    c1, c2 = classes1[question_type], classes2[question_type]
    if c1 == c2:
        raise ValueError("ambiguous episode: queried classes are equal")
    return int(c2 > c1)


def generate_episode(spec: GenerativeSpec, rng: np.random.Generator, world: World | None = None) -> Episode:
    world = world or World.from_spec(spec)
    qtype = int(rng.integers(2))
    n = (spec.n_static_classes, spec.n_dynamic_classes)
    c1 = [int(rng.integers(n[0])), int(rng.integers(n[1]))]
    c2 = [int(rng.integers(n[0])), int(rng.integers(n[1]))]
    while c2[qtype] == c1[qtype]:
        c2[qtype] = int(rng.integers(n[qtype]))
    o1 = generate_object(spec, rng, world, *c1)
    o2 = generate_object(spec, rng, world, *c2)
    return Episode(o1, o2, world.questions[qtype].copy(), qtype,
                   label_rule(qtype, tuple(c1), tuple(c2)))


def episode_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


@dataclass
class Dataset:
    """Episodes stored column-wise."""

    x1: np.ndarray      # (N, T, d)
    x2: np.ndarray
    a1: np.ndarray      # (N, d)
    a2: np.ndarray
    q: np.ndarray       # (N, d)
    qtype: np.ndarray   # (N,) int
    label: np.ndarray   # (N,) int
    cls1: np.ndarray    # (N, 2) int: static, dynamic
    cls2: np.ndarray
    spec: GenerativeSpec | None = None

    def __len__(self) -> int:
        return len(self.label)

    def subset(self, idx) -> "Dataset":
        return Dataset(*(getattr(self, f.name)[idx] for f in fields(self) if f.name != "spec"),
                       spec=self.spec)

    def episode(self, i: int) -> Episode:
        o1 = ObjectRecord(self.x1[i], self.a1[i], int(self.cls1[i, 0]), int(self.cls1[i, 1]))
        o2 = ObjectRecord(self.x2[i], self.a2[i], int(self.cls2[i, 0]), int(self.cls2[i, 1]))
        return Episode(o1, o2, self.q[i], int(self.qtype[i]), int(self.label[i]))

    @classmethod
    def from_episodes(cls, episodes: list[Episode], spec: GenerativeSpec | None = None) -> "Dataset":
        return cls(
            x1=np.stack([e.obj1.features for e in episodes]),
            x2=np.stack([e.obj2.features for e in episodes]),
            a1=np.stack([e.obj1.audio for e in episodes]),
            a2=np.stack([e.obj2.audio for e in episodes]),
            q=np.stack([e.question for e in episodes]),
            qtype=np.array([e.question_type for e in episodes], dtype=np.int64),
            label=np.array([e.label for e in episodes], dtype=np.int64),
            cls1=np.array([[e.obj1.true_static_class, e.obj1.true_dynamic_class] for e in episodes]),
            cls2=np.array([[e.obj2.true_static_class, e.obj2.true_dynamic_class] for e in episodes]),
            spec=spec,
        )

    def objects(self) -> tuple[np.ndarray, np.ndarray]:
        """All 2N object sequences (object-1 rows first) and their (static, dynamic) classes."""
        return np.concatenate([self.x1, self.x2]), np.concatenate([self.cls1, self.cls2])


def generate_dataset(spec: GenerativeSpec, n_episodes: int, start: int = 0) -> Dataset:
    world = World.from_spec(spec)
    eps = [generate_episode(spec, episode_rng(spec.seed, start + i), world) for i in range(n_episodes)]
    return Dataset.from_episodes(eps, spec)


_INT_FIELDS = ("qtype", "label", "cls1", "cls2")


def write_dataset(path, ds: Dataset) -> None:
    tensors = {f.name: getattr(ds, f.name) for f in fields(ds) if f.name != "spec"}
    meta = {"version": 1, "count": len(ds),
            "spec": asdict(ds.spec) if ds.spec is not None else None}
    container.save(path, tensors, DATASET_KIND, meta)


def read_dataset(path) -> Dataset:
    tensors, meta = container.load(path, kind=DATASET_KIND)
    if meta.get("version") != 1:
        raise container.ContainerVersionError(f"unsupported dataset version {meta.get('version')}", 20)
    missing = [f.name for f in fields(Dataset) if f.name != "spec" and f.name not in tensors]
    if missing:
        raise container.ContainerError(f"dataset lacks arrays {missing}", 20)
    kw = {k: (tensors[k].astype(np.int64) if k in _INT_FIELDS else tensors[k])
          for k in tensors}
    spec = GenerativeSpec(**meta["spec"]) if meta.get("spec") else None
    return Dataset(**kw, spec=spec)
