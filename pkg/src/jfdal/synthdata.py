"""Synthetic two-domain identity data and the batch samplers used in training.

Observation model (per identity ``i`` with unit latent prototype ``p_i``)::

    VIS:  x = A_V p_i + C z + e
    NIR:  x = R A_V p_i + b_N + C z + e + Q u

``z`` is a per-sample nuisance latent, ``e`` isotropic noise.  The j-th NIR
and j-th VIS capture of an HFR identity share ``z`` (paired captures).
``Q u`` is NIR sensor clutter: Gaussian noise of scale
``nir_noise_ratio * noise_sigma`` in the directions left over after signal,
partner, nuisance and bias, which VIS data never exercises.  With zero
rotation, bias and noise the two domains coincide.  ``R`` is a
rotation ``expm(rotation_strength * K)`` acting on the signal subspace and an
equally sized partner subspace that VIS data never excites; ``b_N`` lies in
yet another orthogonal subspace.  Because the three pieces are orthogonal the
NIR-VIS centroid gap ``||(R - I) A_V p_i + b_N||`` grows monotonically with
``rotation_strength`` on ``[0, pi]``.  The clutter is identity-independent, so
it widens the NIR-VIS gap of a VIS-trained model without moving centroids.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.linalg import expm

from .losses import NIR, VIS

LARGE_VIS = "LARGE_VIS"
HFR = "HFR"
PRECISION = 6
SPLITS = ("large_vis", "hfr_train", "hfr_test", "vis_test_pairs")


@dataclass(frozen=True)
class DomainShift:
    rotation_strength: float = 1.0
    bias_scale: float = 1.5
    noise_sigma: float = 0.08
    nir_noise_ratio: float = 25.0


@dataclass(frozen=True)
class GenSpec:
    """Generation parameters.  ``n_hfr_ids`` counts identities per HFR split."""

    n_vis_ids: int = 200
    vis_per_id: int = 50
    n_hfr_ids: int = 20
    hfr_per_id_per_domain: int = 48
    input_dim: int = 64
    domain_shift: DomainShift = field(default_factory=DomainShift)
    seed: int = 0
    latent_dim: int = 24
    nuisance_dim: int = 8
    nuisance_scale: float = 0.5
    n_vis_test_ids: int = 200
    vis_test_per_id: int = 10
    n_vis_test_pairs: int = 6000
    rotated_planes: int | None = 8

    def __post_init__(self):
        if isinstance(self.domain_shift, dict):
            object.__setattr__(self, "domain_shift", DomainShift(**self.domain_shift))
        counts = (self.n_vis_ids, self.vis_per_id, self.n_hfr_ids, self.hfr_per_id_per_domain,
                  self.input_dim, self.latent_dim, self.n_vis_test_ids, self.vis_test_per_id, self.n_vis_test_pairs)
        if any(int(c) < 1 for c in counts):
            raise ValueError("all counts must be >= 1")
        if self.nuisance_dim < 0 or self.nuisance_scale < 0:
            raise ValueError("nuisance settings must be >= 0")
        if self.domain_shift.noise_sigma < 0 or self.domain_shift.nir_noise_ratio < 0:
            raise ValueError("noise_sigma and nir_noise_ratio must be >= 0")
        if not 0 <= self.domain_shift.rotation_strength <= np.pi:
            raise ValueError("rotation_strength must lie in [0, pi]")
        if self.input_dim < 2 * self.latent_dim + self.nuisance_dim + 1:
            raise ValueError("input_dim must be >= 2 * latent_dim + nuisance_dim + 1")
        if self.domain_shift.nir_noise_ratio > 0 and self.input_dim == 2 * self.latent_dim + self.nuisance_dim + 1:
            raise ValueError("nir_noise_ratio > 0 needs input_dim > 2 * latent_dim + nuisance_dim + 1")
        if self.rotated_planes is not None and not 0 <= self.rotated_planes <= self.latent_dim:
            raise ValueError("rotated_planes must lie in [0, latent_dim]")
        if self.n_vis_test_ids < 2 or self.vis_test_per_id < 2:
            raise ValueError("vis test pairs need >= 2 identities with >= 2 samples each")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GenSpec keys: {sorted(unknown)}")
        d = dict(d)
        if "domain_shift" in d:
            ds = d["domain_shift"]
            unknown = set(ds) - {f.name for f in fields(DomainShift)}
            if unknown:
                raise ValueError(f"unknown domain_shift keys: {sorted(unknown)}")
            d["domain_shift"] = DomainShift(**ds)
        return cls(**d)


class Sample(NamedTuple):
    obs: np.ndarray
    identity: int
    domain: str
    dataset: str


@dataclass
class Dataset:
    obs: np.ndarray
    ids: np.ndarray
    domains: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind == LARGE_VIS and np.any(self.domains != VIS):
            raise ValueError("LARGE_VIS samples must all be VIS")

    def __len__(self) -> int:
        return self.ids.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.obs[i], int(self.ids[i]), str(self.domains[i]), self.kind)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.obs[idx], self.ids[idx], self.domains[idx], self.kind)

    def where(self, domain: str) -> "Dataset":
        return self.subset(np.flatnonzero(self.domains == domain))

    @property
    def identities(self) -> np.ndarray:
        return np.unique(self.ids)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.kind == other.kind
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.domains, other.domains)
            and self.obs.tobytes() == other.obs.tobytes()
        )


@dataclass
class PairSet:
    """Verification pairs; row k of ``a`` is compared with row k of ``b``."""

    a: Dataset
    b: Dataset

    def __len__(self) -> int:
        return len(self.a)

    @property
    def same(self) -> np.ndarray:
        return self.a.ids == self.b.ids

    def equals(self, other: "PairSet") -> bool:
        return self.a.equals(other.a) and self.b.equals(other.b)


@dataclass
class SynthData:
    spec: GenSpec
    large_vis: Dataset
    hfr_train: Dataset
    hfr_test: Dataset
    vis_test_pairs: PairSet

    def equals(self, other: "SynthData") -> bool:
        return (
            self.spec == other.spec
            and self.large_vis.equals(other.large_vis)
            and self.hfr_train.equals(other.hfr_train)
            and self.hfr_test.equals(other.hfr_test)
            and self.vis_test_pairs.equals(other.vis_test_pairs)
        )


@dataclass
class BatchPair:
    hfr_batch: Dataset
    vis_batch: Dataset | None


class _World(NamedTuple):
    a_vis: np.ndarray
    a_nir: np.ndarray
    b_nir: np.ndarray
    nuisance: np.ndarray
    clutter: np.ndarray  # NIR-only noise directions, never exercised by VIS data


def _orthogonal(rng, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def _build_world(spec: GenSpec, rng) -> _World:
    L, Z = spec.latent_dim, spec.nuisance_dim
    basis = _orthogonal(rng, spec.input_dim)
    signal = basis[:, :L]
    partner = basis[:, L : 2 * L]
    nuis = basis[:, 2 * L : 2 * L + Z]
    bias_dir = basis[:, 2 * L + Z]

    a_vis = signal @ _orthogonal(rng, L)
    # plane k = (signal_k, partner_k) turns by rotation_strength * omega_k
    omega = rng.uniform(0.5, 1.0, size=L)
    n_rot = L if spec.rotated_planes is None else spec.rotated_planes
    omega[n_rot:] = 0.0
    K = np.zeros((2 * L, 2 * L))
    K[L + np.arange(L), np.arange(L)] = omega
    K[np.arange(L), L + np.arange(L)] = -omega
    span = np.hstack([signal, partner])
    rot = np.eye(spec.input_dim) + span @ (expm(spec.domain_shift.rotation_strength * K) - np.eye(2 * L)) @ span.T
    a_nir = rot @ a_vis
    b_nir = spec.domain_shift.bias_scale * bias_dir
    ds = spec.domain_shift
    clutter = basis[:, 2 * L + Z + 1 :] * (ds.nir_noise_ratio * ds.noise_sigma)
    return _World(a_vis, a_nir, b_nir, nuis * spec.nuisance_scale, clutter)


def _prototypes(rng, n: int, dim: int) -> np.ndarray:
    p = rng.normal(size=(n, dim))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def _nuisance(world: _World, rng, n_ids: int, count: int) -> np.ndarray:
    return rng.normal(size=(n_ids, count, world.nuisance.shape[1]))


def _observe(world: _World, proto: np.ndarray, domain: str, z: np.ndarray, sigma: float, rng) -> np.ndarray:
    n_ids, count, _ = z.shape
    dim = world.a_vis.shape[0]
    e = rng.normal(size=(n_ids, count, dim)) * sigma
    if domain == VIS:
        mean = proto @ world.a_vis.T
    else:
        mean = proto @ world.a_nir.T + world.b_nir
        e = e + rng.normal(size=(n_ids, count, world.clutter.shape[1])) @ world.clutter.T
    x = mean[:, None, :] + z @ world.nuisance.T + e
    return x.reshape(n_ids * count, dim)


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(x, PRECISION)


def _hfr_split(world, rng, spec: GenSpec, first_id: int) -> Dataset:
    n, k = spec.n_hfr_ids, spec.hfr_per_id_per_domain
    proto = _prototypes(rng, n, spec.latent_dim)
    sigma = spec.domain_shift.noise_sigma
    # paired captures: the j-th NIR and j-th VIS sample of an identity share their nuisance state
    z = _nuisance(world, rng, n, k)
    parts, ids, doms = [], [], []
    for domain in (NIR, VIS):
        parts.append(_observe(world, proto, domain, z, sigma, rng))
        ids.append(np.repeat(np.arange(first_id, first_id + n), k))
        doms.append(np.full(n * k, domain))
    return Dataset(_quantize(np.vstack(parts)), np.concatenate(ids), np.concatenate(doms), HFR)


def _vis_split(world, rng, n: int, per_id: int, spec: GenSpec, first_id: int) -> Dataset:
    proto = _prototypes(rng, n, spec.latent_dim)
    obs = _observe(world, proto, VIS, _nuisance(world, rng, n, per_id), spec.domain_shift.noise_sigma, rng)
    ids = np.repeat(np.arange(first_id, first_id + n), per_id)
    return Dataset(_quantize(obs), ids, np.full(n * per_id, VIS), LARGE_VIS)


def _make_pairs(pool: Dataset, n_pairs: int, rng) -> PairSet:
    n_same = n_pairs // 2
    n_diff = n_pairs - n_same
    by_id = {int(i): np.flatnonzero(pool.ids == i) for i in pool.identities}
    keys = np.array(sorted(by_id))
    ia, ib = [], []
    for i in rng.choice(keys, size=n_same, replace=True):
        a, b = rng.choice(by_id[int(i)], size=2, replace=False)
        ia.append(a)
        ib.append(b)
    for _ in range(n_diff):
        i, j = rng.choice(keys, size=2, replace=False)
        ia.append(rng.choice(by_id[int(i)]))
        ib.append(rng.choice(by_id[int(j)]))
    order = rng.permutation(n_pairs)
    ia, ib = np.asarray(ia)[order], np.asarray(ib)[order]
    return PairSet(pool.subset(ia), pool.subset(ib))


def generate(spec: GenSpec) -> SynthData:
    """Deterministic function of ``spec`` (seed included).

    Identity ranges: large VIS ``[0, n_vis_ids)``, then HFR train, HFR test,
    and the held-out VIS pair identities, all disjoint.
    """
    rng = np.random.default_rng(spec.seed)
    world = _build_world(spec, rng)
    large_vis = _vis_split(world, rng, spec.n_vis_ids, spec.vis_per_id, spec, 0)
    first = spec.n_vis_ids
    hfr_train = _hfr_split(world, rng, spec, first)
    hfr_test = _hfr_split(world, rng, spec, first + spec.n_hfr_ids)
    first += 2 * spec.n_hfr_ids
    pool = _vis_split(world, rng, spec.n_vis_test_ids, spec.vis_test_per_id, spec, first)
    pairs = _make_pairs(pool, spec.n_vis_test_pairs, rng)
    return SynthData(spec, large_vis, hfr_train, hfr_test, pairs)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


def sample_hfr_batch(dataset: Dataset, N: int, rng, k: int = 2) -> Dataset:
    """N/(2k) identities, k samples of each in each domain."""
    if N <= 0 or N % (2 * k) != 0:
        raise ValueError(f"N={N} must be a positive multiple of 2*k={2 * k}; choose N or k accordingly")
    if N > len(dataset):
        raise ValueError(f"N={N} exceeds dataset size {len(dataset)}")
    n_ids = N // (2 * k)
    ids = dataset.identities
    if n_ids > ids.size:
        raise ValueError(
            f"N={N} with k={k} needs {n_ids} identities but only {ids.size} exist; increase k to at least "
            f"{int(np.ceil(N / (2 * ids.size)))}"
        )
    chosen = rng.choice(ids, size=n_ids, replace=False)
    idx = []
    for i in chosen:
        for d in (NIR, VIS):
            pool = np.flatnonzero((dataset.ids == i) & (dataset.domains == d))
            if pool.size < k:
                raise ValueError(f"identity {i} has {pool.size} {d} samples, fewer than k={k}")
            idx.append(rng.choice(pool, size=k, replace=False))
    return dataset.subset(np.concatenate(idx))


def sample_vis_batch(dataset: Dataset, N: int, rng) -> Dataset:
    if N <= 0 or N > len(dataset):
        raise ValueError(f"cannot draw {N} samples without replacement from {len(dataset)}")
    batch = dataset.subset(rng.choice(len(dataset), size=N, replace=False))
    if np.any(batch.domains != VIS):
        raise ValueError("VIS batch drawn from a dataset containing non-VIS samples")
    return batch


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def _write_rows(fh, ds: Dataset) -> None:
    fmt = f"%.{PRECISION}f"
    body = np.char.mod(fmt, ds.obs)
    for i in range(len(ds)):
        fh.write(f"{int(ds.ids[i])},{ds.domains[i]},{','.join(body[i])}\n")


def save_split(path, name: str, data, spec: GenSpec) -> None:
    header = json.dumps({"split": name, "genspec": spec.to_dict()}, sort_keys=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# {header}\n")
        if isinstance(data, PairSet):
            # rows 2k and 2k+1 form pair k
            ds = Dataset(
                np.stack([data.a.obs, data.b.obs], axis=1).reshape(-1, data.a.obs.shape[1]),
                np.stack([data.a.ids, data.b.ids], axis=1).reshape(-1),
                np.stack([data.a.domains, data.b.domains], axis=1).reshape(-1),
                data.a.kind,
            )
            _write_rows(fh, ds)
        else:
            _write_rows(fh, data)


def load_split(path):
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ValueError(f"{path}: missing header line")
        header = json.loads(first[2:])
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    spec = GenSpec.from_dict(header["genspec"])
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    domains = np.array([r[1] for r in rows], dtype="<U1")
    obs = np.array([r[2:] for r in rows], dtype=np.float64).reshape(len(rows), -1)
    name = header["split"]
    kind = HFR if name.startswith("hfr") else LARGE_VIS
    ds = Dataset(obs, ids, domains, kind)
    if name == "vis_test_pairs":
        return spec, PairSet(ds.subset(np.arange(0, len(ds), 2)), ds.subset(np.arange(1, len(ds), 2)))
    return spec, ds


def save_dataset(data: SynthData, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in SPLITS:
        p = out / f"{name}.csv"
        save_split(p, name, getattr(data, name), data.spec)
        paths[name] = p
    return paths


def load_dataset(data_dir) -> SynthData:
    d = Path(data_dir)
    loaded = {}
    specs = set()
    for name in SPLITS:
        p = d / f"{name}.csv"
        if not p.exists():
            raise FileNotFoundError(f"missing split file {p}")
        spec, loaded[name] = load_split(p)
        specs.add(json.dumps(spec.to_dict(), sort_keys=True))
    if len(specs) != 1:
        raise ValueError("split files were generated from different GenSpecs")
    return SynthData(spec, **loaded)
