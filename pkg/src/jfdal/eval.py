"""Verification metrics and the statistics used to compare training regimes."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import betainc
from scipy.stats import studentized_range

from .embedder import EmbedderParams, embed
from .losses import NIR, VIS
from .synthdata import SynthData

log = logging.getLogger(__name__)

DEFAULT_FARS = (0.01, 0.001)


@dataclass
class ScoreSet:
    genuine: np.ndarray
    imposter: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.imposter = np.asarray(self.imposter, dtype=np.float64).ravel()


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cosine similarity undefined for a zero vector")
    return x / n


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.clip(_unit_rows(np.asarray(a, float)) @ _unit_rows(np.asarray(b, float)).T, -1.0, 1.0)


def paired_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.clip(np.sum(_unit_rows(a) * _unit_rows(b), axis=1), -1.0, 1.0)


def score_probe_gallery(probe, probe_ids, gallery, gallery_ids) -> ScoreSet:
    """All probe x gallery cosine scores split by identity match."""
    probe, gallery = np.asarray(probe, float), np.asarray(gallery, float)
    if probe.shape[0] == 0 or gallery.shape[0] == 0:
        raise ValueError("probe and gallery must be nonempty")
    S = cosine_matrix(probe, gallery)
    same = np.asarray(probe_ids)[:, None] == np.asarray(gallery_ids)[None, :]
    return ScoreSet(S[same], S[~same])


# ---------------------------------------------------------------------------
# verification metrics
# ---------------------------------------------------------------------------


def far_threshold(imposter, far: float) -> float:
    """Smallest observed imposter score t with fraction(imposter >= t) <= far.

    When no observed score qualifies the threshold sits just above the
    largest imposter score.
    """
    imp = np.sort(np.asarray(imposter, dtype=np.float64))
    n = imp.size
    if n == 0:
        raise ValueError("empty imposter scores")
    if not 0.0 < far < 1.0:
        raise ValueError("far must lie in (0, 1)")
    if far * n < 1:
        log.warning("far=%g with only %d imposters: threshold falls above every imposter", far, n)
    values = np.unique(imp)
    at_or_above = n - np.searchsorted(imp, values, side="left")
    ok = np.flatnonzero(at_or_above / n <= far)
    if ok.size == 0:
        return float(np.nextafter(values[-1], np.inf))
    return float(values[ok[0]])


def tar_at_far(scores: ScoreSet, far: float) -> float:
    if scores.genuine.size == 0:
        raise ValueError("empty genuine scores")
    t = far_threshold(scores.imposter, far)
    return float(np.mean(scores.genuine >= t))


def _best_threshold(scores: np.ndarray, same: np.ndarray) -> float:
    """Accuracy-maximizing threshold among observed scores (and one above all); ties -> smallest."""
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], same[order]
    cand = np.unique(s)
    left = np.searchsorted(s, cand, side="left")
    cum_pos = np.concatenate([[0], np.cumsum(y)])
    cum_neg = np.concatenate([[0], np.cumsum(~y)])
    n_pos, n_neg = cum_pos[-1], cum_neg[-1]
    # predicted same iff score >= t: correct = positives at/above + negatives below
    correct = (n_pos - cum_pos[left]) + cum_neg[left]
    correct = np.append(correct, n_neg)
    cand = np.append(cand, np.inf)
    return float(cand[int(np.argmax(correct))])


def pair_accuracy(scores, same, folds: int = 10) -> float:
    """Mean held-out accuracy over contiguous folds, threshold fit on the remaining folds."""
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if scores.shape != same.shape:
        raise ValueError("scores and labels differ in length")
    if folds < 2 or scores.size < folds:
        raise ValueError(f"need at least {folds} pairs and folds >= 2")
    if same.all() or not same.any():
        raise ValueError("pair accuracy needs both genuine and imposter pairs")
    parts = np.array_split(np.arange(scores.size), folds)
    accs = []
    for k, test in enumerate(parts):
        train = np.concatenate([p for j, p in enumerate(parts) if j != k])
        t = _best_threshold(scores[train], same[train])
        accs.append(float(np.mean((scores[test] >= t) == same[test])))
    return math.fsum(accs) / folds


# ---------------------------------------------------------------------------
# angle distributions
# ---------------------------------------------------------------------------


@dataclass
class AngleHistogram:
    bin_edges: np.ndarray
    genuine_counts: np.ndarray
    imposter_counts: np.ndarray

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    @staticmethod
    def _normalize(c: np.ndarray) -> np.ndarray:
        m = c.max(initial=0)
        return c / m if m > 0 else c.astype(float)

    @property
    def genuine(self) -> np.ndarray:
        return self._normalize(self.genuine_counts)

    @property
    def imposter(self) -> np.ndarray:
        return self._normalize(self.imposter_counts)

    def table(self) -> str:
        """Plot-ready columns: bin_center, genuine, imposter (max-normalized)."""
        lines = ["bin_center,genuine,imposter"]
        for c, g, i in zip(self.bin_centers, self.genuine, self.imposter):
            lines.append(f"{c:.3f},{g:.6f},{i:.6f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "bin_edges": self.bin_edges.tolist(),
            "genuine_counts": self.genuine_counts.tolist(),
            "imposter_counts": self.imposter_counts.tolist(),
        }


def angles_deg(cosines) -> np.ndarray:
    return np.degrees(np.arccos(np.clip(np.asarray(cosines, dtype=np.float64), -1.0, 1.0)))


def angle_histogram(cosines, same, bin_width: float = 1.0) -> AngleHistogram:
    cosines = np.asarray(cosines, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if cosines.size == 0:
        raise ValueError("no pairs to histogram")
    edges = np.arange(0.0, 180.0 + bin_width / 2, bin_width)
    if edges[-1] < 180.0:
        edges = np.append(edges, 180.0)
    ang = angles_deg(cosines)
    g, _ = np.histogram(ang[same], bins=edges)
    i, _ = np.histogram(ang[~same], bins=edges)
    return AngleHistogram(edges, g, i)


def imposter_tail_mass(imposter_cosines, threshold_cosine: float) -> float:
    """Fraction of imposter pairs at or above a cosine threshold (below its angle)."""
    imp = np.asarray(imposter_cosines, dtype=np.float64)
    return float(np.mean(imp >= threshold_cosine))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class VerificationReport:
    tar_at_far: dict[float, float]
    pair_accuracy: float
    angle_histograms: dict[str, AngleHistogram] = field(default_factory=dict)
    trial_stats: dict[str, dict[str, float]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        out = {f"tar@far={far:g}": v for far, v in self.tar_at_far.items()}
        out["vis_pair_accuracy"] = self.pair_accuracy
        return out

    def to_dict(self) -> dict:
        return {
            "tar_at_far": {f"{k:g}": v for k, v in self.tar_at_far.items()},
            "pair_accuracy": self.pair_accuracy,
            "angle_histograms": {k: h.to_dict() for k, h in self.angle_histograms.items()},
            "trial_stats": self.trial_stats,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationReport":
        hists = {
            k: AngleHistogram(np.asarray(h["bin_edges"]), np.asarray(h["genuine_counts"]), np.asarray(h["imposter_counts"]))
            for k, h in d.get("angle_histograms", {}).items()
        }
        return cls(
            {float(k): v for k, v in d["tar_at_far"].items()},
            d["pair_accuracy"],
            hists,
            d.get("trial_stats", {}),
            d.get("meta", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "VerificationReport":
        return cls.from_dict(json.loads(text))


@dataclass
class Embeddings:
    """Embeddings of every evaluation split for one model."""

    probe: np.ndarray
    probe_ids: np.ndarray
    gallery: np.ndarray
    gallery_ids: np.ndarray
    pair_a: np.ndarray
    pair_b: np.ndarray
    pair_same: np.ndarray

    @classmethod
    def compute(cls, params: EmbedderParams, data: SynthData) -> "Embeddings":
        probe = data.hfr_test.where(NIR)
        gallery = data.hfr_test.where(VIS)
        pairs = data.vis_test_pairs
        return cls(
            embed(probe.obs, params), probe.ids, embed(gallery.obs, params), gallery.ids,
            embed(pairs.a.obs, params), embed(pairs.b.obs, params), pairs.same,
        )

    def hfr_scores(self) -> ScoreSet:
        return score_probe_gallery(self.probe, self.probe_ids, self.gallery, self.gallery_ids)

    def vis_pair_cosines(self) -> np.ndarray:
        return paired_cosines(self.pair_a, self.pair_b)


def evaluate(params: EmbedderParams, data: SynthData, fars: Sequence[float] = DEFAULT_FARS, folds: int = 10,
             bin_width: float = 1.0) -> VerificationReport:
    """HFR TAR@FAR on NIR probes vs VIS gallery, VIS pair accuracy, angle histograms."""
    if params.config.input_dim != data.hfr_test.obs.shape[1]:
        raise ValueError(
            f"checkpoint input_dim {params.config.input_dim} does not match data dimension {data.hfr_test.obs.shape[1]}"
        )
    e = Embeddings.compute(params, data)
    hfr = e.hfr_scores()
    vis_cos = e.vis_pair_cosines()
    hists = {
        "NIR-VIS": angle_histogram(np.concatenate([hfr.genuine, hfr.imposter]),
                                   np.r_[np.ones(hfr.genuine.size, bool), np.zeros(hfr.imposter.size, bool)], bin_width),
        "VIS-VIS": angle_histogram(vis_cos, e.pair_same, bin_width),
    }
    return VerificationReport(
        {float(f): tar_at_far(hfr, f) for f in fars},
        pair_accuracy(vis_cos, e.pair_same, folds),
        hists,
    )


# ---------------------------------------------------------------------------
# multi-trial aggregation
# ---------------------------------------------------------------------------


@dataclass
class TrialSummary:
    per_seed: dict[int, dict[str, float]]
    failures: dict[int, str]

    @property
    def metrics(self) -> list[str]:
        names: list[str] = []
        for m in self.per_seed.values():
            names.extend(k for k in m if k not in names)
        return names

    def values(self, metric: str) -> np.ndarray:
        return np.array([m[metric] for _, m in sorted(self.per_seed.items())])

    def stats(self) -> dict[str, dict[str, float]]:
        out = {}
        for name in self.metrics:
            v = self.values(name)
            out[name] = {
                "mean": float(v.mean()),
                "std": float(v.std(ddof=1)) if v.size > 1 else float("nan"),
                "n": int(v.size),
            }
        return out

    def to_dict(self) -> dict:
        return {
            "per_seed": {str(k): v for k, v in sorted(self.per_seed.items())},
            "failures": {str(k): v for k, v in sorted(self.failures.items())},
            "stats": self.stats(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialSummary":
        return cls({int(k): v for k, v in d["per_seed"].items()}, {int(k): v for k, v in d.get("failures", {}).items()})


def run_trials(regime: Callable[[int], Mapping[str, float]], seeds: int | Sequence[int]) -> TrialSummary:
    """Run ``regime(seed)`` per seed; failing seeds are recorded and excluded."""
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    if len(seeds) < 2:
        raise ValueError("run_trials needs at least 2 seeds")
    per_seed, failures = {}, {}
    for s in seeds:
        try:
            per_seed[s] = {k: float(v) for k, v in regime(s).items()}
        except Exception as exc:  # one bad seed must not sink the study
            log.warning("seed %d failed: %s", s, exc)
            failures[s] = f"{type(exc).__name__}: {exc}"
    return TrialSummary(per_seed, failures)


# ---------------------------------------------------------------------------
# two-way ANOVA and Tukey-Kramer
# ---------------------------------------------------------------------------


def f_sf(F: float, df1: float, df2: float) -> float:
    """Upper tail of the F distribution via the regularized incomplete beta function."""
    if math.isinf(F):
        return 0.0
    if F <= 0:
        return 1.0
    return float(betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * F)))


@dataclass
class AnovaRow:
    ss: float
    df: int
    F: float
    p: float


@dataclass
class AnovaTable:
    rows: dict[str, AnovaRow]
    residual_ss: float
    residual_df: int

    @property
    def mse(self) -> float:
        return self.residual_ss / self.residual_df

    def to_dict(self) -> dict:
        d = {k: asdict(v) for k, v in self.rows.items()}
        d["residual"] = {"ss": self.residual_ss, "df": self.residual_df}
        return d


def _effect_columns(codes: np.ndarray, n_levels: int) -> np.ndarray:
    """Sum-to-zero contrast columns for a factor."""
    X = np.zeros((codes.size, n_levels - 1))
    for j in range(n_levels - 1):
        X[codes == j, j] = 1.0
    X[codes == n_levels - 1, :] = -1.0
    return X


def _rss(y: np.ndarray, X: np.ndarray) -> float:
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ beta
    return float(r @ r)


def two_way_anova(values, factor_a, factor_b, names: tuple[str, str] = ("model", "domain")) -> AnovaTable:
    """Two-way ANOVA with interaction, type-II sums of squares."""
    y = np.asarray(values, dtype=np.float64)
    la, ca = np.unique(np.asarray(factor_a), return_inverse=True)
    lb, cb = np.unique(np.asarray(factor_b), return_inverse=True)
    if la.size < 2 or lb.size < 2:
        raise ValueError("each factor needs at least two levels")
    for i in range(la.size):
        for j in range(lb.size):
            n = np.sum((ca == i) & (cb == j))
            if n < 2:
                raise ValueError(f"cell ({la[i]}, {lb[j]}) has {n} observations; need >= 2")
    one = np.ones((y.size, 1))
    A = _effect_columns(ca, la.size)
    B = _effect_columns(cb, lb.size)
    AB = np.hstack([A[:, [i]] * B[:, [j]] for i in range(A.shape[1]) for j in range(B.shape[1])])
    rss_a = _rss(y, np.hstack([one, A]))
    rss_b = _rss(y, np.hstack([one, B]))
    rss_ab = _rss(y, np.hstack([one, A, B]))
    rss_full = _rss(y, np.hstack([one, A, B, AB]))
    df_res = y.size - la.size * lb.size
    mse = rss_full / df_res
    terms = {
        names[0]: (rss_b - rss_ab, la.size - 1),
        names[1]: (rss_a - rss_ab, lb.size - 1),
        f"{names[0]}:{names[1]}": (rss_ab - rss_full, (la.size - 1) * (lb.size - 1)),
    }
    rows = {}
    for name, (ss, df) in terms.items():
        ss = max(ss, 0.0)
        if mse > 0:
            F = (ss / df) / mse
        else:
            F = math.inf if ss > 0 else 0.0
        rows[name] = AnovaRow(ss, df, F, f_sf(F, df, df_res))
    return AnovaTable(rows, rss_full, df_res)


@dataclass
class PairComparison:
    group1: str
    group2: str
    meandiff: float
    q: float
    p: float
    reject: bool


def tukey_kramer(means, sizes, mse: float, df: int, alpha: float = 0.05, names=None) -> list[PairComparison]:
    """Pairwise studentized-range tests with the Kramer unequal-n correction."""
    means = np.asarray(means, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    k = means.size
    if k < 2:
        raise ValueError("need at least two groups")
    names = [str(n) for n in (names if names is not None else range(k))]
    out = []
    for i, j in combinations(range(k), 2):
        diff = means[j] - means[i]
        se = math.sqrt(mse / 2.0 * (1.0 / sizes[i] + 1.0 / sizes[j]))
        if se == 0:
            q = math.inf if diff != 0 else 0.0
        else:
            q = abs(diff) / se
        p = 0.0 if math.isinf(q) else float(studentized_range.sf(q, k, df))
        out.append(PairComparison(names[i], names[j], float(diff), q, p, bool(p < alpha)))
    return out


def tukey_kramer_groups(groups: Mapping[str, Sequence[float]], alpha: float = 0.05) -> list[PairComparison]:
    """Tukey-Kramer from raw per-group observations with the pooled within-group variance."""
    names = list(groups)
    arrays = [np.asarray(groups[n], dtype=np.float64) for n in names]
    sizes = [a.size for a in arrays]
    df = sum(sizes) - len(arrays)
    if df < 1:
        raise ValueError("not enough observations for a pooled variance")
    ss = sum(float(((a - a.mean()) ** 2).sum()) for a in arrays)
    return tukey_kramer([a.mean() for a in arrays], sizes, ss / df, df, alpha, names)
