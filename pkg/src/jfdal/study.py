"""Experiment configuration and the multi-seed study / alpha-sweep drivers.

Everything the command line runs lives here so the acceptance tests can call
the same code paths without going through a subprocess.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .embedder import EmbedderParams, embed, save_checkpoint
from .eval import (
    DEFAULT_FARS,
    AnovaTable,
    Embeddings,
    PairComparison,
    TrialSummary,
    VerificationReport,
    evaluate,
    far_threshold,
    imposter_tail_mass,
    tukey_kramer_groups,
    two_way_anova,
)
from .synthdata import GenSpec, SynthData
from .trainer import TrainConfig, TrainResult, pretrain_vis, train_ft, train_jfdal, train_jt

log = logging.getLogger(__name__)

REGIMES = ("vis-only", "jt", "ft", "jfdal")
REGIME_LABELS = {"vis-only": "VIS-only", "jt": "Joint training", "ft": "Fine-tuning", "jfdal": "JFDAL"}
DEFAULT_ALPHA_GRID = (0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0)
VIS_METRIC = "vis_pair_accuracy"
TAIL_METRIC = "vis_imposter_tail"
DRIFT_METRIC = "vis_drift"


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def hfr_metric(far: float) -> str:
    return f"hfr_tar@far={far:g}"


def default_train_configs() -> dict[str, TrainConfig]:
    return {
        "vis-only": TrainConfig.pretrain_defaults(),
        "jt": TrainConfig.pretrain_defaults(),
        "ft": TrainConfig(),
        "jfdal": TrainConfig(),
    }


@dataclass(frozen=True)
class EvalSettings:
    fars: tuple[float, ...] = DEFAULT_FARS
    folds: int = 10
    n_seeds: int = 5
    seeds: tuple[int, ...] | None = None
    bin_width: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "fars", tuple(float(f) for f in self.fars))
        if self.seeds is not None:
            object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.fars or any(not 0 < f < 1 for f in self.fars):
            raise ConfigError("eval.fars must be a nonempty list of values in (0, 1)")
        if self.folds < 2:
            raise ConfigError("eval.folds must be >= 2")
        if self.n_seeds < 1:
            raise ConfigError("eval.n_seeds must be >= 1")
        if self.bin_width <= 0:
            raise ConfigError("eval.bin_width must be > 0")

    @property
    def seed_list(self) -> list[int]:
        return list(self.seeds) if self.seeds is not None else list(range(self.n_seeds))


@dataclass(frozen=True)
class ExperimentConfig:
    data: GenSpec = field(default_factory=GenSpec)
    train: Mapping[str, TrainConfig] = field(default_factory=default_train_configs)
    eval: EvalSettings = field(default_factory=EvalSettings)
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    out_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "alpha_grid", tuple(float(a) for a in self.alpha_grid))
        if set(self.train) != set(REGIMES):
            raise ConfigError(f"train must configure exactly {REGIMES}")
        if not self.alpha_grid or any(not 0 <= a <= 1 for a in self.alpha_grid):
            raise ConfigError("alpha_grid values must lie in [0, 1]")
        arch = {(c.hidden_dims, c.embed_dim) for c in self.train.values()}
        if len(arch) != 1:
            raise ConfigError("hidden_dims and embed_dim must agree across regimes (ft/jfdal start from vis-only)")

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - {"data", "train", "eval", "alpha_grid", "out_dir"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            data = GenSpec.from_dict(d.get("data") or {})
            train = default_train_configs()
            overrides = d.get("train") or {}
            bad = set(overrides) - set(REGIMES)
            if bad:
                raise ConfigError(f"unknown regimes under train: {sorted(bad)}; expected {list(REGIMES)}")
            for name, kw in overrides.items():
                train[name] = TrainConfig.from_dict({**train[name].to_dict(), **(kw or {})})
            ev = d.get("eval") or {}
            bad = set(ev) - {"fars", "folds", "n_seeds", "seeds", "bin_width"}
            if bad:
                raise ConfigError(f"unknown eval keys: {sorted(bad)}")
            return cls(data, train, EvalSettings(**ev), tuple(d.get("alpha_grid", DEFAULT_ALPHA_GRID)),
                       d.get("out_dir"))
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "train": {k: self.train[k].to_dict() for k in REGIMES},
            "eval": {
                "fars": list(self.eval.fars),
                "folds": self.eval.folds,
                "n_seeds": self.eval.n_seeds,
                "seeds": list(self.eval.seeds) if self.eval.seeds is not None else None,
                "bin_width": self.eval.bin_width,
            },
            "alpha_grid": list(self.alpha_grid),
            "out_dir": self.out_dir,
        }


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), sort_keys=False)


# ---------------------------------------------------------------------------
# per-seed runs
# ---------------------------------------------------------------------------


@dataclass
class RunOutcome:
    regime: str
    seed: int
    alpha: float | None
    result: TrainResult
    report: VerificationReport
    metrics: dict[str, float]


class Experiment:
    """Trains and evaluates regimes per seed, memoizing every run.

    The VIS-only run of a seed provides the guidance model for that seed's
    FT and JFDAL runs.  When ``out_dir`` is set, each run writes its
    checkpoint, training log, report and histogram tables under
    ``out_dir/seed_<s>/<run>/``.
    """

    def __init__(self, cfg: ExperimentConfig, data: SynthData, out_dir=None):
        self.cfg = cfg
        self.data = data
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._runs: dict[tuple, RunOutcome] = {}
        self._vis_threshold: dict[int, float] = {}

    def train_config(self, regime: str, seed: int, alpha: float | None = None) -> TrainConfig:
        cfg = replace(self.cfg.train[regime], seed=seed)
        if alpha is not None:
            cfg = replace(cfg, alpha=alpha)
        return cfg

    def guidance(self, seed: int) -> EmbedderParams:
        return self.run("vis-only", seed).result.guidance

    def vis_threshold(self, seed: int) -> float:
        """Cosine threshold at 1% FAR on VIS-VIS imposters under the pretrained model."""
        if seed not in self._vis_threshold:
            e = Embeddings.compute(self.guidance(seed), self.data)
            cos = e.vis_pair_cosines()
            self._vis_threshold[seed] = far_threshold(cos[~e.pair_same], 0.01)
        return self._vis_threshold[seed]

    def run(self, regime: str, seed: int, alpha: float | None = None) -> RunOutcome:
        if regime not in REGIMES:
            raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
        if regime != "jfdal" or alpha == self.cfg.train["jfdal"].alpha:
            alpha = None  # the configured alpha is the plain jfdal run
        key = (regime, seed, alpha)
        if key in self._runs:
            return self._runs[key]
        cfg = self.train_config(regime, seed, alpha)
        d = self.data
        log.info("training %s seed=%d%s", regime, seed, "" if alpha is None else f" alpha={alpha:g}")
        if regime == "vis-only":
            res = pretrain_vis(d.large_vis, cfg)
        elif regime == "jt":
            res = train_jt(d.large_vis, d.hfr_train, cfg)
        elif regime == "ft":
            res = train_ft(d.hfr_train, self.guidance(seed), cfg)
        else:
            res = train_jfdal(d.hfr_train, d.large_vis, self.guidance(seed), cfg)
        out = self._evaluate(regime, seed, alpha, res)
        self._runs[key] = out
        if self.out_dir is not None:
            self._write(out, cfg)
        return out

    def _evaluate(self, regime, seed, alpha, res: TrainResult) -> RunOutcome:
        ev = self.cfg.eval
        rep = evaluate(res.params, self.data, ev.fars, ev.folds, ev.bin_width)
        metrics = {hfr_metric(f): rep.tar_at_far[f] for f in ev.fars}
        metrics[VIS_METRIC] = rep.pair_accuracy
        e = Embeddings.compute(res.params, self.data)
        imp = e.vis_pair_cosines()[~e.pair_same]
        if regime == "vis-only":
            guidance = res.guidance
            self._vis_threshold[seed] = far_threshold(imp, 0.01)
        else:
            guidance = self.guidance(seed)
        metrics[TAIL_METRIC] = imposter_tail_mass(imp, self.vis_threshold(seed))
        if regime != "jt":
            probe = self.data.vis_test_pairs.a.obs
            metrics[DRIFT_METRIC] = float(np.linalg.norm(embed(probe, res.params) - embed(probe, guidance), axis=1).mean())
        rep.meta = {"regime": regime, "seed": seed, "alpha": alpha, "metrics": metrics}
        return RunOutcome(regime, seed, alpha, res, rep, metrics)

    def run_dir(self, regime: str, seed: int, alpha: float | None = None) -> Path:
        name = regime if alpha is None else f"{regime}_alpha={alpha:g}"
        return self.out_dir / f"seed_{seed}" / name

    def _write(self, out: RunOutcome, cfg: TrainConfig) -> None:
        d = self.run_dir(out.regime, out.seed, out.alpha)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(d / "checkpoint.npz", out.result.params,
                        {"regime": out.regime, "seed": out.seed, "train_config": cfg.to_dict()})
        if out.result.guidance is not None and out.regime == "vis-only":
            save_checkpoint(d / "guidance.npz", out.result.guidance, {"regime": out.regime, "seed": out.seed})
        out.result.log.write(d / "trainlog.jsonl")
        write_report(out.report, d / "report.json")

    def summary(self, regime: str, seeds: Sequence[int], alpha: float | None = None) -> TrialSummary:
        per_seed, failures = {}, {}
        for s in seeds:
            try:
                per_seed[s] = self.run(regime, s, alpha).metrics
            except Exception as exc:  # a failing seed is reported, not fatal
                log.warning("%s seed %d failed: %s", regime, s, exc)
                failures[s] = f"{type(exc).__name__}: {exc}"
        return TrialSummary(per_seed, failures)


def write_report(rep: VerificationReport, path) -> None:
    path = Path(path)
    path.write_text(rep.to_json())
    for kind, h in rep.angle_histograms.items():
        path.with_name(f"{path.stem}_{kind}_angles.csv").write_text(h.table())


# ---------------------------------------------------------------------------
# study and sweep
# ---------------------------------------------------------------------------


@dataclass
class StudyResult:
    summaries: dict[str, TrialSummary]
    anova: AnovaTable | None
    tukey: list[PairComparison]
    fars: tuple[float, ...]
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "regimes": {r: s.to_dict() for r, s in self.summaries.items()},
            "anova": self.anova.to_dict() if self.anova else None,
            "tukey": [vars(c) for c in self.tukey],
            "notes": self.notes,
        }


def anova_cells(ft: TrialSummary, jf: TrialSummary, hfr_key: str) -> tuple[list, list, list]:
    """Observations for the (model x domain) design: NIR-VIS uses the HFR metric, VIS-VIS the pair accuracy."""
    y, model, domain = [], [], []
    for name, summ in (("ft", ft), ("jfdal", jf)):
        for dom, key in (("NIR-VIS", hfr_key), ("VIS-VIS", VIS_METRIC)):
            for v in summ.values(key) if summ.per_seed else []:
                y.append(float(v))
                model.append(name)
                domain.append(dom)
    return y, model, domain


def run_study(exp: Experiment, seeds: Sequence[int] | None = None) -> StudyResult:
    seeds = list(seeds) if seeds is not None else exp.cfg.eval.seed_list
    fars = exp.cfg.eval.fars
    summaries = {r: exp.summary(r, seeds) for r in REGIMES}
    notes = []
    for r, s in summaries.items():
        for seed, msg in s.failures.items():
            notes.append(f"{REGIME_LABELS[r]} seed {seed} failed and was excluded: {msg}")
    hfr_key = hfr_metric(fars[0])
    y, model, domain = anova_cells(summaries["ft"], summaries["jfdal"], hfr_key)
    anova, tukey = None, []
    try:
        anova = two_way_anova(y, model, domain, names=("model", "domain"))
        groups: dict[str, list[float]] = {}
        for v, m, dm in zip(y, model, domain):
            groups.setdefault(f"{m}/{dm}", []).append(v)
        tukey = tukey_kramer_groups(groups)
    except ValueError as exc:
        notes.append(f"statistics skipped: {exc}")
    return StudyResult(summaries, anova, tukey, fars, notes)


@dataclass
class SweepRow:
    alpha: float
    summary: TrialSummary


def run_sweep(exp: Experiment, alphas: Iterable[float] | None = None, seeds: Sequence[int] | None = None) -> list[SweepRow]:
    seeds = list(seeds) if seeds is not None else exp.cfg.eval.seed_list
    alphas = list(alphas) if alphas is not None else list(exp.cfg.alpha_grid)
    return [SweepRow(a, exp.summary("jfdal", seeds, a)) for a in alphas]


def _mean_std(summ: TrialSummary, key: str, scale: float = 100.0) -> str:
    if not summ.per_seed or key not in summ.metrics:
        return "n/a"
    v = summ.values(key) * scale
    std = v.std(ddof=1) if v.size > 1 else float("nan")
    return f"{v.mean():.2f} ({std:.2f})"


def format_study(res: StudyResult) -> str:
    cols = [("VIS acc [%]", VIS_METRIC)] + [(f"TAR@FAR={f * 100:g}% [%]", hfr_metric(f)) for f in res.fars]
    width = 18
    lines = ["Method".ljust(16) + "".join(c.rjust(width) for c, _ in cols)]
    for r in REGIMES:
        s = res.summaries[r]
        lines.append(REGIME_LABELS[r].ljust(16) + "".join(_mean_std(s, k).rjust(width) for _, k in cols))
    lines.append("Parentheses indicate standard deviations over seeds.")
    lines.append("")
    lines.append("Statistics: two-way ANOVA, factors model (ft vs jfdal) and domain (NIR-VIS vs VIS-VIS)")
    lines.append(f"  response: NIR-VIS = {hfr_metric(res.fars[0])}, VIS-VIS = {VIS_METRIC}")
    if res.anova is not None:
        lines.append(f"  {'source':<14}{'SS':>14}{'df':>5}{'F':>14}{'p':>14}")
        for name, row in res.anova.rows.items():
            lines.append(f"  {name:<14}{row.ss:>14.6g}{row.df:>5d}{row.F:>14.6g}{row.p:>14.6g}")
        lines.append(f"  {'residual':<14}{res.anova.residual_ss:>14.6g}{res.anova.residual_df:>5d}")
        lines.append("")
        lines.append("Tukey-Kramer pairwise comparisons (alpha = 0.05)")
        for c in res.tukey:
            verdict = "reject" if c.reject else "retain"
            lines.append(f"  {c.group1:>14} vs {c.group2:<14} diff={c.meandiff:+.5f}  q={c.q:.4g}  p={c.p:.4g}  {verdict}")
    for n in res.notes:
        lines.append(f"note: {n}")
    return "\n".join(lines) + "\n"


def monotone_advisory(rows: Sequence[SweepRow], key: str = VIS_METRIC) -> str:
    """VIS metric expected to rise as alpha falls; report violations without failing."""
    pts = [(r.alpha, float(r.summary.values(key).mean())) for r in sorted(rows, key=lambda r: r.alpha)
           if r.summary.per_seed]
    bad = [(a0, a1) for (a0, v0), (a1, v1) in zip(pts, pts[1:]) if v1 > v0]
    if not bad:
        return f"advisory: mean {key} is non-increasing in alpha across the grid"
    spans = ", ".join(f"{a0:g}->{a1:g}" for a0, a1 in bad)
    return f"advisory: mean {key} rises with alpha on {spans} (expected non-increasing; not a failure)"


def format_sweep(rows: Sequence[SweepRow], far: float) -> str:
    key = hfr_metric(far)
    lines = [f"{'alpha':>6}{'VIS acc [%]':>18}{f'TAR@FAR={far * 100:g}% [%]':>20}"]
    for r in rows:
        lines.append(f"{r.alpha:>6g}{_mean_std(r.summary, VIS_METRIC):>18}{_mean_std(r.summary, key):>20}")
    lines.append("Parentheses indicate standard deviations over seeds; alpha = 1 is fine-tuning.")
    lines.append(monotone_advisory(rows))
    for r in rows:
        for seed, msg in r.summary.failures.items():
            lines.append(f"note: alpha={r.alpha:g} seed {seed} failed and was excluded: {msg}")
    return "\n".join(lines) + "\n"


def sweep_to_dict(rows: Sequence[SweepRow]) -> dict:
    return {"rows": [{"alpha": r.alpha, **r.summary.to_dict()} for r in rows]}


def sign_test_p(wins: int, n: int) -> float:
    """Exact two-sided sign test p-value for ``wins`` successes out of ``n`` non-tied pairs."""
    if n == 0:
        return 1.0
    k = min(wins, n - wins)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2.0**n
    return min(1.0, 2.0 * tail)
