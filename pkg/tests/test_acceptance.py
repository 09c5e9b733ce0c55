"""Acceptance criteria, each printed as one PASS/FAIL line in the terminal summary.

Criteria 5-9 share a single default-scale experiment: default GenSpec, default
training configs, five seeds and the full alpha grid.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from jfdal import diffcore as dc
from jfdal.embedder import embed
from jfdal.eval import ScoreSet, pair_accuracy, tar_at_far, tukey_kramer_groups, two_way_anova
from jfdal.losses import cfdal_loss, domain_alignment_loss, margin_softmax_loss, sfdal_loss, total_loss, MarginConfig
from jfdal.study import (
    DEFAULT_ALPHA_GRID,
    TAIL_METRIC,
    VIS_METRIC,
    Experiment,
    ExperimentConfig,
    hfr_metric,
    run_study,
    run_sweep,
    sign_test_p,
)
from jfdal.synthdata import NIR, VIS, DomainShift, GenSpec, generate
from jfdal.trainer import train_ft, train_jfdal
from test_eval import (
    BAL_DOMAIN,
    BAL_MODEL,
    BAL_REF,
    BAL_RESID,
    BAL_Y,
    TUKEY_GROUPS,
    TUKEY_REF,
    UNB_DOMAIN,
    UNB_MODEL,
    UNB_REF,
    UNB_RESID,
    UNB_Y,
    pair_accuracy_oracle,
    tar_oracle,
)

N_SEEDS = 5
HFR = hfr_metric(0.01)


def record(num, ok, detail, advisory=False):
    tag = "PASS" if ok else ("FAIL (advisory)" if advisory else "FAIL")
    ACCEPTANCE_LINES.append(f"{tag} criterion {num}: {detail}")


# ---------------------------------------------------------------------------
# shared default-scale experiment
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def experiment():
    cfg = ExperimentConfig()
    assert cfg.eval.seed_list == list(range(N_SEEDS))
    assert cfg.alpha_grid == DEFAULT_ALPHA_GRID
    return Experiment(cfg, generate(cfg.data))


@pytest.fixture(scope="module")
def study(experiment):
    t0 = time.perf_counter()
    res = run_study(experiment)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="module")
def sweep(experiment, study):
    t0 = time.perf_counter()
    rows = {r.alpha: r.summary for r in run_sweep(experiment)}
    return rows, time.perf_counter() - t0


def per_seed(summary, key):
    return summary.values(key)


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------


def _hfr_batch(rng, n_ids=3, k=2, D=5):
    ids = np.repeat(np.arange(n_ids), 2 * k)
    doms = np.tile([NIR] * k + [VIS] * k, n_ids)
    return rng.normal(size=(ids.size, D)), ids, doms


def test_criterion_1_gradients():
    worst = {"margin softmax": 0.0, "domain alignment": 0.0, "sfdal": 0.0, "jfdal composite": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        emb, ids, doms = _hfr_batch(rng)
        head = rng.normal(size=(3, 5))
        teacher = rng.normal(size=(4, 5))
        cfg = MarginConfig()
        alpha, lam = rng.uniform(0.05, 0.95), rng.uniform(0.01, 1.0)
        checks = {
            "margin softmax": (lambda e, h: margin_softmax_loss(e, ids, h, cfg), [emb, head]),
            "domain alignment": (lambda e: domain_alignment_loss(e, ids, doms).loss, [emb]),
            "sfdal": (lambda s: sfdal_loss(s, teacher), [rng.normal(size=(4, 5))]),
            "jfdal composite": (
                lambda e, h, s: total_loss(cfdal_loss(e, ids, doms, h, cfg, lam)[0], sfdal_loss(s, teacher), alpha),
                [emb, head, rng.normal(size=(4, 5))],
            ),
        }
        for name, (fn, arrays) in checks.items():
            worst[name] = max(worst[name], dc.check_gradients(fn, arrays, rtol=1e-4))
    ok = all(v <= 1.0 for v in worst.values())
    detail = ", ".join(f"{k} {v:.3g}" for k, v in worst.items())
    record(1, ok, f"finite-difference checks, 20 seeds each, worst error / (1e-7 + 1e-4 |fd|): {detail}")
    assert ok


# ---------------------------------------------------------------------------
# 2. alpha = 1 reduction
# ---------------------------------------------------------------------------


def test_criterion_2_alpha_one_is_fine_tuning(experiment):
    guidance = experiment.guidance(0)
    cfg = experiment.train_config("jfdal", 0, alpha=1.0)
    steps_per_epoch = int(np.ceil(len(experiment.data.hfr_train) / cfg.N))
    cfg = replace(cfg, epochs=int(np.ceil(60 / steps_per_epoch)))
    traj_jf, traj_ft = [], []
    train_jfdal(experiment.data.hfr_train, experiment.data.large_vis, guidance, cfg,
                on_step=lambda s, p: traj_jf.append(p))
    train_ft(experiment.data.hfr_train, guidance, cfg, on_step=lambda s, p: traj_ft.append(p))
    same = len(traj_jf) == len(traj_ft) and all(a.equal(b) for a, b in zip(traj_jf, traj_ft))
    ok = same and len(traj_jf) >= 50
    record(2, ok, f"train_jfdal(alpha=1) vs train_ft, {len(traj_jf)} steps, bit-identical={same}")
    assert ok


# ---------------------------------------------------------------------------
# 3. zero cases
# ---------------------------------------------------------------------------


def test_criterion_3_zero_cases(experiment):
    # NIR and VIS captures coincide when rotation, bias and sensor noise are all zero
    spec = GenSpec(domain_shift=DomainShift(rotation_strength=0.0, bias_scale=0.0, noise_sigma=0.0))
    hfr = generate(spec).hfr_train
    nir, vis = hfr.where(NIR), hfr.where(VIS)
    assert np.array_equal(nir.obs, vis.obs)
    feats = embed(hfr.obs, experiment.guidance(0))
    l_dom = domain_alignment_loss(dc.Tensor(feats), hfr.ids, hfr.domains).loss.item()

    first_sfdal = []
    for seed in range(N_SEEDS):
        cfg = experiment.train_config("jfdal", seed)
        res = train_jfdal(experiment.data.hfr_train, experiment.data.large_vis, experiment.guidance(seed),
                          replace(cfg, epochs=1))
        first_sfdal.append(res.log.steps[0]["l_sfdal"])
    ok = l_dom == 0.0 and all(v == 0.0 for v in first_sfdal)
    record(3, ok, f"l_dom on coinciding domains = {l_dom!r}; l_sfdal at step 0 over {N_SEEDS} seeds = {first_sfdal}")
    assert ok


# ---------------------------------------------------------------------------
# 4. metric oracles
# ---------------------------------------------------------------------------


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(4)
    tar_ok = pair_ok = 0
    for _ in range(100):
        gen = np.round(rng.normal(0.5, 0.2, rng.integers(1, 40)), 2)
        imp = np.round(rng.normal(0.0, 0.2, rng.integers(1, 200)), 2)
        far = float(rng.choice([0.5, 0.1, 0.05, 0.01, 0.001]))
        tar_ok += tar_at_far(ScoreSet(gen, imp), far) == tar_oracle(gen.tolist(), imp.tolist(), far)
        n = int(rng.integers(10, 60))
        same = rng.random(n) < 0.5
        same[:2] = [True, False]
        scores = np.round(rng.normal(0, 1, n) + same * rng.uniform(0, 2), 1)
        folds = int(rng.choice([2, 5, 10]))
        pair_ok += pair_accuracy(scores, same, folds) == pair_accuracy_oracle(scores.tolist(), same.tolist(), folds)

    dev = 0.0
    for y, a, b, ref, resid in ((BAL_Y, BAL_MODEL, BAL_DOMAIN, BAL_REF, BAL_RESID),
                                (UNB_Y, UNB_MODEL, UNB_DOMAIN, UNB_REF, UNB_RESID)):
        t = two_way_anova(y, a, b)
        for name, (ss, df, F, p) in ref.items():
            row = t.rows[name]
            dev = max(dev, abs(row.ss - ss), abs(row.F - F), abs(row.p - p), abs(row.df - df))
        dev = max(dev, abs(t.residual_ss - resid[0]), abs(t.residual_df - resid[1]))
    got = {(c.group1, c.group2): c for c in tukey_kramer_groups(TUKEY_GROUPS)}
    reject_ok = True
    for key, (diff, q, p, reject) in TUKEY_REF.items():
        c = got[key]
        dev = max(dev, abs(c.meandiff - diff), abs(c.q - q), abs(c.p - p))
        reject_ok &= c.reject is reject
    ok = tar_ok == 100 and pair_ok == 100 and dev <= 1e-6 and reject_ok
    record(4, ok, f"tar_at_far exact on {tar_ok}/100, pair_accuracy exact on {pair_ok}/100, "
                  f"ANOVA/Tukey-Kramer max deviation from frozen fixtures {dev:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 5-9. trend reproduction
# ---------------------------------------------------------------------------


def test_criterion_5_hfr_ordering(study):
    res, seconds = study
    s = res.summaries
    assert not any(v.failures for v in s.values())
    m = {r: per_seed(s[r], HFR) for r in ("vis-only", "jt", "ft", "jfdal")}
    means = {r: float(v.mean()) for r, v in m.items()}
    ok = means["vis-only"] < means["jt"] < min(means["ft"], means["jfdal"])
    wins = {
        "jt>vis-only": int((m["jt"] > m["vis-only"]).sum()),
        "ft>jt": int((m["ft"] > m["jt"]).sum()),
        "jfdal>jt": int((m["jfdal"] > m["jt"]).sum()),
    }
    sign = (f"sign tests not applicable at n={N_SEEDS} "
            f"(smallest two-sided p = {sign_test_p(N_SEEDS, N_SEEDS):.4f} > 0.05)")
    detail = ", ".join(f"{r} {v:.4f}" for r, v in means.items())
    wins_txt = ", ".join(f"{k} {v}/{N_SEEDS}" for k, v in wins.items())
    record(5, ok, f"mean TAR@FAR=1%: {detail}; per-seed wins {wins_txt}; {sign}; "
                  f"study runtime {seconds:.0f}s")
    assert ok


def test_criterion_6_vis_degradation(study):
    res, seconds = study
    s = res.summaries
    base = per_seed(s["vis-only"], VIS_METRIC)
    deg_ft = base - per_seed(s["ft"], VIS_METRIC)
    deg_jf = base - per_seed(s["jfdal"], VIS_METRIC)
    wins = int((deg_jf < deg_ft).sum())
    ok = wins >= 4
    record(6, ok, f"VIS pair-accuracy degradation JFDAL < FT in {wins}/{N_SEEDS} seeds "
                  f"(FT {np.round(deg_ft, 4).tolist()}, JFDAL {np.round(deg_jf, 4).tolist()})")
    assert ok


def test_criterion_7_imposter_tail(study):
    res, seconds = study
    s = res.summaries
    base = per_seed(s["vis-only"], TAIL_METRIC)
    inc_ft = float((per_seed(s["ft"], TAIL_METRIC) - base).mean())
    inc_jf = float((per_seed(s["jfdal"], TAIL_METRIC) - base).mean())
    ok = inc_ft > 0 and inc_jf < inc_ft
    record(7, ok, f"imposter tail mass above the pretrained 1%-FAR threshold: VIS-only {base.mean():.4f}, "
                  f"increase FT {inc_ft:+.4f}, increase JFDAL {inc_jf:+.4f}")
    assert ok


def test_criterion_8_alpha_sweep(sweep):
    rows, seconds = sweep
    vis = {a: float(s.values(VIS_METRIC).mean()) for a, s in rows.items()}
    hfr = {a: float(s.values(HFR).mean()) for a, s in rows.items()}
    lo = min(rows)
    ok = vis[0.2] > vis[1.0] and hfr[lo] < hfr[0.2]
    record(8, ok, f"VIS acc alpha=0.2 {vis[0.2]:.4f} vs alpha=1 {vis[1.0]:.4f}; "
                  f"TAR@FAR=1% alpha={lo:g} {hfr[lo]:.4f} vs alpha=0.2 {hfr[0.2]:.4f}; "
                  f"sweep ({len(rows)} alphas x {N_SEEDS} seeds) {seconds:.0f}s")
    assert ok


def test_criterion_9_stability(study):
    res, seconds = study
    s = res.summaries
    sd = lambda r, k: float(per_seed(s[r], k).std(ddof=1))
    hfr_ok = sd("jfdal", HFR) <= sd("jt", HFR)
    vis_ok = sd("jfdal", VIS_METRIC) <= sd("ft", VIS_METRIC)
    dist = lambda r, k: np.round(per_seed(s[r], k), 4).tolist()
    record(9, hfr_ok and vis_ok,
           f"std TAR@FAR=1% JFDAL {sd('jfdal', HFR):.4f} vs JT {sd('jt', HFR):.4f}; "
           f"std VIS acc JFDAL {sd('jfdal', VIS_METRIC):.4f} vs FT {sd('ft', VIS_METRIC):.4f}"
           + ("" if hfr_ok and vis_ok else
              f"; distributions HFR JFDAL {dist('jfdal', HFR)} JT {dist('jt', HFR)}, "
              f"VIS JFDAL {dist('jfdal', VIS_METRIC)} FT {dist('ft', VIS_METRIC)}"),
           advisory=True)
