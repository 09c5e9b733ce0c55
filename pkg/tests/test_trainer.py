import json

import numpy as np
import pytest

from jfdal.embedder import embed, freeze_guidance
from jfdal.eval import evaluate
from jfdal.losses import domain_alignment_loss
from jfdal import diffcore as dc
from jfdal.synthdata import HFR, Dataset, generate, sample_hfr_batch
from jfdal.trainer import (
    NonFiniteGradient,
    TrainConfig,
    TrainingDiverged,
    iter_batches,
    pool_datasets,
    pretrain_vis,
    sgd_step,
    train_ft,
    train_jfdal,
    train_jt,
)

ARCH = dict(hidden_dims=(16,), embed_dim=8)


def fast_pre(seed=0, **kw):
    base = dict(seed=seed, N=24, epochs=8, lr_milestones=(5, 7), **ARCH)
    base.update(kw)
    return TrainConfig.pretrain_defaults(**base)


def fast_ft(seed=0, **kw):
    base = dict(seed=seed, N=16, N_prime=16, hfr_k=2, lr=0.02, epochs=17, **ARCH)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def pretrained(tiny_data):
    return pretrain_vis(tiny_data.large_vis, fast_pre())


# -- config -----------------------------------------------------------------


def test_config_defaults():
    c = TrainConfig()
    assert (c.alpha, c.lam, c.N, c.N_prime, c.momentum, c.weight_decay, c.epochs) == (0.2, 0.01, 128, 128, 0.9, 5e-4, 100)
    assert (c.margin.m, c.margin.s) == (0.45, 32.0)
    assert c.head_init == "mean_embedding" and c.jitter_sigma == 0.0


def test_pretrain_schedule():
    c = TrainConfig.pretrain_defaults()
    assert c.lr == 0.1 and c.epochs == 16 and c.lr_milestones == (9, 14)
    assert [round(c.lr_at(e), 6) for e in (0, 8, 9, 13, 14, 15)] == [0.1, 0.1, 0.01, 0.01, 0.001, 0.001]


@pytest.mark.parametrize("kw", [{"alpha": 1.5}, {"lam": -1}, {"lr": 0}, {"momentum": 1.0}, {"head_init": "zeros"}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_config_dict_round_trip():
    c = fast_ft(alpha=0.4)
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"alpah": 0.1})


# -- sgd --------------------------------------------------------------------


def test_sgd_zero_grad_no_decay_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    new, _ = sgd_step(p, {"w": np.zeros(2)}, 0.1, 0.9, 0.0)
    np.testing.assert_array_equal(new["w"], p["w"])


def test_sgd_plain_gradient_descent():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, 0.25])}
    new, _ = sgd_step(p, g, 0.1, 0.0, 0.0)
    np.testing.assert_allclose(new["w"], [0.95, -2.025], rtol=1e-15)


def test_sgd_two_momentum_steps():
    g = np.array([0.3, -1.2])
    p = {"w": np.array([2.0, 1.0])}
    lr = 0.05
    p1, v = sgd_step(p, {"w": g}, lr, 0.9, 0.0)
    p2, _ = sgd_step(p1, {"w": g}, lr, 0.9, 0.0, v)
    np.testing.assert_allclose(p["w"] - p2["w"], lr * (g + 1.9 * g), rtol=1e-12)


def test_sgd_weight_decay_term():
    p = {"w": np.array([2.0])}
    new, v = sgd_step(p, {"w": np.array([0.0])}, 0.1, 0.9, 5e-4)
    np.testing.assert_allclose(v["w"], [1e-3])
    np.testing.assert_allclose(new["w"], [2.0 - 1e-4])


def test_sgd_does_not_mutate_inputs():
    p = {"w": np.ones(3)}
    g = {"w": np.ones(3)}
    sgd_step(p, g, 0.1, 0.9, 0.1)
    np.testing.assert_array_equal(p["w"], 1.0)


def test_sgd_rejects_non_finite():
    with pytest.raises(NonFiniteGradient):
        sgd_step({"w": np.ones(2)}, {"w": np.array([1.0, np.nan])}, 0.1, 0.9, 0.0)


# -- pretraining and joint training -----------------------------------------


def test_pretrain_reduces_loss(pretrained):
    steps = pretrained.log.steps
    first = np.mean([r["l_tot"] for r in steps[:5]])
    last = np.mean([r["l_tot"] for r in steps[-5:]])
    assert last < first


def test_pretrain_beats_random_on_vis_pairs(tiny_data, pretrained):
    from jfdal.embedder import init_params

    rand = init_params(pretrained.params.config, 123)
    assert evaluate(pretrained.params, tiny_data, folds=5).pair_accuracy > evaluate(rand, tiny_data, folds=5).pair_accuracy


def test_pretrain_reproducible(tiny_data, pretrained):
    again = pretrain_vis(tiny_data.large_vis, fast_pre())
    assert again.params.equal(pretrained.params)
    assert again.guidance.guidance and again.guidance.equal(freeze_guidance(again.params))


def test_pretrain_divergence_aborts(tiny_data, monkeypatch):
    import jfdal.trainer as tr

    real = tr.margin_softmax_loss
    calls = {"n": 0}
    seen = []

    def flaky(*args, **kw):
        out = real(*args, **kw)
        calls["n"] += 1
        return dc.scale(out, np.nan) if calls["n"] == 4 else out

    monkeypatch.setattr(tr, "margin_softmax_loss", flaky)
    with pytest.raises(TrainingDiverged) as exc:
        pretrain_vis(tiny_data.large_vis, fast_pre(), on_step=lambda step, p: seen.append(p))
    assert exc.value.step == 3
    assert exc.value.params.equal(seen[-1])
    assert all(np.all(np.isfinite(a)) for a in exc.value.params.arrays.values())


def test_jt_head_covers_union(tiny_data, tiny_spec):
    res = train_jt(tiny_data.large_vis, tiny_data.hfr_train, fast_pre(epochs=1))
    assert res.params.config.num_classes == tiny_spec.n_vis_ids + tiny_spec.n_hfr_ids


def test_jt_hfr_fraction_per_batch():
    from jfdal.synthdata import GenSpec

    d = generate(GenSpec(n_vis_test_pairs=10, n_vis_test_ids=5, vis_test_per_id=2))
    pooled = pool_datasets(d.large_vis, d.hfr_train)
    is_hfr = np.r_[np.zeros(len(d.large_vis), bool), np.ones(len(d.hfr_train), bool)]
    N = TrainConfig().N
    rng = np.random.default_rng(0)
    fracs = []
    while len(fracs) < 1000:
        fracs.extend(is_hfr[idx].mean() for idx in iter_batches(len(pooled), N, rng))
    fracs = np.array(fracs[:1000])
    p = len(d.hfr_train) / len(pooled)
    assert abs(fracs.mean() - p) <= 3 * np.sqrt(p * (1 - p) / N / 1000)


def test_iter_batches_is_a_partition():
    idx = np.concatenate(list(iter_batches(10, 3, np.random.default_rng(0))))
    assert idx.size == 9 and np.unique(idx).size == 9


# -- fine-tuning regimes ----------------------------------------------------


def _trajectory(fn):
    traj = []
    res = fn(lambda step, p: traj.append({k: v.tobytes() for k, v in p.arrays.items()}))
    return res, traj


def test_alpha_one_matches_ft_bit_for_bit(tiny_data, pretrained):
    cfg = fast_ft(alpha=1.0)
    jf, tj = _trajectory(lambda cb: train_jfdal(tiny_data.hfr_train, tiny_data.large_vis, pretrained.guidance, cfg, cb))
    ft, tf = _trajectory(lambda cb: train_ft(tiny_data.hfr_train, pretrained.guidance, cfg, cb))
    assert len(tj) >= 50 and len(tj) == len(tf)
    assert tj == tf
    assert jf.params.equal(ft.params)
    # the VIS branch really ran under JFDAL
    assert any(r["l_sfdal"] > 0 for r in jf.log.steps) and all(r["l_sfdal"] == 0 for r in ft.log.steps)


def test_alpha_below_one_differs_from_ft(tiny_data, pretrained):
    cfg = fast_ft(epochs=2)
    jf = train_jfdal(tiny_data.hfr_train, tiny_data.large_vis, pretrained.guidance, cfg)
    ft = train_ft(tiny_data.hfr_train, pretrained.guidance, cfg)
    assert not jf.params.equal(ft.params)


def test_sfdal_zero_at_first_step(tiny_data, pretrained):
    res = train_jfdal(tiny_data.hfr_train, tiny_data.large_vis, pretrained.guidance, fast_ft(epochs=1))
    assert res.log.steps[0]["l_sfdal"] == 0.0


def test_guidance_untouched_by_every_regime(tiny_data, pretrained):
    g = pretrained.guidance
    snapshot = {k: v.tobytes() for k, v in g.arrays.items()}
    probe = tiny_data.hfr_test.obs[:10]
    before = embed(probe, g)
    train_jfdal(tiny_data.hfr_train, tiny_data.large_vis, g, fast_ft(epochs=4))
    train_ft(tiny_data.hfr_train, g, fast_ft(epochs=4))
    assert {k: v.tobytes() for k, v in g.arrays.items()} == snapshot
    assert embed(probe, g).tobytes() == before.tobytes()


def test_ft_reproducible(tiny_data, pretrained):
    a = train_ft(tiny_data.hfr_train, pretrained.guidance, fast_ft(epochs=3))
    b = train_ft(tiny_data.hfr_train, pretrained.guidance, fast_ft(epochs=3))
    assert a.params.equal(b.params) and a.log.to_jsonl() == b.log.to_jsonl()


def test_head_rebuilt_over_hfr_identities(tiny_data, pretrained, tiny_spec):
    res = train_ft(tiny_data.hfr_train, pretrained.guidance, fast_ft(epochs=1))
    assert res.params.config.num_classes == tiny_spec.n_hfr_ids
    rnd = train_ft(tiny_data.hfr_train, pretrained.guidance, fast_ft(epochs=1, head_init="random"))
    assert rnd.params.config.num_classes == tiny_spec.n_hfr_ids
    assert not rnd.params.equal(res.params)


def test_log_records(tiny_data, pretrained, tmp_path):
    res = train_jfdal(tiny_data.hfr_train, tiny_data.large_vis, pretrained.guidance, fast_ft(epochs=2))
    assert len(res.log.steps) == 2 * 3 and len(res.log.epochs) == 2
    res.log.write(tmp_path / "log.jsonl")
    rows = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert {"step", "l_cls", "l_dom", "l_cfdal", "l_sfdal", "l_tot", "lr"} <= set(rows[0])
    for r in rows:
        assert r["l_cfdal"] == r["l_cls"] + 0.01 * r["l_dom"]
        assert r["l_tot"] == pytest.approx(0.2 * r["l_cfdal"] + 0.8 * r["l_sfdal"], rel=1e-12)
        assert all(np.isfinite(v) for k, v in r.items() if k.startswith("l_"))


def test_epoch_callback_snapshots(tiny_data, pretrained):
    res = train_ft(tiny_data.hfr_train, pretrained.guidance, fast_ft(epochs=2),
                   on_epoch=lambda e, p: {"probe_norm": float(np.linalg.norm(embed(tiny_data.hfr_test.obs[:4], p)))})
    assert all("probe_norm" in s and "seconds" in s for s in res.log.epochs)


@pytest.mark.parametrize("seed", range(5))
def test_jfdal_reduces_domain_gap_on_held_out_batch(tiny_data, pretrained, seed):
    probe = sample_hfr_batch(tiny_data.hfr_test, 16, np.random.default_rng(100 + seed), k=2)

    def l_dom(params):
        return domain_alignment_loss(dc.Tensor(embed(probe.obs, params)), probe.ids, probe.domains).loss.item()

    res = train_jfdal(tiny_data.hfr_train, tiny_data.large_vis, pretrained.guidance, fast_ft(seed=seed, lam=1.0))
    assert l_dom(res.params) < l_dom(pretrained.guidance)


@pytest.mark.parametrize("seed", range(5))
def test_ft_drifts_more_than_jfdal(tiny_data, pretrained, seed):
    probe = tiny_data.vis_test_pairs.a.obs
    ref = embed(probe, pretrained.guidance)

    def drift(params):
        return float(np.linalg.norm(embed(probe, params) - ref, axis=1).mean())

    ft = train_ft(tiny_data.hfr_train, pretrained.guidance, fast_ft(seed=seed))
    jf = train_jfdal(tiny_data.hfr_train, tiny_data.large_vis, pretrained.guidance, fast_ft(seed=seed))
    assert drift(ft.params) > drift(jf.params)
