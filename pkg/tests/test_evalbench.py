"""Augmentation, signed-rank statistics, evaluation, and the benchmark."""

import csv
import dataclasses
import itertools
import os

import numpy as np
import pytest
from scipy import stats

from advsynth import config, dataio, evalbench as eb, mpc, scene, taskmodel

P, F, SIZE, DT = 3, 6, 32, 2.0


def micro_config(**overrides):
    base = dict(image_size=SIZE, n_obs=2, past_len=P, horizon=F, dt=DT,
                steps=1, n_train=8, n_test=6, n_ood=6, n_extra=8,
                task_epochs=3, task_pool=2, task_channels=(2, 3, 4),
                seed=0, outdir="ignored")
    base.update(overrides)
    return config.RunConfig(**base)


def make_records(seed, n):
    rng = np.random.default_rng(seed)
    return eb.generate_dataset(scene.TRAIN, n, rng, SIZE, P, F, dt=DT,
                               n_obs=2)


def tiny_model(seed=0):
    return taskmodel.init_taskmodel(
        np.random.default_rng(seed), image_size=SIZE, past_len=P,
        horizon=F, channels=(2, 3, 4), dt=DT)


# ---------------------------------------------------------------------------
# image augmentation

# Seeds chosen by enumerating the coin-flip pattern of default_rng(s):
# 4 draws no transform at all, 15 draws only the kernel-3 box blur.
SEED_NO_OPS = 4
SEED_BLUR3 = 15


def test_augment_identity_when_nothing_drawn():
    img = np.random.default_rng(1).uniform(0, 1, (16, 16)).astype(np.float32)
    out = eb.augment_image(img, np.random.default_rng(SEED_NO_OPS))
    assert np.array_equal(out, img)


def test_augment_blur_of_impulse_is_uniform_patch():
    img = np.zeros((9, 9), np.float32)
    img[4, 4] = 1.0
    out = eb.augment_image(img, np.random.default_rng(SEED_BLUR3))
    assert np.allclose(out[3:6, 3:6], 1.0 / 9.0, rtol=1e-6, atol=0)
    mask = np.ones((9, 9), bool)
    mask[3:6, 3:6] = False
    assert np.all(out[mask] == 0.0)


def test_augment_blur_keeps_constants():
    img = np.full((8, 8), 0.437, np.float32)
    out = eb.augment_image(img, np.random.default_rng(SEED_BLUR3))
    assert np.allclose(out, img, atol=1e-7)


def test_augment_range_and_shape_invariant():
    rng = np.random.default_rng(7)
    for _ in range(100):
        img = rng.uniform(0, 1, (11, 13)).astype(np.float32)
        out = eb.augment_image(img, rng)
        assert out.shape == img.shape
        assert out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


def brute_force_p(x, y):
    """Two-sided p by enumerating every sign pattern of the ranks."""
    d = np.asarray(x, float) - np.asarray(y, float)
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = stats.rankdata(np.abs(d))
    w_obs = min(ranks[d > 0].sum(), ranks[d < 0].sum())
    hits = 0
    for signs in itertools.product((1.0, -1.0), repeat=n):
        w_plus = sum(r for s, r in zip(signs, ranks) if s > 0)
        if w_plus <= w_obs + 1e-9:
            hits += 1
    return min(1.0, 2.0 * hits / 2.0 ** n)


def test_wilcoxon_all_positive_six():
    p = eb.wilcoxon_signed_rank([1, 2, 3, 4, 5, 6], [0, 0, 0, 0, 0, 0])
    assert p == 2.0 / 64.0


def test_wilcoxon_symmetry_and_identity():
    x = [1.0, 2.5, -3.0, 4.0, 0.5, 7.0]
    y = [0.0, 3.0, -1.0, 1.0, 0.25, 2.0]
    assert eb.wilcoxon_signed_rank(x, y) == eb.wilcoxon_signed_rank(y, x)
    assert eb.wilcoxon_signed_rank(x, x) == 1.0


def test_wilcoxon_errors():
    with pytest.raises(eb.EvalError, match="length"):
        eb.wilcoxon_signed_rank([1, 2, 3, 4, 5], [1, 2, 3, 4])
    with pytest.raises(eb.EvalError, match="5 pairs"):
        eb.wilcoxon_signed_rank([1, 2], [3, 4])


def test_wilcoxon_exact_equals_enumeration():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(100):
        n = int(rng.integers(5, 11))
        x = rng.integers(-5, 6, n).astype(float)
        y = rng.integers(-5, 6, n).astype(float)
        assert eb.wilcoxon_signed_rank(x, y) == brute_force_p(x, y)
        checked += 1
    assert checked == 100


def test_wilcoxon_exact_matches_scipy_without_ties():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.normal(size=12)
        y = rng.normal(size=12)
        ref = stats.wilcoxon(x, y, alternative="two-sided",
                             method="exact").pvalue
        assert eb.wilcoxon_signed_rank(x, y) == pytest.approx(ref,
                                                              abs=1e-12)


def test_wilcoxon_normal_branch():
    rng = np.random.default_rng(5)
    x = rng.normal(size=60) + 1.0
    y = rng.normal(size=60)
    p = eb.wilcoxon_signed_rank(x, y)
    ref = stats.wilcoxon(x, y, alternative="two-sided", method="approx",
                         correction=True).pvalue
    assert p == pytest.approx(ref, abs=1e-8)
    assert p < 0.05


# ---------------------------------------------------------------------------
# model evaluation


def test_evaluate_matches_per_record_recomputation():
    recs = make_records(3, 6)
    tm = tiny_model()
    cfg = mpc.MpcConfig(dt=DT)
    ev = eb.evaluate_model(tm, recs, cfg)
    assert ev.failures == []
    assert len(ev.rows) == 6
    assert 0 <= ev.collision_count <= 6
    assert ev.mean_cost >= 0.0

    preds = taskmodel.predict_batch(tm, np.stack([r.image for r in recs]),
                                    np.stack([r.w_past for r in recs]))
    for row, rec, pred in zip(ev.rows, recs, preds):
        prob = mpc.build_toy_problem(rec.scenario, np.asarray(pred, float),
                                     cfg)
        cost, sol, used_fallback = mpc.solve_with_fallback(prob)
        assert row.cost == pytest.approx(cost, rel=1e-12)
        assert row.mse == taskmodel.waypoint_mse(pred, rec.w_future)
        assert row.collision == scene.check_collisions(sol.states,
                                                       rec.scenario)
        assert row.used_fallback == used_fallback
    assert ev.mean_cost == pytest.approx(
        np.mean([r.cost for r in ev.rows]), abs=1e-7)
    assert ev.mean_mse == pytest.approx(
        np.mean([r.mse for r in ev.rows]), abs=1e-7)
    assert ev.collision_count == sum(r.collision for r in ev.rows)


def test_evaluate_vae_mode_leaves_collisions_undefined():
    recs = make_records(3, 5)
    ev = eb.evaluate_model(tiny_model(), recs, mpc.MpcConfig(dt=DT),
                           mode=scene.VAE)
    assert ev.collision_count is None
    assert all(r.collision is None for r in ev.rows)


def test_evaluate_records_unsolvable_predictions_as_failures():
    recs = make_records(3, 6)
    # a past history moving at 20 m/s puts the predicted current state
    # outside the speed box, so even the relaxed tracking QP has no
    # feasible point
    base = recs[0]
    w_p = np.asarray(base.w_past, float).copy()
    w_p[:, 2] = 20.0
    bad = dataio.DataRecord(image=base.image, latent=base.latent,
                            w_past=w_p, w_future=base.w_future,
                            scenario=base.scenario)
    ev = eb.evaluate_model(tiny_model(), recs + [bad], mpc.MpcConfig(dt=DT))
    assert [i for i, _ in ev.failures] == [6]
    assert len(ev.rows) == 6
    assert ev.n_records == 7


def test_evaluate_input_errors():
    with pytest.raises(eb.EvalError, match="empty"):
        eb.evaluate_model(tiny_model(), [], mpc.MpcConfig(dt=DT))
    recs = make_records(3, 1)
    with pytest.raises(eb.EvalError, match="mode"):
        eb.evaluate_model(tiny_model(), recs, mpc.MpcConfig(dt=DT),
                          mode="holographic")
    bare = dataio.DataRecord(image=recs[0].image, latent=recs[0].latent,
                             w_past=recs[0].w_past,
                             w_future=recs[0].w_future)
    with pytest.raises(eb.EvalError, match="scenario"):
        eb.evaluate_model(tiny_model(), [bare], mpc.MpcConfig(dt=DT))


def test_generate_dataset_deterministic():
    a = make_records(11, 4)
    b = make_records(11, 4)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.image, rb.image)
        assert np.array_equal(ra.latent.values, rb.latent.values)
        assert np.array_equal(ra.w_future, rb.w_future)
        assert ra.image.shape == (SIZE, SIZE)


# ---------------------------------------------------------------------------
# the benchmark


def read_report(path):
    rows = {}
    with open(path) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    for rec in csv.DictReader(lines):
        rows[rec["id"]] = rec
    return rows


def read_summary(path):
    with open(path) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    return {(r["scheme"], r["split"]): r for r in csv.DictReader(lines)}


def test_run_benchmark_micro(tmp_path):
    cfg = micro_config()
    out1 = tmp_path / "a"
    reports = eb.run_benchmark(cfg, outdir=str(out1))
    assert set(reports) == set(eb.SCHEMES)
    for scheme in eb.SCHEMES:
        for split in eb.SPLITS:
            ev = reports[scheme].splits[split]
            assert ev.n_records == 6
            assert ev.collision_count <= 6
            assert ev.mean_cost >= 0.0
        # every non-baseline scheme carries p-values against the baseline
        if scheme != eb.ORIGINAL:
            p = reports[scheme].wilcoxon_p[eb.ORIGINAL]["adv"]["cost"]
            assert p is None or 0.0 <= p <= 1.0

    names = sorted(os.listdir(out1))
    assert names == ["latents.csv", "report_data_added.csv",
                     "report_data_augment.csv", "report_original.csv",
                     "report_task_driven.csv", "summary.csv"]

    # summary aggregates must equal recomputation from the per-record CSV
    summary = read_summary(out1 / "summary.csv")
    for scheme in eb.SCHEMES:
        per_record = read_report(out1 / ("report_%s.csv" % scheme))
        for split in eb.SPLITS:
            rows = [r for rid, r in per_record.items()
                    if rid.startswith(split + "-") and r["cost"] != ""]
            agg = summary[(scheme, split)]
            assert float(agg["mean_cost"]) == pytest.approx(
                np.mean([float(r["cost"]) for r in rows]), abs=1e-7)
            assert float(agg["mean_mse"]) == pytest.approx(
                np.mean([float(r["mse"]) for r in rows]), abs=1e-7)
            assert int(agg["collision_count"]) == \
                sum(int(r["collision"]) for r in rows)
            assert int(agg["n_records"]) == 6

    # rerun under the same seed: byte-identical artifacts
    out2 = tmp_path / "b"
    eb.run_benchmark(cfg, outdir=str(out2))
    for name in names:
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_run_benchmark_vae_micro(tmp_path):
    cfg = micro_config(mode="vae", latent_dim=8, vae_epochs=2,
                       task_epochs=2)
    reports = eb.run_benchmark(cfg, outdir=str(tmp_path))
    for scheme in eb.SCHEMES:
        for split in eb.SPLITS:
            assert reports[scheme].splits[split].collision_count is None
    summary = read_summary(tmp_path / "summary.csv")
    assert summary[(eb.TASK_DRIVEN, "adv")]["collision_count"] == ""
    lat = list(csv.reader(open(tmp_path / "latents.csv")))
    assert len(lat[0]) == 2 + 8
    # train/added/augment/adv_train pools plus the three test splits
    assert len(lat) - 1 == 8 * 4 + 6 * 3


def test_run_benchmark_stage_error_names_the_stage(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("synthetic fault")

    monkeypatch.setattr(eb, "generate_dataset", boom)
    with pytest.raises(eb.EvalError, match="generate-train"):
        eb.run_benchmark(micro_config(), outdir=str(tmp_path))


def test_run_benchmark_seed_override(tmp_path):
    cfg = micro_config(task_epochs=1)
    r5 = eb.run_benchmark(cfg, seed=5, outdir=str(tmp_path / "x"))
    r5b = eb.run_benchmark(dataclasses.replace(cfg, seed=5),
                           outdir=str(tmp_path / "y"))
    a = r5[eb.ORIGINAL].splits["orig"].mean_cost
    b = r5b[eb.ORIGINAL].splits["orig"].mean_cost
    assert a == b
