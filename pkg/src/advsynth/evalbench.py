"""Dataset schemes, metrics, the signed-rank test, and the benchmark.

Four training schemes are compared: the original dataset alone, the
same data plus fresh same-distribution records, plus image-augmented
copies, and plus adversarially perturbed copies.  Every scheme retrains
from the same initialization seed, so score differences are
attributable to the data and nothing else.  Evaluation covers three
test splits: in-distribution, out-of-distribution (bigger obstacles,
closer to the corridor), and adversarial (perturbed in-distribution
test records).

Collision counts on the adversarial split are checked against the
perturbed scene geometry recovered from each record's stored scenario
block; in learned-renderer mode no geometry exists and collisions are
reported as undefined rather than zero.
"""

import csv
import dataclasses
import logging
import math
import os

import numpy as np
from scipy import ndimage, stats

from . import adversary, dataio, mpc, scene, taskmodel, vae

log = logging.getLogger(__name__)

ORIGINAL = "original"
DATA_ADDED = "data_added"
DATA_AUGMENT = "data_augment"
TASK_DRIVEN = "task_driven"
SCHEMES = (ORIGINAL, DATA_ADDED, DATA_AUGMENT, TASK_DRIVEN)
SPLITS = ("orig", "ood", "adv")

# exact signed-rank null distribution up to this many nonzero pairs
EXACT_LIMIT = 20

# stage-stream namespace; per-record synthesis streams use small
# indexes, so stage-level generators live far away from them
STREAM_TRAIN = 1000000
STREAM_TEST = 1000001
STREAM_OOD = 1000002
STREAM_ADDED = 1000003
STREAM_AUGMENT = 1000004


class EvalError(Exception):
    pass


# ---------------------------------------------------------------------------
# task-agnostic image augmentation


def augment_image(image, rng):
    """Random contrast, brightness, and box blur, each at probability 0.5.

    Ranges are mild on purpose: obstacles must stay visible or the
    baseline degenerates into label noise.  Output is clamped to [0, 1]
    and keeps the input's dimensions.
    """
    out = np.asarray(image, np.float32).copy()
    if rng.random() < 0.5:
        c = rng.uniform(0.7, 1.3)
        m = out.mean()
        out = m + c * (out - m)
    if rng.random() < 0.5:
        out = out + rng.uniform(-0.15, 0.15)
    if rng.random() < 0.5:
        k = int(rng.choice((3, 5)))
        out = ndimage.uniform_filter(out, size=k, mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test


def _exact_two_sided(ranks, w):
    # Null distribution of W+ over all 2^n sign assignments, counted by
    # a subset-sum pass over doubled ranks (average ranks are at worst
    # half-integers, so doubling makes every sum an integer).  Counts
    # stay below 2^20 and are exact in float64.
    doubled = np.rint(2.0 * np.asarray(ranks)).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts += shifted
    thresh = int(math.floor(2.0 * w + 1e-9))
    cdf = float(counts[:thresh + 1].sum() / counts.sum())
    return min(1.0, 2.0 * cdf)


def wilcoxon_signed_rank(x, y):
    """Two-sided signed-rank p-value for paired samples.

    Zero differences are dropped.  Up to EXACT_LIMIT nonzero pairs the
    exact null distribution is enumerated; beyond that a normal
    approximation with tie and continuity corrections is used.  All
    differences zero gives p = 1 by convention.
    """
    a = np.asarray(x, float).reshape(-1)
    b = np.asarray(y, float).reshape(-1)
    if a.size != b.size:
        raise EvalError("paired samples differ in length: %d vs %d"
                        % (a.size, b.size))
    if a.size < 5:
        raise EvalError("need at least 5 pairs, got %d" % a.size)
    d = a - b
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(np.sum(ranks[d > 0]))
    w_minus = float(np.sum(ranks[d < 0]))
    w = min(w_plus, w_minus)
    if n <= EXACT_LIMIT:
        return _exact_two_sided(ranks, w)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    if var <= 0.0:
        return 1.0
    z = (w - mean + 0.5) / math.sqrt(var)
    p = 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0))
    return min(1.0, p)


# ---------------------------------------------------------------------------
# per-model evaluation


@dataclasses.dataclass
class RecordEval:
    index: int
    cost: float
    mse: float
    collision: int        # None in vae mode
    used_fallback: bool


@dataclasses.dataclass
class SplitEval:
    rows: list            # successful RecordEvals, input order
    failures: list        # (index, message) for records with no solve
    mean_cost: float
    mean_mse: float
    collision_count: int  # None in vae mode

    @property
    def n_records(self):
        return len(self.rows) + len(self.failures)


def evaluate_model(tm, records, config, mode=scene.ANALYTIC, tol=1e-6):
    """Predict, track, and score every record of one split.

    Per record: waypoint prediction, tracking solve (with the
    relaxed-problem fallback on infeasibility), squared waypoint error
    against the stored label, and, in analytic mode, a collision check
    of the planned state trace against the record's scenario geometry.
    Records whose tracking problem cannot be solved at all are listed
    in ``failures`` and excluded from the aggregates.
    """
    if not records:
        raise EvalError("cannot evaluate an empty split")
    if mode not in (scene.ANALYTIC, scene.VAE):
        raise EvalError("unknown renderer mode %r" % (mode,))
    images = np.stack([r.image for r in records])
    pasts = np.stack([r.w_past for r in records])
    preds = taskmodel.predict_batch(tm, images, pasts)

    rows, failures = [], []
    for i, (rec, pred) in enumerate(zip(records, preds)):
        if rec.scenario is None:
            raise EvalError("record %d has no scenario geometry" % i)
        try:
            problem = mpc.build_toy_problem(rec.scenario,
                                            np.asarray(pred, float), config)
            cost, sol, used_fallback = mpc.solve_with_fallback(problem,
                                                               tol=tol)
        except mpc.MpcError as err:
            failures.append((i, str(err)))
            continue
        mse = taskmodel.waypoint_mse(pred, rec.w_future)
        collision = None
        if mode == scene.ANALYTIC:
            collision = scene.check_collisions(sol.states, rec.scenario)
        rows.append(RecordEval(i, float(cost), mse, collision,
                               used_fallback))
    if not rows:
        raise EvalError("every record in the split failed to solve")
    mean_cost = float(np.mean([r.cost for r in rows]))
    mean_mse = float(np.mean([r.mse for r in rows]))
    collision_count = None
    if mode == scene.ANALYTIC:
        collision_count = int(sum(r.collision for r in rows))
    return SplitEval(rows, failures, mean_cost, mean_mse, collision_count)


@dataclasses.dataclass
class SchemeReport:
    scheme: str
    splits: dict          # split name -> SplitEval
    wilcoxon_p: dict      # other scheme -> split -> metric -> p (or None)


# ---------------------------------------------------------------------------
# dataset generation


def generate_dataset(dist, n, rng, image_size, past_len, horizon, dt=1.0,
                     n_obs=scene.N_OBS_DEFAULT):
    """Sample scenarios, plan labels, render, and pack records.

    Draws that fail planning (no collision-free lattice path) are
    redrawn; a generous retry budget guards against parameter sets
    where that never succeeds.
    """
    out = []
    budget = 50 * n + 200
    while len(out) < n:
        try:
            scn = scene.sample_scenario(dist, rng, n_obs=n_obs)
            w_p, w_f = scene.oracle_plan(scn, past_len, horizon, dt=dt)
        except scene.SceneError as err:
            budget -= 1
            if budget < 0:
                raise EvalError("scenario generation keeps failing (%s); "
                                "parameters look inconsistent" % err)
            continue
        lat = scene.latent_of(scn)
        out.append(dataio.DataRecord(image=scene.render_analytic(lat,
                                                                 image_size),
                                     latent=lat, w_past=w_p, w_future=w_f,
                                     scenario=scn))
    return out


# ---------------------------------------------------------------------------
# the benchmark


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as err:
        raise EvalError("stage %r failed: %s" % (name, err)) from err


def _train_scheme(records, cfg):
    images = np.stack([r.image for r in records])
    pasts = np.stack([r.w_past for r in records])
    labels = np.stack([r.w_future for r in records])
    return taskmodel.train(images, pasts, labels, epochs=cfg.task_epochs,
                           lr=cfg.task_lr, seed=cfg.seed,
                           pool=cfg.task_pool, channels=cfg.task_channels,
                           dt=cfg.dt)


def augmented_pool(train, n_extra, rng):
    out = []
    for i in range(n_extra):
        base = train[i % len(train)]
        out.append(dataio.DataRecord(image=augment_image(base.image, rng),
                                     latent=base.latent, w_past=base.w_past,
                                     w_future=base.w_future,
                                     scenario=base.scenario))
    return out


def encode_latents(vp, records):
    """Swap every record's latent for the encoder's mean code."""
    out = []
    for rec in records:
        mu, _ = vae.encode(vp, rec.image)
        out.append(dataio.DataRecord(
            image=rec.image, latent=scene.LatentScene(scene.VAE, mu),
            w_past=rec.w_past, w_future=rec.w_future, scenario=rec.scenario,
            adversarial=rec.adversarial, relabeled=rec.relabeled))
    return out


def _pairwise_wilcoxon(evals):
    """p-values per scheme pair, split, and metric over shared records."""
    table = {s: {o: {sp: {} for sp in SPLITS} for o in SCHEMES if o != s}
             for s in SCHEMES}
    for pos, a in enumerate(SCHEMES):
        for b in SCHEMES[pos + 1:]:
            for split in SPLITS:
                rows_a = {r.index: r for r in evals[a][split].rows}
                rows_b = {r.index: r for r in evals[b][split].rows}
                shared = sorted(set(rows_a) & set(rows_b))
                for metric in ("cost", "mse"):
                    if len(shared) < 5:
                        p = None
                    else:
                        xs = [getattr(rows_a[k], metric) for k in shared]
                        ys = [getattr(rows_b[k], metric) for k in shared]
                        p = wilcoxon_signed_rank(xs, ys)
                    table[a][b][split][metric] = p
                    table[b][a][split][metric] = p
    return table


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def _write_csv(path, header_comment, columns, rows):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write("# %s\n" % header_comment)
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(cell) for cell in row])


ADV_GEOMETRY_NOTE = ("adversarial-split collisions are checked against the "
                     "perturbed scene geometry stored with each record")


def _write_report(path, report):
    rows = []
    for split in SPLITS:
        ev = report.splits[split]
        for r in ev.rows:
            rows.append(("%s-%04d" % (split, r.index), r.cost, r.mse,
                         r.collision))
        for index, _msg in ev.failures:
            rows.append(("%s-%04d" % (split, index), None, None, None))
    _write_csv(path, ADV_GEOMETRY_NOTE, ("id", "cost", "mse", "collision"),
               rows)


def _write_summary(path, reports):
    rows = []
    for scheme in SCHEMES:
        rep = reports[scheme]
        for split in SPLITS:
            ev = rep.splits[split]
            if scheme == ORIGINAL:
                p_cost = p_mse = None
            else:
                p_cost = rep.wilcoxon_p[ORIGINAL][split]["cost"]
                p_mse = rep.wilcoxon_p[ORIGINAL][split]["mse"]
            rows.append((scheme, split, ev.n_records, len(ev.failures),
                         ev.collision_count, ev.mean_cost, ev.mean_mse,
                         p_cost, p_mse))
    _write_csv(path, ADV_GEOMETRY_NOTE,
               ("scheme", "split", "n_records", "n_failures",
                "collision_count", "mean_cost", "mean_mse",
                "wilcoxon_cost_vs_original", "wilcoxon_mse_vs_original"),
               rows)


def _write_latents(path, pools):
    width = max(len(r.latent.values) for recs in pools.values() for r in recs)
    columns = ["id", "split"] + ["nu_%d" % i for i in range(width)]
    rows = []
    for split, recs in pools.items():
        for i, rec in enumerate(recs):
            rows.append(["%s-%04d" % (split, i), split]
                        + [float(v) for v in rec.latent.values])
    _write_csv(path, None, columns, rows)


def run_benchmark(cfg, seed=None, outdir=None):
    """Full four-scheme protocol; returns {scheme: SchemeReport}.

    Generates the splits, trains the baseline model, builds the three
    augmented training pools, retrains, evaluates everything, and
    writes report_<scheme>.csv, summary.csv, and latents.csv under the
    output directory.  Deterministic for a given config and seed; any
    stage error aborts with the stage name, leaving partial artifacts
    in place.
    """
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    outdir = cfg.outdir if outdir is None else outdir
    os.makedirs(outdir, exist_ok=True)
    mpc_cfg = cfg.mpc_config()

    def gen(stream, dist, n):
        return generate_dataset(dist, n, np.random.default_rng(
            [cfg.seed, stream]), cfg.image_size, cfg.past_len, cfg.horizon,
            dt=cfg.dt, n_obs=cfg.n_obs)

    log.info("generating %d train / %d test / %d ood / %d added records",
             cfg.n_train, cfg.n_test, cfg.n_ood, cfg.n_extra)
    train = _stage("generate-train", gen, STREAM_TRAIN, scene.TRAIN,
                   cfg.n_train)
    test = _stage("generate-test", gen, STREAM_TEST, scene.TRAIN, cfg.n_test)
    ood = _stage("generate-ood", gen, STREAM_OOD, scene.OOD, cfg.n_ood)
    added = _stage("generate-added", gen, STREAM_ADDED, scene.TRAIN,
                   cfg.n_extra)

    vp = None
    if cfg.mode == scene.VAE:
        log.info("training the renderer on %d images", len(train))
        vp = _stage("train-vae", vae.train_vae,
                    np.stack([r.image for r in train]), cfg.vae_epochs,
                    lr=cfg.vae_lr, seed=cfg.seed, image_size=cfg.image_size,
                    latent_dim=cfg.latent_dim)
        train = _stage("encode-latents", encode_latents, vp, train)
        test = _stage("encode-latents", encode_latents, vp, test)
        ood = _stage("encode-latents", encode_latents, vp, ood)
        added = _stage("encode-latents", encode_latents, vp, added)

    log.info("training the baseline scheme")
    tm_original = _stage("train-original", _train_scheme, train, cfg)

    log.info("synthesizing %d + %d adversarial records", cfg.n_extra,
             cfg.n_test)
    adv_pool = [train[i % len(train)] for i in range(cfg.n_extra)]
    adv_train, train_failures = _stage(
        "synth-adv-train", adversary.synth_adversarial_dataset, adv_pool,
        tm_original, mpc_cfg, kappa=cfg.kappa, steps=cfg.steps,
        step_size=cfg.adv_step_size, grad_clip=cfg.adv_grad_clip,
        seed=cfg.seed, vp=vp, relabel=cfg.relabel)
    adv_test, test_failures = _stage(
        "synth-adv-test", adversary.synth_adversarial_dataset, test,
        tm_original, mpc_cfg, kappa=cfg.kappa, steps=cfg.steps,
        step_size=cfg.adv_step_size, grad_clip=cfg.adv_grad_clip,
        seed=cfg.seed, vp=vp, relabel=cfg.relabel, index_base=cfg.n_extra)
    for index, err in train_failures + test_failures:
        log.warning("adversarial record %d dropped: %s", index, err)
    adv_train_records = [a.as_record() for a in adv_train]
    adv_test_records = [a.as_record() for a in adv_test]

    augmented = _stage("augment", augmented_pool, train, cfg.n_extra,
                       np.random.default_rng([cfg.seed, STREAM_AUGMENT]))

    pools = {ORIGINAL: train,
             DATA_ADDED: train + added,
             DATA_AUGMENT: train + augmented,
             TASK_DRIVEN: train + adv_train_records}
    models = {ORIGINAL: tm_original}
    for scheme in (DATA_ADDED, DATA_AUGMENT, TASK_DRIVEN):
        log.info("training the %s scheme on %d records", scheme,
                 len(pools[scheme]))
        models[scheme] = _stage("train-%s" % scheme, _train_scheme,
                                pools[scheme], cfg)

    splits = {"orig": test, "ood": ood, "adv": adv_test_records}
    evals = {}
    for scheme in SCHEMES:
        evals[scheme] = {}
        for split, records in splits.items():
            log.info("evaluating %s on %s", scheme, split)
            evals[scheme][split] = _stage(
                "eval-%s-%s" % (scheme, split), evaluate_model,
                models[scheme], records, mpc_cfg, mode=cfg.mode)

    p_table = _stage("wilcoxon", _pairwise_wilcoxon, evals)
    reports = {s: SchemeReport(s, evals[s], p_table[s]) for s in SCHEMES}

    latent_pools = {"train": train, "added": added, "augment": augmented,
                    "adv_train": adv_train_records, "orig": test, "ood": ood,
                    "adv": adv_test_records}
    for scheme in SCHEMES:
        _stage("report-%s" % scheme, _write_report,
               os.path.join(outdir, "report_%s.csv" % scheme),
               reports[scheme])
    _stage("report-summary", _write_summary,
           os.path.join(outdir, "summary.csv"), reports)
    _stage("report-latents", _write_latents,
           os.path.join(outdir, "latents.csv"), latent_pools)

    for scheme in SCHEMES:
        ev = evals[scheme]
        log.info("%s: collisions orig/ood/adv = %s/%s/%s, "
                 "mean cost adv = %.3f", scheme,
                 ev["orig"].collision_count, ev["ood"].collision_count,
                 ev["adv"].collision_count, ev["adv"].mean_cost)
    return reports
