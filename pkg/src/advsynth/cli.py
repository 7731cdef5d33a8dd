"""Command surface tying the pipeline together, stage by stage.

Every command reads one TOML config and writes under the config's
output directory unless an explicit path is given; ``--seed`` and
``--outdir`` override the config without editing it.  Scenario
generation is always geometric, so ``gen-scenarios`` emits analytic
latents even under a learned-renderer config; ``synth-adv --vae``
swaps in encoder codes right before the attack, which mirrors how the
full benchmark wires its stages.

Exit codes: 0 success, 1 usage problem, 2 broken or mismatched data,
3 numeric failure (diverged training, unsolvable problem, red
selftest).
"""

import argparse
import csv
import dataclasses
import itertools
import logging
import os
import sys
import tempfile
import time

import numpy as np
from scipy import stats

from advsynth import (adversary, config, dataio, evalbench, figures, mpc,
                      nn, ref64, scene, taskmodel, vae)
from advsynth import tensor as T

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

SPLIT_STREAMS = {"train": evalbench.STREAM_TRAIN,
                 "test": evalbench.STREAM_TEST,
                 "ood": evalbench.STREAM_OOD}
SPLIT_DISTS = {"train": scene.TRAIN, "test": scene.TRAIN, "ood": scene.OOD}


class CliError(Exception):
    """Bad flag combination discovered after parsing."""


# ---------------------------------------------------------------------------
# shared plumbing


def _load_cfg(args):
    cfg = config.load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(args.seed))
    if args.outdir is not None:
        cfg = dataclasses.replace(cfg, outdir=args.outdir)
    return cfg


def _outpath(cfg, explicit, default_name):
    path = explicit if explicit else os.path.join(cfg.outdir, default_name)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return path


def _read_records(path, allow_empty=False):
    records, meta = dataio.read_dataset(path)
    if not records and not allow_empty:
        raise dataio.DataError("dataset %s is empty" % path)
    return records, meta


def _read_training_union(cfg, paths):
    """Concatenate datasets that agree on the geometry the model sees.

    Renderer modes and latent widths may differ across the inputs (an
    analytic base pool plus learned-code adversarial records is the
    normal vae-mode union); image size and waypoint shapes may not.
    """
    records = []
    for path in paths:
        recs, meta = _read_records(path, allow_empty=True)
        if (meta.image_size != cfg.image_size
                or meta.past_len != cfg.past_len
                or meta.horizon != cfg.horizon):
            raise dataio.DataError(
                "%s holds %dpx P=%d F=%d records, the config wants "
                "%dpx P=%d F=%d" % (path, meta.image_size, meta.past_len,
                                    meta.horizon, cfg.image_size,
                                    cfg.past_len, cfg.horizon))
        records.extend(recs)
    if not records:
        raise dataio.DataError("no records in %s" % ", ".join(paths))
    return records


def _template_taskmodel(cfg):
    return taskmodel.init_taskmodel(
        np.random.default_rng([cfg.seed, 0]), cfg.image_size, cfg.past_len,
        cfg.horizon, pool=cfg.task_pool, channels=cfg.task_channels,
        dt=cfg.dt)


def _template_vae(cfg):
    return vae.init_vae(np.random.default_rng([cfg.seed, 0]),
                        image_size=cfg.image_size,
                        latent_dim=cfg.latent_dim)


def _fit_params(template, loaded, path):
    """Install checkpoint tensors after checking names and shapes."""
    missing = sorted(set(template) - set(loaded))
    extra = sorted(set(loaded) - set(template))
    if missing or extra:
        raise T.CheckpointError(
            "%s does not fit the configured model: missing %s, "
            "unexpected %s" % (path, missing or "none", extra or "none"))
    for name, arr in loaded.items():
        if arr.shape != template[name].shape:
            raise T.CheckpointError(
                "%s: tensor %r has shape %r, the configured model "
                "needs %r" % (path, name, arr.shape, template[name].shape))
    return dict(loaded)


def _load_taskmodel(cfg, path):
    tm = _template_taskmodel(cfg)
    tm.params = _fit_params(tm.params, nn.load_params(path), path)
    return tm


def _load_vae(cfg, path):
    vp = _template_vae(cfg)
    vp.params = _fit_params(vp.params, nn.load_params(path), path)
    return vp


def _cell(value):
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return "%.6g" % value
    return str(value)


def _print_table(header, rows):
    cells = [list(header)] + [[_cell(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    for row in cells:
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(c)) if isinstance(c, float) else c
                             for c in row])


# ---------------------------------------------------------------------------
# commands


def _cmd_gen_scenarios(args):
    cfg = _load_cfg(args)
    sizes = {"train": cfg.n_train, "test": cfg.n_test, "ood": cfg.n_ood}
    count = sizes[args.split] if args.count is None else args.count
    if count < 0:
        raise CliError("--count must be >= 0, got %d" % count)
    rng = np.random.default_rng([cfg.seed, SPLIT_STREAMS[args.split]])
    records = []
    if count:
        records = evalbench.generate_dataset(
            SPLIT_DISTS[args.split], count, rng, cfg.image_size,
            cfg.past_len, cfg.horizon, dt=cfg.dt, n_obs=cfg.n_obs)
    out = _outpath(cfg, args.out, args.split + ".advd")
    meta = dataio.write_dataset(out, records, mode=scene.ANALYTIC,
                                image_size=cfg.image_size,
                                past_len=cfg.past_len, horizon=cfg.horizon,
                                latent_dim=2 + 4 * cfg.n_obs)
    log.info("wrote %d %s records to %s", meta.count, args.split, out)
    return EXIT_OK


def _cmd_train_vae(args):
    cfg = _load_cfg(args)
    records, meta = _read_records(args.data)
    if meta.image_size != cfg.image_size:
        raise dataio.DataError(
            "%s holds %dpx images, the config wants %dpx; the checkpoint "
            "could never be reloaded" % (args.data, meta.image_size,
                                         cfg.image_size))
    images = np.stack([r.image for r in records])
    log.info("training the renderer on %d images for %d epochs",
             len(records), cfg.vae_epochs)
    vp = vae.train_vae(images, cfg.vae_epochs, lr=cfg.vae_lr, seed=cfg.seed,
                       image_size=cfg.image_size, latent_dim=cfg.latent_dim)
    out = _outpath(cfg, args.out, "vae.advw")
    nn.save_params(out, vp.params)
    mse = vae.reconstruction_mse(vp, images)
    log.info("reconstruction mse %.6f on the training images; saved %s",
             mse, out)
    return EXIT_OK


def _cmd_train_task(args):
    cfg = _load_cfg(args)
    records = _read_training_union(cfg, args.data)
    images = np.stack([r.image for r in records])
    pasts = np.stack([r.w_past for r in records])
    labels = np.stack([r.w_future for r in records])
    log.info("training the task model on %d records for %d epochs",
             len(records), cfg.task_epochs)
    tm = taskmodel.train(images, pasts, labels, epochs=cfg.task_epochs,
                         lr=cfg.task_lr, seed=cfg.seed, pool=cfg.task_pool,
                         channels=cfg.task_channels, dt=cfg.dt)
    out = _outpath(cfg, args.out, args.default_out)
    nn.save_params(out, tm.params)
    val = tm.val_trace[-1] if tm.val_trace else float("nan")
    log.info("final holdout loss %.6f; saved %s", val, out)
    return EXIT_OK


def _cmd_synth_adv(args):
    cfg = _load_cfg(args)
    if cfg.mode == scene.VAE and args.vae is None:
        raise CliError("mode \"vae\" needs --vae so scenes can be "
                       "encoded and decoded")
    if cfg.mode != scene.VAE and args.vae is not None:
        raise CliError("--vae only applies when the config sets "
                       "mode = \"vae\"")
    records, meta = _read_records(args.data)
    if meta.mode == scene.VAE and cfg.mode != scene.VAE:
        raise dataio.DataError(
            "%s holds learned codes; the config must set mode = \"vae\""
            % args.data)
    tm = _load_taskmodel(cfg, args.model)
    vp = None
    if cfg.mode == scene.VAE:
        vp = _load_vae(cfg, args.vae)
        if meta.mode == scene.ANALYTIC:
            records = evalbench.encode_latents(vp, records)
        elif meta.latent_dim != cfg.latent_dim:
            raise dataio.DataError(
                "%s uses %d-wide codes, the config wants %d"
                % (args.data, meta.latent_dim, cfg.latent_dim))

    pool = [records[i % len(records)]
            for i in range(cfg.adv_per_record * len(records))]
    log.info("attacking %d records (%d per source), %d steps each",
             len(pool), cfg.adv_per_record, cfg.steps)
    adv, failures = adversary.synth_adversarial_dataset(
        pool, tm, cfg.mpc_config(), kappa=cfg.kappa, steps=cfg.steps,
        step_size=cfg.adv_step_size, grad_clip=cfg.adv_grad_clip,
        seed=cfg.seed, vp=vp, relabel=cfg.relabel)
    for index, err in failures:
        log.warning("record %d dropped: %s", index, err)
    j_orig = float(np.mean([a.j_original for a in adv]))
    j_adv = float(np.mean([a.j_adversarial for a in adv]))
    ratio = j_adv / j_orig if j_orig else float("inf")
    log.info("mean task cost %.4f -> %.4f, ratio %.4f", j_orig, j_adv,
             ratio)
    out = _outpath(cfg, args.out, "adversarial.advd")
    dataio.write_dataset(out, [a.as_record() for a in adv])
    log.info("wrote %d adversarial records to %s", len(adv), out)
    return EXIT_OK


def _cmd_augment(args):
    cfg = _load_cfg(args)
    records, _ = _read_records(args.data)
    count = len(records) if args.count is None else args.count
    if count < 1:
        raise CliError("--count must be >= 1, got %d" % count)
    rng = np.random.default_rng([cfg.seed, evalbench.STREAM_AUGMENT])
    out_records = evalbench.augmented_pool(records, count, rng)
    out = _outpath(cfg, args.out, "augmented.advd")
    dataio.write_dataset(out, out_records)
    log.info("wrote %d augmented records to %s", count, out)
    return EXIT_OK


def _cmd_eval(args):
    cfg = _load_cfg(args)
    records, meta = _read_records(args.data)
    labels = [os.path.basename(p) for p in args.model]
    if len(set(labels)) != len(labels):
        labels = list(args.model)
    mpc_cfg = cfg.mpc_config()
    evals = []
    for label, path in zip(labels, args.model):
        tm = _load_taskmodel(cfg, path)
        log.info("evaluating %s on %d records", label, len(records))
        evals.append((label, evalbench.evaluate_model(tm, records, mpc_cfg,
                                                      mode=meta.mode)))

    rows = [(label, ev.n_records, len(ev.failures), ev.collision_count,
             ev.mean_cost, ev.mean_mse) for label, ev in evals]
    _print_table(("model", "records", "failures", "collisions",
                  "mean_cost", "mean_mse"), rows)

    if len(evals) > 1:
        print()
        pairs = []
        for (la, ea), (lb, eb) in itertools.combinations(evals, 2):
            rows_a = {r.index: r for r in ea.rows}
            rows_b = {r.index: r for r in eb.rows}
            shared = sorted(set(rows_a) & set(rows_b))
            p_cost = p_mse = None
            if len(shared) >= 5:
                p_cost = evalbench.wilcoxon_signed_rank(
                    [rows_a[i].cost for i in shared],
                    [rows_b[i].cost for i in shared])
                p_mse = evalbench.wilcoxon_signed_rank(
                    [rows_a[i].mse for i in shared],
                    [rows_b[i].mse for i in shared])
            pairs.append((la, lb, len(shared), p_cost, p_mse))
        _print_table(("model_a", "model_b", "shared", "p_cost", "p_mse"),
                     pairs)
    return EXIT_OK


def _cmd_export(args):
    cfg = _load_cfg(args)
    records, meta = _read_records(args.data, allow_empty=True)
    if args.limit is not None:
        if args.limit < 0:
            raise CliError("--limit must be >= 0, got %d" % args.limit)
        records = records[:args.limit]
    dest = args.dest if args.dest else os.path.join(cfg.outdir, "export")
    os.makedirs(dest, exist_ok=True)

    rec_rows, wp_rows, obs_rows = [], [], []
    for i, rec in enumerate(records):
        name = "rec_%04d.pgm" % i
        scene.write_pgm(os.path.join(dest, name), rec.image)
        scn = rec.scenario
        rec_rows.append((i, name, rec.latent.mode, int(rec.adversarial),
                         int(rec.relabeled), float(scn.goal[0]),
                         float(scn.goal[1]), len(scn.obstacles)))
        for kind, block in (("past", rec.w_past), ("future", rec.w_future)):
            for t, (lx, ly, v, th) in enumerate(np.asarray(block, float)):
                wp_rows.append((i, kind, t, lx, ly, v, th))
        for k, obs in enumerate(scn.obstacles):
            obs_rows.append((i, k, float(obs.cx), float(obs.cy),
                             float(obs.rx), float(obs.ry)))
    _write_rows(os.path.join(dest, "records.csv"),
                ("id", "image", "mode", "adversarial", "relabeled",
                 "goal_x", "goal_y", "n_obs"), rec_rows)
    _write_rows(os.path.join(dest, "waypoints.csv"),
                ("id", "kind", "t", "lx", "ly", "v", "theta"), wp_rows)
    _write_rows(os.path.join(dest, "obstacles.csv"),
                ("id", "obstacle", "cx", "cy", "rx", "ry"), obs_rows)
    log.info("exported %d records (mode %s) to %s", len(records),
             meta.mode, dest)
    return EXIT_OK


def _cmd_run_benchmark(args):
    cfg = _load_cfg(args)
    if args.force:
        log.warning("skipping the selftest gate")
    else:
        log.info("running the selftest gate")
        failures = run_selftest(quiet=True)
        if failures:
            log.error("%d selftest checks failed; refusing to start "
                      "(--force overrides)", failures)
            return EXIT_NUMERIC
    evalbench.run_benchmark(cfg)
    for path in figures.render_summary_figures(cfg.outdir):
        log.info("figure written: %s", path)
    header, rows = _read_csv(os.path.join(cfg.outdir, "summary.csv"))
    _print_table(header, [[c if c else "n/a" for c in row]
                          for row in rows])
    return EXIT_OK


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh)
                if row and not row[0].startswith("#")]
    return rows[0], rows[1:]


# ---------------------------------------------------------------------------
# selftest checks


def _norm_close(name, got, want, rtol, atol=1e-9):
    got = np.asarray(got, float)
    want = np.asarray(want, float)
    scale = max(np.abs(got).max(initial=0.0), np.abs(want).max(initial=0.0))
    err = np.abs(got - want).max(initial=0.0)
    if err > rtol * scale + atol:
        raise AssertionError("%s mismatch: max|diff| %.3e exceeds "
                             "%.0e * %.3e" % (name, err, rtol, scale))


def _mini_records(seed, n, n_obs=2, size=32, past_len=3, horizon=6, dt=2.0):
    """Small fast records: coarse images, short horizons, wide dt."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        try:
            scn = scene.sample_scenario(scene.TRAIN, rng, n_obs=n_obs)
            w_p, w_f = scene.oracle_plan(scn, past_len, horizon, dt=dt)
        except scene.SceneError:
            continue
        lat = scene.latent_of(scn)
        out.append(dataio.DataRecord(image=scene.render_analytic(lat, size),
                                     latent=lat, w_past=w_p, w_future=w_f,
                                     scenario=scn))
    return out


def _selftest_qp_problem(horizon=20):
    rng = np.random.default_rng(17)
    while True:
        try:
            scn = scene.sample_scenario(scene.TRAIN, rng, n_obs=3)
            _, w_f = scene.oracle_plan(scn, 10, horizon)
        except scene.SceneError:
            continue
        return mpc.build_toy_problem(scn, np.asarray(w_f, float),
                                     mpc.MpcConfig())


def _check_tensor_ops():
    rng = np.random.default_rng(11)

    def both_routes(build, arrays):
        g = T.Graph()
        leaves = [g.leaf(T.Tensor(a, requires_grad=True)) for a in arrays]
        grads = T.backward(g, build(g, leaves))

        def forward(arrs):
            gg = T.Graph()
            nodes = [gg.leaf(T.Tensor(a, requires_grad=True)) for a in arrs]
            return float(build(gg, nodes).value)

        fd = T.numeric_gradient(forward, arrays, h=4e-3)
        for leafn, f in zip(leaves, fd):
            _norm_close("tensor op gradient", grads[leafn.idx], f,
                        1e-3, 1e-4)

    x = rng.normal(0.0, 1.0, (3, 4)).astype(T.DTYPE)
    w = rng.normal(0.0, 1.0, (4, 2)).astype(T.DTYPE)
    both_routes(lambda g, n: g.l2sq(g.sigmoid(g.matmul(n[0], n[1]))),
                [x, w])

    img = rng.normal(0.0, 1.0, (1, 6, 6, 1)).astype(T.DTYPE)
    ker = rng.normal(0.0, 0.5, (3, 3, 1, 2)).astype(T.DTYPE)
    both_routes(lambda g, n: g.l2sq(g.reshape(
        g.conv2d(n[0], n[1], stride=1, padding=1), (72,))), [img, ker])


def _check_renderer_gradient():
    size = 24
    rec = _mini_records(2, 1)[0]
    nu = np.asarray(rec.latent.values, float)
    rng = np.random.default_rng(3)
    weights = rng.normal(0.0, 1.0, (size, size))

    g = T.Graph()
    leafn = g.leaf(T.Tensor(nu.astype(T.DTYPE), requires_grad=True))
    img = scene.render_scene_node(g, leafn, size)
    loss = g.sum(g.mul(img, g.constant(weights.astype(T.DTYPE))))
    got = T.backward(g, loss)[leafn.idx]

    h = 1e-5
    fd = np.zeros(nu.size)
    for j in range(nu.size):
        plus, minus = nu.copy(), nu.copy()
        plus[j] += h
        minus[j] -= h
        fd[j] = (np.sum(ref64.render64(plus, size) * weights)
                 - np.sum(ref64.render64(minus, size) * weights)) / (2 * h)
    _norm_close("renderer gradient", got, fd, 1e-3, 1e-6)


def _check_decoder_gradient():
    size, dim = 16, 6
    vp = vae.init_vae(np.random.default_rng(4), image_size=size,
                      latent_dim=dim, enc_channels=(2, 3, 4),
                      dec_channels=(4, 3, 2))
    rng = np.random.default_rng(5)
    nu = rng.normal(0.0, 1.0, dim)
    weights = rng.normal(0.0, 1.0, (size, size))

    g = T.Graph()
    leafn = g.leaf(T.Tensor(nu.astype(T.DTYPE).reshape(1, -1),
                            requires_grad=True))
    leaves = nn.Leaves(g, vp.params, trainable=False)
    img = vae.decode_node(g, leafn, leaves, vp)
    cvec = weights.astype(T.DTYPE).reshape(1, size, size, 1)
    loss = g.sum(g.mul(img, g.constant(cvec)))
    got = T.backward(g, loss)[leafn.idx].reshape(-1)

    h = 1e-5
    fd = np.zeros(dim)
    for j in range(dim):
        plus, minus = nu.copy(), nu.copy()
        plus[j] += h
        minus[j] -= h
        fd[j] = (np.sum(ref64.vae_decode64(vp, plus) * weights)
                 - np.sum(ref64.vae_decode64(vp, minus) * weights)) / (2 * h)
    _norm_close("decoder gradient", got, fd, 1e-3, 1e-6)


def _check_qp_solution():
    problem = _selftest_qp_problem()
    sol = mpc.solve_qp(problem, tol=1e-9, max_iter=200000)
    if sol.status != mpc.SOLVED:
        raise AssertionError("tracking problem did not solve: %s"
                             % sol.status)
    if max(sol.primal_residual, sol.dual_residual) > 1e-6:
        raise AssertionError("residuals %.2e / %.2e exceed 1e-6"
                             % (sol.primal_residual, sol.dual_residual))

    x, u = sol.states, sol.controls
    viol = float(np.abs(x[0] - problem.initial_state).max())
    for t in range(problem.horizon):
        res = x[t + 1] - problem.A @ x[t] - problem.B @ u[t]
        viol = max(viol, float(np.abs(res).max()))
    viol = max(viol, float(np.maximum(u - problem.u_max, 0.0).max()),
               float(np.maximum(problem.u_min - u, 0.0).max()))
    for t in range(1, problem.horizon + 1):
        viol = max(viol,
                   float(np.maximum(x[t] - problem.x_max, 0.0).max()),
                   float(np.maximum(problem.x_min - x[t], 0.0).max()))
    for t, hs in enumerate(problem.halfspaces):
        for a, b in hs:
            viol = max(viol, float(b - np.asarray(a) @ x[t, :2]))
    if viol > 1e-6:
        raise AssertionError("constraint violation %.2e exceeds 1e-6"
                             % viol)

    direct = mpc.tracking_cost(problem, sol.states, sol.controls)
    _norm_close("solution cost", sol.cost, direct, 1e-8)


def _check_envelope_gradient():
    problem = _selftest_qp_problem()
    sol = mpc.solve_qp(problem, tol=1e-9, max_iter=200000)
    got = mpc.grad_cost_wrt_waypoints(problem, sol)
    fd = mpc.fd_grad_cost(problem, h=1e-4)
    err = np.linalg.norm(got - fd)
    if err > 1e-3 * np.linalg.norm(fd):
        raise AssertionError("envelope gradient off by %.2e relative"
                             % (err / np.linalg.norm(fd)))


def _check_pipeline_gradient():
    rec = _mini_records(7, 1)[0]
    tm = taskmodel.init_taskmodel(np.random.default_rng(0), image_size=32,
                                  past_len=3, horizon=6, channels=(2, 3, 4),
                                  dt=2.0)
    mcfg = mpc.MpcConfig(dt=2.0)
    kappa = 30.0
    nu = np.asarray(rec.latent.values, float)
    theta = np.eye(nu.size) + np.random.default_rng(3).normal(
        0.0, 0.01, (nu.size, nu.size))
    pipe = adversary.build_pipeline(rec, tm, mcfg, record_id=0, tol=1e-9)
    _, dtheta = adversary.adversarial_loss(pipe, theta, nu, kappa=kappa)

    ws = mpc.QpWorkspace(mpc.build_toy_problem(
        rec.scenario, np.asarray(rec.w_future, float), mcfg))

    def loss64(th):
        nu_bar = th @ nu
        img = ref64.render64(nu_bar, 32)
        pred = ref64.taskmodel_predict64(tm, tm.params, img,
                                         np.asarray(rec.w_past, float),
                                         taskmodel.IN_SCALE,
                                         taskmodel.OUT_SCALE)
        ws.set_waypoints(pred)
        sol = ws.solution(tol=1e-9, max_iter=200000)
        if sol.status != mpc.SOLVED:
            raise AssertionError("perturbed pipeline solve failed")
        d = nu - nu_bar
        return sol.cost - kappa * float(d @ d)

    h = 3e-6
    fd = np.zeros_like(theta)
    for j in range(nu.size):
        for k in range(nu.size):
            plus, minus = theta.copy(), theta.copy()
            plus[j, k] += h
            minus[j, k] -= h
            fd[j, k] = (loss64(plus) - loss64(minus)) / (2 * h)
    err = np.linalg.norm(dtheta - fd)
    if err > 1e-2 * np.linalg.norm(fd):
        raise AssertionError("pipeline gradient off by %.2e relative"
                             % (err / np.linalg.norm(fd)))


def _check_wilcoxon():
    p = evalbench.wilcoxon_signed_rank(np.arange(1.0, 7.0), np.zeros(6))
    if p != 2.0 / 64.0:
        raise AssertionError("six positive pairs gave p=%r, want 2/64" % p)

    rng = np.random.default_rng(23)
    x = rng.normal(0.0, 1.0, 8)
    y = x + rng.normal(0.0, 1.0, 8)
    p = evalbench.wilcoxon_signed_rank(x, y)
    d = x - y
    ranks = stats.rankdata(np.abs(d))
    w_obs = min(ranks[d > 0].sum(), ranks[d < 0].sum())
    hits = sum(1 for signs in itertools.product((1.0, -1.0), repeat=8)
               if sum(r for s, r in zip(signs, ranks) if s > 0)
               <= w_obs + 1e-9)
    brute = min(1.0, 2.0 * hits / 2.0 ** 8)
    if p != brute:
        raise AssertionError("exact p %r differs from enumeration %r"
                             % (p, brute))


def _check_dataset_roundtrip():
    records = _mini_records(31, 2)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "roundtrip.advd")
        dataio.write_dataset(path, records)
        with open(path, "rb") as fh:
            first = fh.read()
        back, meta = dataio.read_dataset(path)
        if meta.count != len(records):
            raise AssertionError("count %d became %d" % (len(records),
                                                         meta.count))
        for orig, rec in zip(records, back):
            same = (np.array_equal(orig.image, rec.image)
                    and np.array_equal(orig.latent.values,
                                       rec.latent.values)
                    and orig.latent.mode == rec.latent.mode
                    and np.array_equal(orig.w_past, rec.w_past)
                    and np.array_equal(orig.w_future, rec.w_future)
                    and orig.scenario.goal == rec.scenario.goal
                    and orig.scenario.obstacles == rec.scenario.obstacles
                    and orig.adversarial == rec.adversarial
                    and orig.relabeled == rec.relabeled)
            if not same:
                raise AssertionError("a record changed across the "
                                     "write/read cycle")
        dataio.write_dataset(path, back)
        with open(path, "rb") as fh:
            second = fh.read()
        if first != second:
            raise AssertionError("rewriting the read records changed "
                                 "the bytes")


SELFTEST_CHECKS = (
    ("tensor-ops", _check_tensor_ops),
    ("renderer-gradient", _check_renderer_gradient),
    ("decoder-gradient", _check_decoder_gradient),
    ("qp-solution", _check_qp_solution),
    ("envelope-gradient", _check_envelope_gradient),
    ("pipeline-gradient", _check_pipeline_gradient),
    ("wilcoxon-exact", _check_wilcoxon),
    ("dataset-roundtrip", _check_dataset_roundtrip),
)


def run_selftest(quiet=False):
    """Run every integrity check; returns the number of failures."""
    failures = 0
    for name, fn in SELFTEST_CHECKS:
        start = time.perf_counter()
        try:
            fn()
        except Exception as err:
            failures += 1
            print("FAIL %-18s %s" % (name, err))
            continue
        if not quiet:
            print("ok   %-18s (%.2fs)" % (name,
                                          time.perf_counter() - start))
    return failures


def _cmd_selftest(args):
    failures = run_selftest()
    total = len(SELFTEST_CHECKS)
    if failures:
        print("%d of %d checks failed" % (failures, total))
        return EXIT_NUMERIC
    print("all %d checks passed" % total)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parsing


class _Parser(argparse.ArgumentParser):
    """Parser whose usage failures exit with code 1, not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print("%s: error: %s" % (self.prog, message), file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    top = _Parser(prog="advsynth",
                  description="Task-driven adversarial scenario synthesis "
                              "and benchmarking.")
    sub = top.add_subparsers(dest="command", required=True,
                             parser_class=_Parser, metavar="command")

    def add(name, handler, help_text, config_required=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=config_required,
                       help="TOML run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--outdir", default=None,
                       help="override the config output directory")
        p.set_defaults(handler=handler)
        return p

    p = add("gen-scenarios", _cmd_gen_scenarios,
            "sample scenarios, plan labels, and write a dataset")
    p.add_argument("--split", choices=sorted(SPLIT_STREAMS), default="train",
                   help="which distribution and seed stream to draw from")
    p.add_argument("--count", type=int, default=None,
                   help="records to generate (default: the config's size "
                        "for the split)")
    p.add_argument("--out", default=None, help="output dataset path")

    p = add("train-vae", _cmd_train_vae,
            "train the learned renderer on a dataset's images")
    p.add_argument("--data", required=True, help="input dataset")
    p.add_argument("--out", default=None, help="output checkpoint path")

    for name, default_out, help_text in (
            ("train-task", "task.advw",
             "train the waypoint predictor on one or more datasets"),
            ("retrain", "retrained.advw",
             "train a fresh predictor on a base dataset plus extras")):
        p = add(name, _cmd_train_task, help_text)
        p.add_argument("--data", action="append", required=True,
                       help="input dataset (repeatable)")
        p.add_argument("--out", default=None, help="output checkpoint path")
        p.set_defaults(default_out=default_out)

    p = add("synth-adv", _cmd_synth_adv,
            "synthesize adversarial variants of a dataset")
    p.add_argument("--data", required=True, help="input dataset")
    p.add_argument("--model", required=True,
                   help="task model checkpoint to attack")
    p.add_argument("--vae", default=None,
                   help="renderer checkpoint (vae mode only)")
    p.add_argument("--out", default=None, help="output dataset path")

    p = add("augment", _cmd_augment,
            "write contrast/brightness/blur variants of a dataset")
    p.add_argument("--data", required=True, help="input dataset")
    p.add_argument("--count", type=int, default=None,
                   help="records to emit (default: one per input record)")
    p.add_argument("--out", default=None, help="output dataset path")

    p = add("eval", _cmd_eval,
            "score checkpoints on a dataset and compare them pairwise")
    p.add_argument("--data", required=True, help="evaluation dataset")
    p.add_argument("--model", action="append", required=True,
                   help="task model checkpoint (repeatable)")

    p = add("export", _cmd_export,
            "dump a dataset as PGM images plus CSV tables")
    p.add_argument("--data", required=True, help="input dataset")
    p.add_argument("--dest", default=None,
                   help="destination directory (default: <outdir>/export)")
    p.add_argument("--limit", type=int, default=None,
                   help="export at most this many records")

    add("selftest", _cmd_selftest,
        "run gradient, solver, statistics, and storage integrity checks",
        config_required=False)

    p = add("run-benchmark", _cmd_run_benchmark,
            "run the four-scheme benchmark and render report figures")
    p.add_argument("--force", action="store_true",
                   help="start even if the selftest gate fails")

    return top


def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s",
                        datefmt="%H:%M:%S")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.handler(args)
    except CliError as err:
        log.error("%s", err)
        return EXIT_USAGE
    except (config.ConfigError, dataio.DataError, T.CheckpointError,
            OSError) as err:
        log.error("%s", err)
        return EXIT_DATA
    except (mpc.MpcError, scene.SceneError, vae.VaeError,
            taskmodel.TaskModelError, adversary.AdversaryError,
            evalbench.EvalError) as err:
        log.error("%s", err)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
