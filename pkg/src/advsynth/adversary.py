"""Per-record linear scene attacks driven by the closed-loop task cost.

Each record gets its own tiny adversary: a square matrix theta applied
to the scene latent.  A few gradient-ascent steps push theta to raise
the tracking cost of the waypoints the frozen task model predicts from
the re-rendered scene, while a consistency penalty keeps the perturbed
latent close to the original.  The highest-cost perturbation seen wins;
if nothing beats the unperturbed scene, the original is kept, so an
emitted record is never easier than its source.

Only theta trains here.  Task-model weights, decoder weights, and the
tracking-problem configuration are read-only throughout, and the
synthesizer verifies their checksums before returning.
"""

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from . import dataio, mpc, nn, scene, taskmodel, vae
from . import tensor as T

log = logging.getLogger(__name__)

DEFAULT_KAPPA = 30.0        # consistency weight for the obstacle task
DEFAULT_STEPS = 10          # ascent steps per record
DEFAULT_STEP_SIZE = 1e-2
DEFAULT_GRAD_CLIP = 10.0    # max Frobenius norm of one ascent step's gradient
THETA_INIT_STD = 0.01       # spread of the near-identity initialization

RELABEL_REUSE = "reuse"
RELABEL_ORACLE = "oracle"

# A run aborts when more than this fraction of records fail to perturb.
FAILURE_BUDGET = 0.01


class AdversaryError(Exception):
    """Raised for bad attack configuration and failed perturbations."""


@dataclass
class AdversaryParams:
    """State of one record's linear attack map."""

    theta: np.ndarray

    def __post_init__(self):
        th = np.asarray(self.theta, float)
        if th.ndim != 2 or th.shape[0] != th.shape[1]:
            raise AdversaryError("theta must be square, got %r"
                                 % (th.shape,))
        if not np.all(np.isfinite(th)):
            raise AdversaryError("theta has non-finite entries")
        self.theta = th

    @property
    def dim(self):
        return self.theta.shape[0]


def init_adversary(rng, dim):
    """Near-identity start: identity plus N(0, 0.01^2) entries.

    A fully random matrix would wreck the scene on the first step and
    leave the consistency term nothing to preserve; tiny noise keeps the
    start realistic while still randomizing the ascent direction.
    """
    eps = rng.normal(0.0, THETA_INIT_STD, (dim, dim))
    return AdversaryParams(np.eye(dim) + eps)


def perturb(g, nu_node, theta_node):
    """Graph node for theta @ nu; the whole attack is this product."""
    tshape = tuple(theta_node.shape)
    nshape = tuple(nu_node.shape)
    if len(tshape) != 2 or tshape[0] != tshape[1]:
        raise AdversaryError("theta node must be square, got %r" % (tshape,))
    if len(nshape) != 1 or nshape[0] != tshape[1]:
        raise AdversaryError("latent length %r does not match theta %r"
                             % (nshape, tshape))
    return g.matmul(theta_node, nu_node)


def consistency_node(g, nu_ref_node, nu_bar_node):
    """Squared Euclidean distance between the two latents, on the graph."""
    return g.l2sq(g.sub(nu_ref_node, nu_bar_node))


def consistency_loss(nu, nu_bar):
    """Plain-array version of the consistency term."""
    a = np.asarray(nu, float).reshape(-1)
    b = np.asarray(nu_bar, float).reshape(-1)
    if a.shape != b.shape:
        raise AdversaryError("latent shapes differ: %r vs %r"
                             % (a.shape, b.shape))
    d = a - b
    return float(d @ d)


# ---------------------------------------------------------------------------
# pipeline state: frozen models plus one record's tracking problem


@dataclass
class Pipeline:
    """Everything needed to score a perturbed latent for one record.

    The tracking problem is built once from the record's original
    geometry and reused for every ascent step; only its target
    waypoints move.  Constraints therefore never depend on theta, which
    is exactly the condition under which the injected cost gradient
    (2 Q (w - x*)) is the true derivative of the optimal cost.
    """

    tm: taskmodel.TaskModelParams
    mode: str
    w_past: np.ndarray
    workspace: mpc.QpWorkspace
    vp: "vae.VaeParams" = None
    record_id: object = None
    tol: float = 1e-6
    _relaxed: mpc.QpWorkspace = dataclasses.field(default=None, repr=False)

    def solve(self, waypoints):
        """Track the waypoints; returns (cost, problem, solution, fallback).

        Infeasible problems re-solve without obstacle halfspaces at a
        fixed cost surcharge; a record whose relaxed problem still
        fails is unusable and raises.
        """
        self.workspace.set_waypoints(waypoints)
        sol = self.workspace.solution(tol=self.tol)
        if sol.status == mpc.SOLVED:
            return sol.cost, self.workspace.problem, sol, False
        if self._relaxed is None:
            self._relaxed = mpc.QpWorkspace(
                mpc.relax_halfspaces(self.workspace.problem))
        self._relaxed.set_waypoints(waypoints)
        sol = self._relaxed.solution(tol=self.tol)
        if sol.status != mpc.SOLVED:
            raise AdversaryError(
                "record %r: tracking problem unsolvable even without "
                "obstacle constraints (status %s)"
                % (self.record_id, sol.status))
        return (sol.cost + mpc.FALLBACK_PENALTY, self._relaxed.problem,
                sol, True)


def build_pipeline(record, tm, config, vp=None, record_id=None, tol=1e-6):
    """Bind frozen models and one record into a reusable scorer."""
    mode = record.latent.mode
    nu = record.latent.values
    if record.past_len != tm.past_len:
        raise AdversaryError("record %r past length %d does not match the "
                             "model's %d" % (record_id, record.past_len,
                                             tm.past_len))
    if record.horizon != tm.horizon:
        raise AdversaryError("record %r horizon %d does not match the "
                             "model's %d" % (record_id, record.horizon,
                                             tm.horizon))
    if mode == scene.VAE:
        if vp is None:
            raise AdversaryError("vae-mode records need decoder parameters")
        if vp.image_size != tm.image_size:
            raise AdversaryError("decoder renders %dx%d but the model "
                                 "expects %dx%d" % (vp.image_size,
                                                    vp.image_size,
                                                    tm.image_size,
                                                    tm.image_size))
        if nu.size != vp.latent_dim:
            raise AdversaryError("record %r latent length %d does not "
                                 "match the decoder's %d"
                                 % (record_id, nu.size, vp.latent_dim))
    if record.scenario is None:
        raise AdversaryError("record %r carries no scenario geometry; the "
                             "tracking problem needs it" % (record_id,))
    problem = mpc.build_toy_problem(record.scenario,
                                    np.asarray(record.w_future, float),
                                    config)
    return Pipeline(tm=tm, mode=mode,
                    w_past=np.asarray(record.w_past, float),
                    workspace=mpc.QpWorkspace(problem), vp=vp,
                    record_id=record_id, tol=tol)


@dataclass
class LossParts:
    """One scored perturbation: the loss and its ingredients."""

    total: float            # cost - kappa * consistency
    cost: float             # optimal tracking cost of the predictions
    consistency: float      # squared distance to the reference latent
    nu_bar: np.ndarray      # the perturbed latent that was scored
    image: np.ndarray       # its rendering, float32 (S, S)
    prediction: np.ndarray  # waypoints the frozen model produced
    used_fallback: bool


def adversarial_loss(pipe, theta, nu_prev, nu_ref=None,
                     kappa=DEFAULT_KAPPA, want_grad=True):
    """Score theta @ nu_prev through render -> predict -> track.

    ``nu_ref`` is the latent the consistency term pulls toward (the
    record's original; defaults to ``nu_prev``, which is correct for
    the first ascent step).  Returns (LossParts, dL/dtheta), the
    gradient None when ``want_grad`` is false.

    The tracking cost enters the backward pass as an injected seed on
    the prediction node; everything upstream of the predictions (task
    model, renderer or decoder, the attack map) lives on the graph.
    """
    nu_prev = np.asarray(nu_prev, float).reshape(-1)
    nu_ref = nu_prev if nu_ref is None else \
        np.asarray(nu_ref, float).reshape(-1)
    if nu_ref.shape != nu_prev.shape:
        raise AdversaryError("reference latent shape %r does not match %r"
                             % (nu_ref.shape, nu_prev.shape))
    if kappa < 0:
        raise AdversaryError("kappa must be nonnegative")
    theta = np.asarray(theta, float)

    g = T.Graph()
    if want_grad:
        theta_node = g.leaf(T.Tensor(theta.astype(T.DTYPE),
                                     requires_grad=True))
    else:
        theta_node = g.constant(theta.astype(T.DTYPE))
    nu_bar = perturb(g, g.constant(nu_prev.astype(T.DTYPE)), theta_node)

    size = pipe.tm.image_size
    if pipe.mode == scene.ANALYTIC:
        img = scene.render_scene_node(g, nu_bar, size)
    else:
        dec_leaves = nn.Leaves(g, pipe.vp.params, trainable=False)
        img4 = vae.decode_node(g, g.reshape(nu_bar, (1, nu_prev.size)),
                               dec_leaves, pipe.vp)
        img = g.reshape(img4, (size, size))
    tm_leaves = nn.Leaves(g, pipe.tm.params, trainable=False)
    pred = taskmodel.predict_node(g, tm_leaves, pipe.tm, img, pipe.w_past)
    cons = consistency_node(g, g.constant(nu_ref.astype(T.DTYPE)), nu_bar)

    cost, problem, sol, used_fallback = pipe.solve(
        np.asarray(pred.value, float))
    total = cost - kappa * float(cons.value)

    dtheta = None
    if want_grad:
        dj_dw = mpc.grad_cost_wrt_waypoints(problem, sol)
        seeds = [(pred, dj_dw.astype(T.DTYPE)),
                 (cons, np.asarray(-float(kappa), T.DTYPE))]
        grads = T.inject_external_gradient(g, seeds)
        dtheta = np.asarray(grads.get(theta_node.idx,
                                      np.zeros_like(theta)), float)

    parts = LossParts(total=total, cost=float(cost),
                      consistency=float(cons.value),
                      nu_bar=np.asarray(nu_bar.value, float),
                      image=np.asarray(img.value, T.DTYPE),
                      prediction=np.asarray(pred.value, float),
                      used_fallback=used_fallback)
    return parts, dtheta


def ascent_update(theta, grad, step_size=DEFAULT_STEP_SIZE,
                  grad_clip=DEFAULT_GRAD_CLIP):
    """Gradient ascent with the step's Frobenius norm capped."""
    theta = np.asarray(theta, float)
    g = np.asarray(grad, float)
    if g.shape != theta.shape:
        raise AdversaryError("gradient shape %r does not match theta %r"
                             % (g.shape, theta.shape))
    if not np.all(np.isfinite(g)):
        raise AdversaryError("non-finite ascent gradient")
    norm = float(np.linalg.norm(g))
    if grad_clip is not None and norm > grad_clip:
        g = g * (grad_clip / norm)
    return theta + step_size * g


# ---------------------------------------------------------------------------
# dataset synthesis


@dataclass
class AdvRecord:
    """The winning perturbation of one source record."""

    original: dataio.DataRecord
    perturbed_image: np.ndarray
    perturbed_latent: scene.LatentScene
    label: np.ndarray       # reused original label unless relabeled
    j_original: float
    j_adversarial: float
    # Ascent step that produced the kept scene; 0 means no step beat the
    # original and the source record was kept as-is.
    steps_taken: int
    relabeled: bool = False

    def as_record(self):
        """Convert to a storable record flagged as adversarial.

        In analytic mode the stored geometry is the perturbed scene's
        own (what the image actually shows); a learned-renderer latent
        has no recoverable geometry, so the original's is kept.
        """
        if self.perturbed_latent.mode == scene.ANALYTIC:
            dist = (self.original.scenario.distribution
                    if self.original.scenario is not None else scene.TRAIN)
            scn = scene.scenario_of(self.perturbed_latent, distribution=dist)
        else:
            scn = self.original.scenario
        return dataio.DataRecord(image=self.perturbed_image,
                                 latent=self.perturbed_latent,
                                 w_past=self.original.w_past,
                                 w_future=self.label, scenario=scn,
                                 adversarial=True, relabeled=self.relabeled)


def synth_record(record, index, tm, config, kappa=DEFAULT_KAPPA,
                 steps=DEFAULT_STEPS, step_size=DEFAULT_STEP_SIZE,
                 grad_clip=DEFAULT_GRAD_CLIP, seed=0, vp=None,
                 relabel=RELABEL_REUSE, tol=1e-6):
    """Attack one record; deterministic in (seed, index) alone.

    Records share nothing, so processing order and batching cannot
    change any output: this function is the whole per-record story.
    """
    if steps < 1:
        raise AdversaryError("need at least one ascent step")
    if relabel not in (RELABEL_REUSE, RELABEL_ORACLE):
        raise AdversaryError("unknown relabel mode %r" % (relabel,))
    rng = np.random.default_rng([int(seed), int(index)])
    nu = np.asarray(record.latent.values, float)
    pipe = build_pipeline(record, tm, config, vp=vp, record_id=index,
                          tol=tol)

    base, _ = adversarial_loss(pipe, np.eye(nu.size), nu, kappa=kappa,
                               want_grad=False)
    j_star = base.cost
    best = None

    adv = init_adversary(rng, nu.size)
    theta = adv.theta
    nu_bar = nu
    for k in range(1, steps + 1):
        parts, dtheta = adversarial_loss(pipe, theta, nu_bar, nu_ref=nu,
                                         kappa=kappa)
        nu_bar = parts.nu_bar
        if parts.cost >= j_star:
            j_star = parts.cost
            best = (parts.image, parts.nu_bar, parts.cost, k)
        theta = ascent_update(theta, dtheta, step_size, grad_clip)

    if best is None:
        image, nu_keep = record.image, nu
        j_adv, step_kept = base.cost, 0
    else:
        image, nu_keep, j_adv, step_kept = best

    label = record.w_future
    relabeled = False
    if relabel == RELABEL_ORACLE and step_kept > 0:
        scn = scene.scenario_of(nu_keep).validate()
        _, label = scene.oracle_plan(scn, tm.past_len, tm.horizon,
                                     dt=tm.dt)
        relabeled = True

    return AdvRecord(original=record, perturbed_image=image,
                     perturbed_latent=scene.LatentScene(record.latent.mode,
                                                        nu_keep),
                     label=label, j_original=base.cost, j_adversarial=j_adv,
                     steps_taken=step_kept, relabeled=relabeled)


def synth_adversarial_dataset(records, tm, config, kappa=DEFAULT_KAPPA,
                              steps=DEFAULT_STEPS,
                              step_size=DEFAULT_STEP_SIZE,
                              grad_clip=DEFAULT_GRAD_CLIP, seed=0, vp=None,
                              relabel=RELABEL_REUSE, tol=1e-6,
                              index_base=0):
    """Attack every record; returns (adv_records, failures).

    ``failures`` lists (index, exception) for records that could not be
    perturbed (blocked relabel plans, unsolvable tracking problems);
    the run aborts when they exceed one percent of the input.  Frozen
    weights and the problem configuration are checksum-verified.
    ``index_base`` offsets the per-record seed streams so that two
    synthesis pools under one seed stay statistically independent.
    """
    if relabel not in (RELABEL_REUSE, RELABEL_ORACLE):
        raise AdversaryError("unknown relabel mode %r" % (relabel,))
    if relabel == RELABEL_ORACLE and records and \
            records[0].latent.mode == scene.VAE:
        raise AdversaryError("oracle relabeling needs analytic latents; "
                             "a learned code has no geometry to re-plan")
    tm_sum = tm.checksum()
    dec_sum = vp.decoder_checksum() if vp is not None else None
    config_snapshot = dataclasses.replace(config)

    out, failures = [], []
    for index, record in enumerate(records, start=index_base):
        try:
            out.append(synth_record(record, index, tm, config, kappa=kappa,
                                    steps=steps, step_size=step_size,
                                    grad_clip=grad_clip, seed=seed, vp=vp,
                                    relabel=relabel, tol=tol))
        except (AdversaryError, mpc.MpcError, scene.SceneError,
                vae.VaeError, taskmodel.TaskModelError,
                dataio.DataError) as exc:
            log.warning("record %d failed to perturb: %s", index, exc)
            failures.append((index, exc))
    if failures and len(failures) > FAILURE_BUDGET * len(records):
        raise AdversaryError(
            "%d of %d records failed to perturb (budget %.0f%%); first "
            "error: %s" % (len(failures), len(records),
                           100 * FAILURE_BUDGET, failures[0][1]))

    if tm.checksum() != tm_sum:
        raise AdversaryError("task-model weights changed during synthesis")
    if dec_sum is not None and vp.decoder_checksum() != dec_sum:
        raise AdversaryError("decoder weights changed during synthesis")
    if config != config_snapshot:
        raise AdversaryError("tracking configuration changed during "
                             "synthesis")
    return out, failures
