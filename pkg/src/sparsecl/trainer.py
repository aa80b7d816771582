"""Staged SGD on the contrastive objective, with the manual bias schedule."""

import json
import logging
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import rng as rngmod
from .data import LatentConfig, NoiseConfig, build_dictionary, random_mask, sample_inputs, write_dictionary_csv
from .errors import ConfigError, DivergenceError
from .evaluation import (
    MetricsRecord,
    activation_sparsity,
    alignment_stats,
    probe_classification,
    probe_regression,
    rep_noise_cosine,
    wstar_sample,
    write_pca_csv,
)
from .network import InitConfig, forward, init_params, save_checkpoint
from .objective import MODES, NO_AUG, WITH_AUG, AugmentedPair, Batch, stacked_loss_and_gradient

log = logging.getLogger(__name__)

STAGE_I = "I"
STAGE_II = "II-III"
DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    """Every knob of a run. ``None`` fields are filled from ``d`` and ``d1``.

    Config-file keys are the field names, except ``lam`` which is spelled
    ``lambda`` in files and on the command line.
    """

    d: int = 32
    d1: int = None
    m: int = None
    eta: float = 0.02
    lam: float = None
    tau: float = None
    n_negatives: int = 64
    k_batches: int = 8
    total_steps: int = 22500
    mode: str = WITH_AUG
    stage1_ratio: float = 10.0
    bias_reset_coeff: float = 0.3
    bias_floor_rate: float = None
    bias_cap_coeff: float = 0.212
    log_every: int = 250
    seed: int = 0
    p_active: float = None
    sigma_xi_sq: float = None
    sigma0_sq: float = None
    c_inf: float = 4.0
    n_eval: int = 512
    probe_every: int = 0
    probe_n_train: int = 4096
    probe_n_test: int = 2048
    ridge_mu: float = 1e-4
    logistic_steps: int = 2000
    logistic_lr: float = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        d = self.d
        if self.d1 is None:
            # 8d gives the d1 = 256 desk setting at d = 32
            self.d1 = 8 * d
        if self.m is None:
            self.m = 2 * d
        if self.lam is None:
            self.lam = d**-1.499
        if self.tau is None:
            self.tau = math.log(d) ** 2
        if self.bias_floor_rate is None:
            self.bias_floor_rate = self.eta / d
        if self.p_active is None:
            self.p_active = LatentConfig.default(d).p_active
        if self.sigma_xi_sq is None:
            self.sigma_xi_sq = NoiseConfig.default(d).sigma_xi_sq
        if self.sigma0_sq is None:
            self.sigma0_sq = InitConfig.default(d, self.d1).sigma0_sq

    @classmethod
    def keys(cls):
        return [("lambda" if f.name == "lam" else f.name) for f in fields(cls)]

    def as_dict(self):
        return {("lambda" if f.name == "lam" else f.name): getattr(self, f.name) for f in fields(self)}

    def validate(self):
        """Raise :class:`ConfigError` unless the config is usable for training."""
        problems = []
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}")
        for name in ("d", "d1", "m", "n_negatives", "k_batches", "n_eval"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.d > self.d1:
            problems.append("need d <= d1")
        if self.d < 3:
            problems.append("d must be >= 3 (the defaults use ln ln d)")
        if not self.eta > 0:
            problems.append("eta must be positive")
        if self.total_steps < 0:
            problems.append("total_steps must be >= 0")
        if self.log_every < 1:
            problems.append("log_every must be >= 1")
        if not self.tau > 0:
            problems.append("tau must be positive")
        lo, hi = self.d**-1.499, self.d**-1.001
        if self.mode == WITH_AUG and not lo <= self.lam <= hi:
            problems.append(f"with-aug needs lambda in [d^-1.499, d^-1.001] = [{lo:.4g}, {hi:.4g}], got {self.lam}")
        if self.mode == NO_AUG and not 0 <= self.lam <= 1.0 / self.d:
            problems.append(f"no-aug needs 0 <= lambda <= 1/d = {1.0 / self.d:.4g}, got {self.lam}")
        if not 0 <= self.p_active <= 0.5:
            problems.append("p_active must lie in [0, 0.5]")
        if not self.sigma_xi_sq > 0:
            problems.append("sigma_xi_sq must be positive")
        if not self.sigma0_sq > 0:
            problems.append("sigma0_sq must be positive (a zero init never moves)")
        if self.stage1_ratio < 1:
            problems.append("stage1_ratio must be >= 1")
        if self.bias_reset_coeff <= 0 or self.bias_cap_coeff <= 0 or self.bias_floor_rate < 0:
            problems.append("bias coefficients must be positive")
        if self.ridge_mu <= 0:
            problems.append("ridge_mu must be positive")
        if self.probe_every < 0 or self.checkpoint_every < 0:
            problems.append("probe_every and checkpoint_every must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def probe_steps(self):
        steps = {self.total_steps}
        if self.probe_every:
            steps.update(range(0, self.total_steps + 1, self.probe_every))
        return steps

    def checkpoint_steps(self):
        steps = {0, self.total_steps}
        if self.checkpoint_every:
            steps.update(range(0, self.total_steps + 1, self.checkpoint_every))
        return steps


@dataclass
class Problem:
    """The data distribution shared by both legs of a paired run."""

    dictionary: object
    lat_cfg: LatentConfig
    noise_cfg: NoiseConfig

    @classmethod
    def from_config(cls, config):
        root = rngmod.SeededRng(config.seed, rngmod.STREAM_DICT)
        dictionary = build_dictionary(config.d, config.d1, config.c_inf, root)
        return cls(dictionary, LatentConfig(config.p_active), NoiseConfig(config.sigma_xi_sq))


@dataclass
class ScheduleState:
    step: int
    stage: str
    prev_norm: np.ndarray
    t1_detected_at: int = None


@dataclass
class StepInputs:
    """Everything one SGD step consumes: K positives, masks and negatives."""

    x: np.ndarray
    x_plus: np.ndarray
    x_plusplus: np.ndarray
    x_neg: np.ndarray
    mask: np.ndarray

    def batches(self, mode):
        out = []
        for k in range(self.x.shape[0]):
            neg = _NegView(self.x_neg[k])
            if mode == NO_AUG:
                out.append(Batch.no_aug(self.x[k], neg))
            else:
                pair = AugmentedPair(self.x_plus[k], self.x_plusplus[k], self.mask[k])
                out.append(Batch(pair, neg, WITH_AUG))
        return out


class _NegView:
    # minimal Sample stand-in holding only the inputs of the negatives
    def __init__(self, x):
        self.x = x

    def __len__(self):
        return self.x.shape[0]


@dataclass
class Trajectory:
    records: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    stage1_energy: list = field(default_factory=list)
    t1: int = None
    params: object = None
    outcome: str = "completed"

    def append(self, record):
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("trajectory records must be strictly ordered by step")
        self.records.append(record)

    def final(self):
        return self.records[-1]


def draw_step_inputs(config, problem, step):
    """Fresh positives, masks and negatives for ``step`` (replayable by step)."""
    seed = config.seed
    k, s = config.k_batches, config.n_negatives
    pos = sample_inputs(problem.dictionary, problem.lat_cfg, problem.noise_cfg, k, rngmod.SeededRng(seed, rngmod.STREAM_DATA, step))
    neg = sample_inputs(problem.dictionary, problem.lat_cfg, problem.noise_cfg, k * s, rngmod.SeededRng(seed, rngmod.STREAM_NEG, step))
    x_neg = neg.x.reshape(k, s, problem.dictionary.d1)
    if config.mode == NO_AUG:
        return StepInputs(pos.x, pos.x, pos.x, x_neg, None)
    pair = random_mask(pos.x, rngmod.SeededRng(seed, rngmod.STREAM_MASK, step))
    return StepInputs(pos.x, pair.x_plus, pair.x_plusplus, x_neg, pair.mask)


def detect_stage1_end(params, schedule, config):
    """True once every neuron has grown by ``stage1_ratio`` over its init norm."""
    init = params.init_row_norms()
    ratio = params.row_norms() / np.where(init > 0, init, np.inf)
    return bool(ratio.min() >= config.stage1_ratio)


def update_bias(params, schedule, config):
    """Apply the bias schedule after a weight update; returns the new biases.

    ``schedule.prev_norm`` must hold the row norms before the update. In
    stage I biases stay at 0 until :func:`detect_stage1_end` fires, which
    resets them to ``bias_reset_coeff * sqrt(2 ln d / d) * |w_i|``.
    Afterwards each bias grows by ``1 + max(floor, |w_i'|/|w_i| - 1)`` as
    long as it sits at or below ``bias_cap_coeff * (ln d)^2 / sqrt(d) * |w_i|``.
    No-aug runs still record the stage boundary but keep all biases at 0.
    """
    d = config.d
    norms = params.row_norms()
    biased = config.mode != NO_AUG
    if schedule.stage == STAGE_I:
        if detect_stage1_end(params, schedule, config):
            schedule.stage = STAGE_II
            schedule.t1_detected_at = schedule.step + 1
            if biased:
                params.b[:] = config.bias_reset_coeff * math.sqrt(2.0 * math.log(d) / d) * norms
            log.info("stage I ended at step %d", schedule.t1_detected_at)
    elif biased:
        cap = config.bias_cap_coeff * math.log(d) ** 2 / math.sqrt(d) * norms
        prev = np.where(schedule.prev_norm > 0, schedule.prev_norm, np.inf)
        rate = np.maximum(config.bias_floor_rate, norms / prev - 1.0)
        params.b[:] = np.where(params.b <= cap, params.b * (1.0 + rate), params.b)
    return params.b


def _check_finite(params, step):
    if not np.all(np.isfinite(params.W)):
        raise DivergenceError(f"non-finite weights after step {step}", step=step)
    peak = float(np.abs(params.W).max())
    if peak > DIVERGENCE_LIMIT:
        raise DivergenceError(f"weights exploded (max |w| = {peak:.3g}) after step {step}", step=step)


def sgd_step(params, config, schedule, problem, inputs=None, grad_override=None):
    """One update ``W <- W - eta * grad`` followed by the bias schedule.

    Mutates ``params`` and ``schedule`` in place and returns the loss at the
    pre-update weights. ``grad_override(params, inputs)`` replaces the data
    gradient (decay is still added); it exists for tests.
    """
    if schedule.step >= config.total_steps:
        raise ValueError("schedule already reached total_steps")
    if inputs is None:
        inputs = draw_step_inputs(config, problem, schedule.step)
    if grad_override is None:
        loss, grad = stacked_loss_and_gradient(params, inputs.x_plus, inputs.x_plusplus, inputs.x_neg, config.tau, config.lam)
    else:
        loss, grad = float("nan"), grad_override(params, inputs) + config.lam * params.W
    _apply(params, config, schedule, grad)
    return loss


def _apply(params, config, schedule, grad):
    schedule.prev_norm = params.row_norms()
    params.W -= config.eta * grad
    _check_finite(params, schedule.step + 1)
    update_bias(params, schedule, config)
    schedule.step += 1


def run_probes(params, config, problem, encoder=None):
    """Regression and classification probes on fixed per-seed draws.

    Both legs of a paired run, and the oracle control, see identical data.
    """
    def stream(i):
        return rngmod.SeededRng(config.seed, rngmod.STREAM_PROBE, i)

    wstar = wstar_sample(config.d, stream(0))
    args = (params, problem.dictionary, problem.lat_cfg, problem.noise_cfg, wstar, config.probe_n_train, config.probe_n_test)
    reg = probe_regression(*args, config.ridge_mu, stream(1), encoder=encoder)
    cls = probe_classification(*args, config.logistic_steps, config.logistic_lr, stream(2), encoder=encoder)
    return reg, cls


def make_record(step, stage, loss, params, config, problem, probe=False):
    stats = alignment_stats(params, problem.dictionary)
    frac = stats.sparse_fraction
    cos = rep_noise_cosine(params, problem.dictionary, problem.lat_cfg, problem.noise_cfg, config.n_eval, rngmod.SeededRng(config.seed, rngmod.STREAM_EVAL, 2 * step))
    act = activation_sparsity(params, problem.dictionary, problem.lat_cfg, problem.noise_cfg, config.n_eval, rngmod.SeededRng(config.seed, rngmod.STREAM_EVAL, 2 * step + 1))
    rec = MetricsRecord(
        step=step,
        stage=stage,
        loss=loss,
        sparse_fraction=stats.pooled_sparse_fraction,
        sparse_fraction_mean=float(frac.mean()),
        sparse_fraction_min=float(frac.min()),
        sparse_fraction_max=float(frac.max()),
        coverage=stats.coverage,
        singleton_mean=float(stats.singleton_score.mean()),
        structured_fraction=stats.structured_fraction(),
        rep_noise_cosine=cos.mean,
        zero_rep_count=cos.n_zero,
        activation_sparsity=act,
        weight_norm=float(np.linalg.norm(params.W)),
        bias_mean=float(params.b.mean()),
    )
    if probe:
        reg, cls = run_probes(params, config, problem)
        rec.probe_mse = reg.score
        rec.probe_mse_normalized = reg.normalized_mse
        rec.probe_accuracy = cls.score
        rec.probe_converged = cls.converged
    return rec


def write_stage1_energy(path, rows):
    with open(path, "w") as fh:
        fh.write("step,sparse_energy,dense_energy\n")
        for t, sparse, dense in rows:
            fh.write(f"{t},{sparse!r},{dense!r}\n")


def read_stage1_energy(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return [(int(t), float(s), float(n)) for t, s, n in data]


def dump_pca(path, params, config, problem):
    """PCA of representations for ``n_eval`` probe-stream samples, labelled by ``sign(<w*, z>)``."""
    wstar = wstar_sample(config.d, rngmod.SeededRng(config.seed, rngmod.STREAM_PROBE, 0))
    s = sample_inputs(problem.dictionary, problem.lat_cfg, problem.noise_cfg, config.n_eval, rngmod.SeededRng(config.seed, rngmod.STREAM_PROBE, 3))
    write_pca_csv(path, forward(params, s.x).rep, labels=np.sign(s.z @ wstar))


class _Writer:
    # appends records to trajectory.jsonl as they are produced
    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.fh = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            self.fh = open(os.path.join(out_dir, "trajectory.jsonl"), "w")

    def record(self, payload):
        if self.fh is not None:
            self.fh.write(json.dumps(payload))
            self.fh.write("\n")
            self.fh.flush()

    def checkpoint(self, step, params):
        if self.out_dir is None:
            return None
        path = os.path.join(self.out_dir, f"ckpt_{step}.bin")
        save_checkpoint(path, params)
        return path

    def close(self):
        if self.fh is not None:
            self.fh.close()


def train(config, out_dir=None, problem=None, callback=None):
    """Run ``total_steps`` SGD steps and return the :class:`Trajectory`.

    With ``out_dir`` the run writes ``trajectory.jsonl``, ``dictionary.csv``,
    ``ckpt_{step}.bin``, ``pca_{step}.csv`` (at probe steps) and
    ``stage1_energy.csv`` (per-step sparse/dense energy during stage I). ``callback(params, schedule)`` is called
    after every update. On divergence the partial trajectory is attached to
    the raised :class:`DivergenceError` and a diagnostic line is logged.
    """
    config.validate()
    if problem is None:
        problem = Problem.from_config(config)
    params = init_params(config.m, config.d1, InitConfig(config.sigma0_sq), rngmod.SeededRng(config.seed, rngmod.STREAM_INIT))
    schedule = ScheduleState(step=0, stage=STAGE_I, prev_norm=params.row_norms())
    traj = Trajectory(params=params)
    writer = _Writer(out_dir)
    if out_dir is not None:
        write_dictionary_csv(os.path.join(out_dir, "dictionary.csv"), problem.dictionary)
    probe_steps = config.probe_steps()
    ckpt_steps = config.checkpoint_steps()
    M = problem.dictionary.M
    try:
        for t in range(config.total_steps + 1):
            inputs = draw_step_inputs(config, problem, t)
            loss, grad = stacked_loss_and_gradient(params, inputs.x_plus, inputs.x_plusplus, inputs.x_neg, config.tau, config.lam)
            if schedule.stage == STAGE_I:
                sparse = float(np.sum((params.W @ M) ** 2))
                traj.stage1_energy.append((t, sparse, float(np.sum(params.W**2)) - sparse))
            if t % config.log_every == 0 or t == config.total_steps or t in probe_steps:
                rec = make_record(t, schedule.stage, loss, params, config, problem, probe=t in probe_steps)
                traj.append(rec)
                writer.record(rec.to_dict())
                if out_dir is not None and t in probe_steps:
                    dump_pca(os.path.join(out_dir, f"pca_{t}.csv"), params, config, problem)
            if t in ckpt_steps:
                traj.checkpoints[t] = writer.checkpoint(t, params)
            if t == config.total_steps:
                break
            _apply(params, config, schedule, grad)
            if callback is not None:
                callback(params, schedule)
    except DivergenceError as exc:
        traj.outcome = "diverged"
        traj.t1 = schedule.t1_detected_at
        writer.record({"step": exc.step, "diverged": True, "message": str(exc)})
        exc.trajectory = traj
        raise
    finally:
        writer.close()
    traj.t1 = schedule.t1_detected_at
    if out_dir is not None:
        write_stage1_energy(os.path.join(out_dir, "stage1_energy.csv"), traj.stage1_energy)
    return traj
