"""Episodic contact-safe MBRL with one-step-ahead planning.

Per trial: reset, plan from the first observation, then at every step apply
the first control of the latest plan, record the sample, predict the next
belief with the model and plan from that prediction while the step executes.
The model is refit on all samples after each trial.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np

from . import lgm
from .fastfood import build_stack
from .moment_matching import BeliefState, propagate
from .pmpc import LossSpec, PlanningFailedError, SolverConfig, plan, with_sample_count
from .safe_limits import SafetyParams, UncertaintySource, limits_batch
from .sim_env import ArmConfig, ArmSim, SimulationDivergedError, forward_kinematics, home_state, observe, reference

log = logging.getLogger(__name__)

ACQUISITION_THRESHOLD = 0.02  # m
TOP_FRACS = (0.03, 0.05, 0.10)


class Mode(str, enum.Enum):
    UNSAFE_BASELINE1 = "unsafe_baseline1"
    GLOBAL_BASELINE2 = "global_baseline2"
    CONTACT_SAFE = "contact_safe"

    @classmethod
    def parse(cls, value: str) -> "Mode":
        aliases = {"baseline1": cls.UNSAFE_BASELINE1, "baseline2": cls.GLOBAL_BASELINE2, "safe": cls.CONTACT_SAFE}
        return aliases.get(value) or cls(value)


@dataclass(frozen=True)
class ModelConfig:
    num_features: int = 65
    noise_var: float = 1e-2
    signal_var: float = 1.0
    lengthscale: float = 1.0
    hyper_schedule: str = "doubling"     # "doubling" | "every" | "never"
    grid: lgm.GridSpec = field(default_factory=lgm.GridSpec)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: Mode = Mode.CONTACT_SAFE
    n_trial: int = 12
    l_step: int = 100
    ln_alpha_s: float | None = 6.0
    ln_alpha_t: float | None = 6.0
    beta_s: float = 0.3
    gamma_t: float = 0.2
    u_min: tuple[float, float] = (-0.2, -0.2)
    u_max: tuple[float, float] = (0.2, 0.2)
    k_s: float = 1.0
    k_o: float = 1.0
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    arm: ArmConfig = field(default_factory=ArmConfig)

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode.parse(self.mode) if isinstance(self.mode, str) else self.mode)
        if self.n_trial < 1 or self.l_step < 1:
            raise ValueError("n_trial and l_step must be >= 1")
        if not math.isclose(self.solver.dt, self.arm.dt):
            raise ValueError("planner dt and simulator dt must agree")

    def safety(self) -> SafetyParams:
        common = dict(beta_s=self.beta_s, gamma_t=self.gamma_t,
                      u_min_base=tuple(self.u_min), u_max_base=tuple(self.u_max))
        if self.mode is Mode.UNSAFE_BASELINE1:
            return SafetyParams(alpha_s=0.0, alpha_t=0.0, **common)
        src = UncertaintySource.GLOBAL if self.mode is Mode.GLOBAL_BASELINE2 else UncertaintySource.MODEL
        return SafetyParams.from_log_alphas(self.ln_alpha_s, self.ln_alpha_t, uncertainty_source=src, **common)


@dataclass
class StepRecord:
    trial: int
    step: int
    time: float                      # s, time at which the control is applied
    control: list[float]             # applied control
    state: list[float]               # observed belief mean s_j
    next_state: list[float]          # observed y_j
    tracking_error: float            # m, after the step
    contact_force: float             # N, peak wall force during the step
    k_s: float
    sigma_p: float                   # uncertainty behind the applied box
    box_min: list[float]
    box_max: list[float]
    plan_step: int                   # step during which the applied plan was computed (0 = pre-trial)
    plan_seed: int
    plan_input_mean: list[float]
    plan_input_var: list[float]
    plan_failed: bool
    plan_controls: list[list[float]] | None   # full H-step sequence of the applied plan
    plan_wall_time: float            # s


@dataclass
class TrialLog:
    trial: int
    steps: list[StepRecord]
    num_samples: int
    failed: bool = False
    hyperparameters: dict = field(default_factory=dict)

    @property
    def mean_tracking_error(self) -> float:
        return float(np.mean([r.tracking_error for r in self.steps])) if self.steps else math.inf

    @property
    def mean_k_s(self) -> float:
        return float(np.mean([r.k_s for r in self.steps])) if self.steps else math.nan

    @property
    def forces(self) -> np.ndarray:
        return np.array([r.contact_force for r in self.steps])


def _plan_seed(cfg: ExperimentConfig, trial: int, step: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, cfg.solver.seed, trial, step]).generate_state(1)[0])


def _should_select(trial: int, schedule: str) -> bool:
    if schedule == "every":
        return True
    if schedule == "never":
        return False
    return trial >= 1 and (trial & (trial - 1)) == 0


@dataclass
class ExperimentResult:
    logs: list[TrialLog]
    models: list[lgm.LgmModel]       # model used during trial n (index n-1)


def run_experiment(cfg: ExperimentConfig, keep_models: bool = False) -> ExperimentResult | list[TrialLog]:
    arm = cfg.arm
    kin = partial(forward_kinematics, cfg=arm)
    loss_spec = LossSpec(partial(reference, cfg=arm), cfg.k_s, cfg.k_o)
    base_safety = cfg.safety()
    mc = cfg.model
    D, U = 6, 2
    dataset = lgm.TrainingDataset.empty(D + U, D)
    base_stack = build_stack(D + U, mc.num_features, 1.0, cfg.seed)
    hyp = lgm.Hyperparameters(np.full(D, mc.noise_var), np.full(D, mc.signal_var),
                              np.full(D + U, mc.lengthscale))
    model = lgm.fit(dataset, base_stack.with_lengthscales(hyp.lengthscales), hyp.noise_vars, hyp.signal_vars)
    sim = ArmSim(arm, seed=cfg.seed)
    dt = cfg.solver.dt
    logs: list[TrialLog] = []
    models: list[lgm.LgmModel] = []
    stats: dict = {}

    for trial in range(1, cfg.n_trial + 1):
        safety = with_sample_count(base_safety, model.num_samples)
        models.append(model)
        state = home_state(arm)
        records: list[StepRecord] = []
        failed = False

        def make_plan(s_in: BeliefState, t_in: float, step: int, warm):
            seed = _plan_seed(cfg, trial, step)
            t0 = time.perf_counter()
            try:
                p = plan(model, s_in, loss_spec, safety, cfg.solver, kin, t_in,
                         warm_start=warm, seed=seed, stats=stats)
                u, ks, unc, box = p.first, float(p.k_s[0]), float(p.uncertainty[0]), p.boxes[0]
                ok = True
                warm_next = p.controls
            except PlanningFailedError:
                log.info("trial %d step %d: planning failed, applying zero control", trial, step)
                lo, hi, ks_arr = limits_batch(safety, s_in.position_var[None], s_in.velocity_mean[None])
                u = np.zeros(U)
                ks, unc = float(ks_arr[0]), float(np.max(s_in.position_var))
                box = np.stack([lo[0], hi[0]])
                ok = False
                warm_next = None
            return dict(u=u, k_s=ks, unc=unc, box=box, step=step, seed=seed, s_in=s_in,
                        controls=None if warm_next is None else warm_next.tolist(),
                        failed=not ok, wall=time.perf_counter() - t0, warm=warm_next)

        s1 = BeliefState.exact(observe(state))
        pending = make_plan(s1, state.t, 0, None)
        for j in range(1, cfg.l_step + 1):
            s_j = observe(state)
            u = pending["u"]
            try:
                nxt, event = sim.step(state, u)
            except SimulationDivergedError as exc:
                log.warning("trial %d aborted: %s", trial, exc)
                failed = True
                break
            sample = np.concatenate([s_j, u])
            s_pred = propagate(model, BeliefState.exact(s_j), u, stats)
            upcoming = make_plan(s_pred, state.t + dt, j, pending["warm"])
            y_j = observe(nxt)
            dataset = dataset.append(sample, y_j)
            p_ref, _ = reference(nxt.t, arm)
            p_tip, _ = forward_kinematics(nxt.theta, arm)
            records.append(StepRecord(
                trial=trial, step=j, time=round(state.t, 10), control=u.tolist(), state=s_j.tolist(),
                next_state=y_j.tolist(), tracking_error=float(np.linalg.norm(p_tip - p_ref)),
                contact_force=float(event.force) if event else 0.0,
                k_s=pending["k_s"], sigma_p=pending["unc"],
                box_min=np.asarray(pending["box"][0]).tolist(), box_max=np.asarray(pending["box"][1]).tolist(),
                plan_step=pending["step"], plan_seed=pending["seed"],
                plan_input_mean=pending["s_in"].mean.tolist(), plan_input_var=pending["s_in"].var.tolist(),
                plan_failed=pending["failed"], plan_controls=pending["controls"],
                plan_wall_time=pending["wall"]))
            state = nxt
            pending = upcoming

        hyp_info = {}
        if _should_select(trial, mc.hyper_schedule) and len(dataset):
            grid = replace(mc.grid, num_features=mc.num_features, seed=cfg.seed,
                           initial_lengthscales=tuple(hyp.lengthscales))
            hyp = lgm.select_hyperparameters(dataset, grid)
            hyp_info = {"noise_vars": hyp.noise_vars.tolist(), "signal_vars": hyp.signal_vars.tolist(),
                        "lengthscales": hyp.lengthscales.tolist()}
        model = lgm.fit(dataset, base_stack.with_lengthscales(hyp.lengthscales), hyp.noise_vars, hyp.signal_vars)
        logs.append(TrialLog(trial, records, len(dataset), failed, hyp_info))
        log.info("trial %d: mean error %.4f m, mean K_s %.3f, N=%d", trial,
                 logs[-1].mean_tracking_error, logs[-1].mean_k_s, len(dataset))

    if stats.get("clamped"):
        log.info("variance clamp events: %d", stats["clamped"])
    if keep_models:
        return ExperimentResult(logs, models)
    return logs


def verify_ahead_planning(cfg: ExperimentConfig, trials: list[list[dict]],
                          models: list[lgm.LgmModel], replan: bool = True) -> list[str]:
    """Replay logged steps against the per-trial models.

    Checks, for every step ``j``, that the applied plan was computed during
    step ``j - 1`` from ``f_d`` of the previous sample (``s_1`` for the first
    step) and, with ``replan``, that re-running the planner on that input with
    the logged seed and warm start reproduces the applied control bit for bit.
    Returns one message per violation.
    """
    arm = cfg.arm
    kin = partial(forward_kinematics, cfg=arm)
    loss_spec = LossSpec(partial(reference, cfg=arm), cfg.k_s, cfg.k_o)
    problems = []
    for n, (records, model) in enumerate(zip(trials, models), start=1):
        safety = with_sample_count(cfg.safety(), model.num_samples)
        prev = None
        for r in records:
            j = r["step"]
            tag = f"trial {n} step {j}"
            if r["plan_step"] != j - 1:
                problems.append(f"{tag}: plan computed at step {r['plan_step']}, expected {j - 1}")
            if prev is None:
                expected = BeliefState.exact(r["state"])
            else:
                expected = propagate(model, BeliefState.exact(prev["state"]), prev["control"])
            got_mean, got_var = np.asarray(r["plan_input_mean"]), np.asarray(r["plan_input_var"])
            if not (np.array_equal(got_mean, expected.mean) and np.array_equal(got_var, expected.var)):
                problems.append(f"{tag}: plan input is not the one-step prediction of the previous sample")
            if replan:
                warm = None if prev is None or prev["plan_controls"] is None else np.asarray(prev["plan_controls"])
                try:
                    u = plan(model, expected, loss_spec, safety, cfg.solver, kin, r["time"],
                             warm_start=warm, seed=r["plan_seed"]).first
                except PlanningFailedError:
                    u = np.zeros(len(r["control"]))
                if not np.array_equal(u, np.asarray(r["control"])):
                    problems.append(f"{tag}: re-planned control {u} differs from applied {r['control']}")
            prev = r
    return problems


def _top_mean(forces: np.ndarray, frac: float) -> float:
    if forces.size == 0:
        return 0.0
    k = max(1, int(math.ceil(frac * forces.size - 1e-9)))
    return float(np.mean(np.sort(forces)[::-1][:k]))


def aggregate_metrics(logs: list[TrialLog], top_fracs=TOP_FRACS) -> dict:
    """Per-trial mean tracking error / K_s, run-level top-k% forces and acquisition trial."""
    errors = [t.mean_tracking_error for t in logs]
    forces = np.concatenate([t.forces for t in logs]) if logs else np.zeros(0)
    acq = next((t.trial for t in logs if t.mean_tracking_error < ACQUISITION_THRESHOLD), None)
    return {
        "trial_mean_tracking_error_m": errors,
        "trial_mean_k_s": [t.mean_k_s for t in logs],
        "trial_max_force_N": [float(t.forces.max()) if t.forces.size else 0.0 for t in logs],
        "trial_num_samples": [t.num_samples for t in logs],
        "top_force_N": {f"{round(100 * f)}%": _top_mean(forces, f) for f in top_fracs},
        "acquisition_trial": acq,
        "failed_trials": [t.trial for t in logs if t.failed],
    }


def write_logs(logs: list[TrialLog], run_dir, extra: dict | None = None) -> dict:
    """One JSON line per step in ``trial_<n>.log`` plus a ``summary.log`` record."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    for t in logs:
        with open(run_dir / f"trial_{t.trial}.log", "w") as fh:
            for r in t.steps:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    summary = dict(extra or {})
    summary.update(aggregate_metrics(logs))
    with open(run_dir / "summary.log", "w") as fh:
        fh.write(json.dumps(summary, sort_keys=True) + "\n")
    return summary


def read_trial_logs(run_dir) -> list[list[dict]]:
    run_dir = Path(run_dir)
    out = []
    n = 1
    while (run_dir / f"trial_{n}.log").exists():
        with open(run_dir / f"trial_{n}.log") as fh:
            out.append([json.loads(line) for line in fh if line.strip()])
        n += 1
    return out
