"""Training drivers: adversarial adaptive sampling and its baselines.

One adaptive stage alternates j descent steps on the solution network
(batches drawn without replacement from the current training set) with j
ascent steps on the sampler (importance-weighted against the density frozen
at stage start), then regenerates the training set from the updated sampler.
The uniform baseline performs the same number of network steps on a fixed
uniform set; the rank-refinement baseline appends the highest-residual
candidates from a fresh uniform pool after each stage.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, fields

import numpy as np

from . import diagnostics as dg
from . import flow as fl
from . import problems as pb
from .autodiff import Var, parameter_gradient
from .diagnostics import MetricRecord
from .network import SolutionNet
from .objectives import aas_max_objective, aas_min_loss, empirical_pinn_loss

__all__ = ["TrainConfig", "TrainResult", "TrainingAbort", "AdamState",
           "adam_init", "adam_step", "train_aas", "train_uniform_pinn",
           "train_rar", "regenerate_training_set", "RngHub",
           "save_checkpoint", "load_checkpoint", "config_hash"]


class TrainingAbort(RuntimeError):
    """Raised when a run diverges beyond recovery; carries partial results."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass
class TrainConfig:
    problem: str
    stages: int = 100
    j_min: int = 50
    j_max: int = 50
    m: int = 250
    n_r: int = 20_000
    n_b: int = 4_000
    lr_theta: float = 1e-3
    lr_theta_final: float = 0.0  # 0 means constant lr_theta
    lr_alpha: float = 5e-4
    gamma: float = 1.0
    beta: float = 5.0
    beta_decay: float = 1.0
    beta_period: int = 100
    regen: str = "replace"
    seed: int = 0
    net_depth: int = 4
    net_width: int = 48
    flow_layers: int = 6
    flow_width: int = 24
    flow_prior: str = "uniform"
    rar_pool_factor: int = 10
    rar_append: int = 500
    checkpoint_every: int = 10
    scatter_every: int = 1
    resample_boundary: bool = False
    divergence_threshold: float = 1e9
    eval_points: int = 10_000
    error_points: int = 10_000
    out_dir: str = ""

    def validate(self):
        pb.get_problem(self.problem)
        for name in ("stages", "j_min", "j_max", "m", "n_r", "n_b",
                     "beta_period", "rar_pool_factor", "rar_append",
                     "checkpoint_every", "scatter_every", "eval_points",
                     "error_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("lr_theta", "lr_alpha", "gamma", "divergence_threshold"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 < self.beta_decay <= 1.0:
            raise ValueError("beta_decay must lie in (0, 1]")
        if self.regen not in ("replace", "augment"):
            raise ValueError("regen must be 'replace' or 'augment'")
        if self.flow_prior not in ("uniform", "gaussian_mixture"):
            raise ValueError("flow_prior must be 'uniform' or 'gaussian_mixture'")
        if self.net_depth < 1 or self.net_width < 1:
            raise ValueError("network depth and width must be >= 1")
        if self.flow_layers < 1 or self.flow_width < 1:
            raise ValueError("flow layers and width must be >= 1")
        return self


@dataclass
class TrainResult:
    net: SolutionNet
    flow: object
    history: list
    train_set: np.ndarray
    boundary_set: np.ndarray
    theta_steps: int
    alpha_steps: int


def config_hash(config):
    """Stable short hash of the full configuration."""
    payload = json.dumps({f.name: getattr(config, f.name)
                          for f in fields(config)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


# -- deterministic labeled randomness -----------------------------------------


def _label_key(label):
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")


class RngHub:
    """Named random streams derived from one master seed.

    Streams are independent per label, so adding a consumer never shifts
    the draws seen by existing ones.
    """

    def __init__(self, master_seed):
        self.master_seed = int(master_seed)
        self._streams = {}

    def get(self, label):
        if label not in self._streams:
            seq = np.random.SeedSequence([self.master_seed, _label_key(label)])
            self._streams[label] = np.random.Generator(np.random.PCG64(seq))
        return self._streams[label]

    def state(self):
        return {label: gen.bit_generator.state
                for label, gen in self._streams.items()}

    def restore(self, states):
        for label, st in states.items():
            self.get(label).bit_generator.state = st


# -- Adam ----------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


def adam_init(params):
    return AdamState([np.zeros_like(p) for p in params],
                     [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update; returns (new params, new state)."""
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_params.append(p - step)
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


# -- batching -------------------------------------------------------------------


class BatchCycler:
    """Shuffled without-replacement batches, reshuffling on exhaustion."""

    def __init__(self, n, rng):
        self.rng = rng
        self.reset(n)

    def reset(self, n):
        self.n = n
        self.order = self.rng.permutation(n)
        self.pos = 0

    def take(self, m):
        out = []
        need = m
        while need > 0:
            if self.pos >= self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            grab = min(need, self.n - self.pos)
            out.append(self.order[self.pos:self.pos + grab])
            self.pos += grab
            need -= grab
        return np.concatenate(out) if len(out) > 1 else out[0]


def regenerate_training_set(flow, mode, n_r, rng, existing=None):
    """New interior set: fresh flow samples, replacing or augmenting."""
    fresh = fl.sample(flow, n_r, rng)
    if mode == "replace":
        return fresh
    if mode == "augment":
        if existing is None:
            return fresh
        return np.vstack([existing, fresh])
    raise ValueError("mode must be 'replace' or 'augment'")


# -- shared run scaffolding ------------------------------------------------------


class _Run:
    def __init__(self, config, needs_flow):
        config.validate()
        self.config = config
        self.problem = pb.get_problem(config.problem)
        self.hub = RngHub(config.seed)
        widths = ([self.problem.dim]
                  + [config.net_width] * config.net_depth
                  + [self.problem.n_outputs])
        self.net = SolutionNet.init(widths, self.hub.get("net-init"))
        self.flow = None
        if needs_flow:
            self.flow = fl.FlowModel.init(
                self.problem.dim, self.hub.get("flow-init"),
                n_layers=config.flow_layers, cond_width=config.flow_width,
                prior=config.flow_prior)
        self.boundary_set = pb.sample_boundary(self.problem, config.n_b,
                                               self.hub.get("boundary-init"))
        self.eval_set = pb.sample_domain(self.problem, config.eval_points,
                                         self.hub.get("eval-set"))
        self.error_set = pb.sample_domain(self.problem, config.error_points,
                                          self.hub.get("error-set"))
        self.adam_theta = adam_init(self.net.params())
        self.adam_alpha = adam_init(self.flow.params()) if needs_flow else None
        self.history = []
        self.theta_steps = 0
        self.alpha_steps = 0
        self.lr_theta = config.lr_theta
        self.lr_halved = False
        self.t0 = time.perf_counter()

    def error(self):
        if self.problem.error_metric == "grid_mse":
            return dg.grid_mse(self.net, self.problem)
        ref = pb.exact_solution(self.problem, self.error_set)
        diff = self.net.derivatives(self.error_set, order=0).value - ref
        return float(np.sqrt((diff**2).sum() / (ref**2).sum()))

    def stage_metrics(self, stage, min_loss, boundary_loss, max_objective, beta):
        r2 = pb.residual_squared(self.problem, self.net, self.eval_set)
        var_r2 = float(r2.var(ddof=1))
        if r2.max() < 1e-14:
            sliced = 0.0
        else:
            dist = dg.ResidualDistribution(self.eval_set, r2,
                                           float(r2.mean() * 2**self.problem.dim),
                                           r2 / r2.sum())
            rng = np.random.default_rng(7)
            drawn = dg.resample_distribution(dist, 10_000, rng)
            uniform = rng.uniform(-1.0, 1.0, size=(10_000, self.problem.dim))
            sliced = dg.sliced_wasserstein(drawn, uniform, n_proj=64, seed=7)
        rec = MetricRecord(stage, min_loss, boundary_loss, max_objective,
                           self.error(), var_r2, sliced, beta,
                           time.perf_counter() - self.t0)
        self.history.append(rec)
        return rec

    def result(self, train_set):
        return TrainResult(self.net, self.flow, self.history, train_set,
                           self.boundary_set, self.theta_steps, self.alpha_steps)

    def min_step(self, batch, bbatch, loss_fn):
        params = [Var(p) for p in self.net.params()]
        breakdown, total = loss_fn(self.net, self.problem, batch, bbatch,
                                   self.config.gamma, params=params)
        if not np.isfinite(breakdown.total) \
                or breakdown.total > self.config.divergence_threshold:
            return breakdown, False
        grads = parameter_gradient(total, params)
        new_params, self.adam_theta = adam_step(
            self.net.params(), grads, self.adam_theta, self.lr_theta)
        self.net = self.net.with_params(new_params)
        self.theta_steps += 1
        return breakdown, True

    def notify(self, observer, method, *args):
        if observer is not None and hasattr(observer, method):
            getattr(observer, method)(*args)

    def snapshot(self, train_set, cyclers):
        return {
            "net": [p.copy() for p in self.net.params()],
            "flow": ([p.copy() for p in self.flow.params()]
                     if self.flow is not None else None),
            "adam_theta": AdamState([m.copy() for m in self.adam_theta.m],
                                    [v.copy() for v in self.adam_theta.v],
                                    self.adam_theta.t),
            "adam_alpha": (AdamState([m.copy() for m in self.adam_alpha.m],
                                     [v.copy() for v in self.adam_alpha.v],
                                     self.adam_alpha.t)
                           if self.adam_alpha is not None else None),
            "rng": self.hub.state(),
            "train_set": train_set.copy(),
            "cyclers": [(c.n, c.order.copy(), c.pos) for c in cyclers],
        }

    def restore(self, snap, cyclers):
        self.net = self.net.with_params(snap["net"])
        if snap["flow"] is not None:
            self.flow = self.flow.with_params(snap["flow"])
        self.adam_theta = snap["adam_theta"]
        if snap["adam_alpha"] is not None:
            self.adam_alpha = snap["adam_alpha"]
        self.hub.restore(snap["rng"])
        for cyc, (n, order, pos) in zip(cyclers, snap["cyclers"]):
            cyc.n, cyc.order, cyc.pos = n, order.copy(), pos
        return snap["train_set"].copy()

    def handle_divergence(self, breakdown, snap, cyclers, observer):
        """Halve the network rate once and replay the stage; then give up."""
        if not self.lr_halved:
            self.lr_halved = True
            self.lr_theta = 0.5 * self.lr_theta
            return self.restore(snap, cyclers)
        self.notify(observer, "on_abort", self)
        raise TrainingAbort(
            f"minimization loss diverged ({breakdown.total:.3e}) after a "
            f"learning-rate halving", self.result(snap["train_set"]))


# -- trainers ---------------------------------------------------------------------


def train_aas(config, observer=None):
    """Alternating min/max training with stage-wise set regeneration."""
    run = _Run(config, needs_flow=True)
    cfg = config
    train_set = fl.sample(run.flow, cfg.n_r, run.hub.get("flow-sample"))
    cyc_int = BatchCycler(len(train_set), run.hub.get("batch-shuffle"))
    cyc_bnd = BatchCycler(cfg.n_b, run.hub.get("boundary-shuffle"))
    run.notify(observer, "on_start", run, train_set)

    stage = 0
    while stage < cfg.stages:
        snap = run.snapshot(train_set, [cyc_int, cyc_bnd])
        beta_k = cfg.beta * cfg.beta_decay ** (stage // cfg.beta_period)

        min_acc, bnd_acc = [], []
        diverged = False
        for _ in range(cfg.j_min):
            batch = train_set[cyc_int.take(cfg.m)]
            bbatch = run.boundary_set[cyc_bnd.take(cfg.m)]
            breakdown, ok = run.min_step(batch, bbatch, aas_min_loss)
            if not ok:
                train_set = run.handle_divergence(breakdown, snap,
                                                  [cyc_int, cyc_bnd], observer)
                diverged = True
                break
            min_acc.append(breakdown.interior + cfg.gamma * breakdown.boundary)
            bnd_acc.append(breakdown.boundary)
        if diverged:
            continue  # replay the same stage with the halved rate

        flow_ref = run.flow.copy()
        max_acc = []
        probe = train_set[cyc_int.take(cfg.m)]
        probe_r2 = pb.residual_squared(run.problem, run.net, probe)
        if probe_r2.max() >= 1e-14:
            for _ in range(cfg.j_max):
                batch = train_set[cyc_int.take(cfg.m)]
                fparams = [Var(p) for p in run.flow.params()]
                breakdown, total = aas_max_objective(
                    run.flow, flow_ref, run.net, run.problem, batch, beta_k,
                    params=fparams)
                grads = parameter_gradient(total, fparams)
                ascent = [-g for g in grads]
                new_params, run.adam_alpha = adam_step(
                    run.flow.params(), ascent, run.adam_alpha, cfg.lr_alpha)
                run.flow = run.flow.with_params(new_params)
                run.alpha_steps += 1
                max_acc.append(breakdown.total)

        check = fl.sample(run.flow, 256, run.hub.get("invert-probe"))
        z, _ = fl.forward(run.flow, check)
        gap = float(np.abs(fl.inverse(run.flow, z) - check).max())
        if gap > 1e-4:
            run.notify(observer, "on_abort", run)
            raise TrainingAbort(f"flow invertibility violated (gap {gap:.2e})",
                                run.result(train_set))

        train_set = regenerate_training_set(
            run.flow, cfg.regen, cfg.n_r, run.hub.get("flow-sample"),
            existing=train_set)
        cyc_int.reset(len(train_set))
        if cfg.resample_boundary:
            run.boundary_set = pb.sample_boundary(
                run.problem, cfg.n_b, run.hub.get("boundary-resample"))

        rec = run.stage_metrics(stage, float(np.mean(min_acc)),
                                float(np.mean(bnd_acc)),
                                float(np.mean(max_acc)) if max_acc else 0.0,
                                beta_k)
        run.notify(observer, "on_stage", run, rec, train_set)
        stage += 1
    return run.result(train_set)


def _baseline_loop(config, observer, refine=None):
    run = _Run(config, needs_flow=False)
    cfg = config
    train_set = pb.sample_domain(run.problem, cfg.n_r,
                                 run.hub.get("domain-init"))
    cyc_int = BatchCycler(len(train_set), run.hub.get("batch-shuffle"))
    cyc_bnd = BatchCycler(cfg.n_b, run.hub.get("boundary-shuffle"))
    run.notify(observer, "on_start", run, train_set)

    stage = 0
    while stage < cfg.stages:
        snap = run.snapshot(train_set, [cyc_int, cyc_bnd])
        min_acc, bnd_acc = [], []
        diverged = False
        for _ in range(cfg.j_min):
            batch = train_set[cyc_int.take(cfg.m)]
            bbatch = run.boundary_set[cyc_bnd.take(cfg.m)]
            breakdown, ok = run.min_step(batch, bbatch, empirical_pinn_loss)
            if not ok:
                train_set = run.handle_divergence(breakdown, snap,
                                                  [cyc_int, cyc_bnd], observer)
                diverged = True
                break
            min_acc.append(breakdown.interior + cfg.gamma * breakdown.boundary)
            bnd_acc.append(breakdown.boundary)
        if diverged:
            continue

        if refine is not None:
            train_set = refine(run, train_set)
            cyc_int.reset(len(train_set))

        rec = run.stage_metrics(stage, float(np.mean(min_acc)),
                                float(np.mean(bnd_acc)), 0.0, 0.0)
        run.notify(observer, "on_stage", run, rec, train_set)
        stage += 1
    return run.result(train_set)


def train_uniform_pinn(config, observer=None):
    """Fixed uniform training set; same network step budget as train_aas."""
    return _baseline_loop(config, observer)


def train_rar(config, observer=None):
    """Residual-rank refinement: append worst pool points after each stage."""

    def refine(run, train_set):
        pool = pb.sample_domain(run.problem,
                                config.rar_pool_factor * config.n_r,
                                run.hub.get("rar-pool"))
        r2 = pb.residual_squared(run.problem, run.net, pool)
        top = np.argsort(-r2, kind="stable")[:config.rar_append]
        return np.vstack([train_set, pool[top]])

    return _baseline_loop(config, observer, refine=refine)


# -- checkpoints -------------------------------------------------------------------


CHECKPOINT_VERSION = 1


def run_state(run, stage):
    """Serializable snapshot of a live run (for checkpoints)."""
    state = {"stage": stage, "lr_theta": run.lr_theta, "rng": run.hub.state(),
             "net": run.net.params(),
             "flow": run.flow.params() if run.flow is not None else None,
             "adam_theta_m": run.adam_theta.m,
             "adam_theta_v": run.adam_theta.v,
             "adam_theta_t": run.adam_theta.t}
    if run.adam_alpha is not None:
        state.update(adam_alpha_m=run.adam_alpha.m,
                     adam_alpha_v=run.adam_alpha.v,
                     adam_alpha_t=run.adam_alpha.t)
    return state


def save_checkpoint(path, config, state):
    """Versioned binary record of parameters, moments and random state."""
    arrays = {}
    meta = {"version": CHECKPOINT_VERSION,
            "config_hash": config_hash(config),
            "stage": state["stage"],
            "lr_theta": state["lr_theta"],
            "rng": state["rng"]}
    for group in ("net", "flow", "adam_theta_m", "adam_theta_v",
                  "adam_alpha_m", "adam_alpha_v"):
        for i, arr in enumerate(state.get(group) or []):
            arrays[f"{group}_{i}"] = arr
    meta["adam_theta_t"] = state["adam_theta_t"]
    meta["adam_alpha_t"] = state.get("adam_alpha_t", 0)
    arrays["meta_json"] = np.frombuffer(
        json.dumps(meta).encode(), dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def load_checkpoint(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta_json"].tobytes()).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        out = dict(meta)
        for group in ("net", "flow", "adam_theta_m", "adam_theta_v",
                      "adam_alpha_m", "adam_alpha_v"):
            arrs = []
            i = 0
            while f"{group}_{i}" in data:
                arrs.append(data[f"{group}_{i}"])
                i += 1
            out[group] = arrs
    return out
