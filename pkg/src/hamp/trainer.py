"""Node-classification training: input map, dynamics unroll, MLP classifier, Adam."""

from __future__ import annotations

import copy
import dataclasses
import itertools
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dynamics import (
    DivergenceError,
    DynamicsParams,
    MessageParams,
    NodeState,
    diffusion_step,
    hamp1_step,
    hamp2_step,
    initial_velocity,
)
from .hypergraph import Hypergraph, LabeledDataset, load_hypergraph, propagation_operator
from .io import atomic_write_csv
from .metrics import EnergyTrace, accuracy, trace_record
from .optim import AdamState, adam_step
from .synth import SynthSpec, generate

log = logging.getLogger("hamp")

MODES = ("hamp1", "hamp2", "diffusion")
DATASET_KEYS = ("hypergraph", "features", "labels", "train", "val", "test")


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


# -- configuration ----------------------------------------------------------------------


@dataclass
class TrainConfig:
    mode: str = "hamp1"
    dynamics: DynamicsParams = field(default_factory=DynamicsParams)
    steps: Optional[int] = None
    hidden_dim: int = 32
    classifier_hidden: int = 32
    classifier_layers: int = 2
    dropout: float = 0.0
    epochs: int = 500
    patience: int = 50
    lr: float = 1e-3
    seeds: list = field(default_factory=lambda: [0])
    dataset: Optional[dict] = None
    synthetic: Optional[dict] = None
    learn_coefficients: bool = True
    self_loops: bool = False
    gate_norm: str = "sym"
    gate_hidden: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.dynamics, dict):
            self.dynamics = _build(DynamicsParams, self.dynamics, "dynamics")
        if self.steps is not None:
            if self.steps < 1:
                raise ConfigError("steps must be >= 1")
            self.dynamics = dataclasses.replace(self.dynamics, total_time=self.steps * self.dynamics.tau)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 1 <= self.patience <= self.epochs:
            raise ConfigError(f"patience must lie in [1, epochs={self.epochs}], got {self.patience}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.hidden_dim < 1 or self.classifier_hidden < 1 or self.classifier_layers < 1:
            raise ConfigError("dimensions and layer counts must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        if self.gate_norm not in ("sym", "mean"):
            raise ConfigError("gate_norm must be 'sym' or 'mean'")
        if self.dataset is not None:
            unknown = set(self.dataset) - set(DATASET_KEYS)
            if unknown:
                raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
            if "hypergraph" not in self.dataset:
                raise ConfigError("dataset.hypergraph is required")
        if self.synthetic is not None:
            _build(SynthSpec, self.synthetic, "synthetic")

    @property
    def num_steps(self) -> int:
        return self.dynamics.num_steps

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["steps"] = self.num_steps
        return out

    def replace(self, **changes) -> "TrainConfig":
        dyn = changes.pop("dynamics", None)
        new = copy.deepcopy(self)
        if dyn is not None:
            new.dynamics = dataclasses.replace(new.dynamics, **dyn) if isinstance(dyn, dict) else dyn
        for k, v in changes.items():
            if not hasattr(new, k):
                raise ConfigError(f"unknown config key {k!r}")
            setattr(new, k, v)
        if new.steps is not None:
            new.dynamics = dataclasses.replace(new.dynamics, total_time=new.steps * new.dynamics.tau)
        new.validate()
        return new


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    vals = dict(values)
    if "split" in vals:
        vals["split"] = tuple(vals["split"])
    try:
        return cls(**vals)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where}: {e}") from None


def config_from_dict(raw: dict, base_dir=None) -> TrainConfig:
    """Build a config from a JSON object, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    raw = dict(raw)
    if raw.get("dataset") and base_dir is not None:
        raw["dataset"] = {k: str((Path(base_dir) / v) if not Path(v).is_absolute() else v)
                          for k, v in raw["dataset"].items()}
    try:
        return TrainConfig(**raw)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(raw, base_dir=path.parent)


def load_data(config: TrainConfig) -> LabeledDataset:
    """Load the file dataset named in the config, or generate the synthetic one."""
    if config.dataset is not None:
        ds = config.dataset
        splits = {k: ds[k] for k in ("train", "val", "test")} if "train" in ds else None
        data = load_hypergraph(ds["hypergraph"], ds.get("features"), ds.get("labels"), splits)
        if data.features is None or data.labels is None or data.split is None:
            raise ConfigError("training needs features, labels and train/val/test split files")
        return data
    spec = _build(SynthSpec, config.synthetic or {}, "synthetic")
    return generate(spec).dataset


# -- model ------------------------------------------------------------------------------


def _glorot(rng, fan_in, fan_out, name):
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)), requires_grad=True, name=name)


def _bias(n, name):
    return Tensor(np.zeros((1, n)), requires_grad=True, name=name)


class HampModel:
    """Linear input map, dynamics unroll and MLP classifier with named parameters."""

    def __init__(self, config: TrainConfig, in_dim: int, num_classes: int, h: Hypergraph,
                 rng: np.random.Generator):
        self.config = config
        self.h = h.with_isolated_self_loops() if config.self_loops else h
        self.dp = config.dynamics
        c = config.hidden_dim
        self.params: dict = {}
        self._add(_glorot(rng, in_dim, c, "input.w"), _bias(c, "input.b"))
        self.mp = None
        self.P = None
        if config.mode == "diffusion":
            self.P = propagation_operator(self.h)
        else:
            self.mp = MessageParams.init(c, rng, gamma=self.dp.gamma, gate_hidden=config.gate_hidden,
                                         norm=config.gate_norm)
            self._add(*self.mp.tensors().values())
            if config.mode == "hamp2":
                self._add(_glorot(rng, c, c, "velocity.w"), _bias(c, "velocity.b"))
            self.delta = self._coefficient("coef.delta", self.dp.delta)
            self.epsilon = self._coefficient("coef.epsilon", self.dp.epsilon)
        widths = [c] + [config.classifier_hidden] * (config.classifier_layers - 1) + [num_classes]
        self.classifier = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            w, bias = _glorot(rng, a, b, f"cls.{i}.w"), _bias(b, f"cls.{i}.b")
            self._add(w, bias)
            self.classifier.append((w, bias))

    def _add(self, *tensors):
        for t in tensors:
            if t.name in self.params:
                raise ValueError(f"duplicate parameter name {t.name}")
            self.params[t.name] = t

    def _coefficient(self, name, value):
        if self.config.learn_coefficients and value != 0:
            t = Tensor(np.full((1, 1), float(value)), requires_grad=True, name=name)
            self._add(t)
            return t
        return float(value)

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v

    def embed(self, x, training: bool = False, dropout_rng=None, noise_rng=None,
              on_step: Optional[Callable] = None) -> Tensor:
        """Input map followed by the dynamics unroll; returns X(T)."""
        cfg, dp = self.config, self.dp
        drop = cfg.dropout if training else 0.0
        x0 = ad.add(ad.as_tensor(x) @ self.params["input.w"], self.params["input.b"])
        if drop:
            x0 = ad.dropout(x0, drop, dropout_rng)
        steps = dp.num_steps
        if on_step:
            on_step(0, x0.data)
        if cfg.mode == "diffusion":
            cur = x0
            for s in range(1, steps + 1):
                cur = diffusion_step(cur, self.P, dp.tau)
                if not np.isfinite(cur.data).all():
                    raise DivergenceError(s)
                if on_step:
                    on_step(s, cur.data)
            return cur
        kw = dict(delta=self.delta, epsilon=self.epsilon, dropout=drop, dropout_rng=dropout_rng)
        if cfg.mode == "hamp1":
            state = NodeState.first_order(x0)
            stepper = hamp1_step
        else:
            v0 = initial_velocity(x0, self.params["velocity.w"], self.params["velocity.b"])
            state = NodeState.second_order(x0, v0)
            stepper = hamp2_step
        for s in range(1, steps + 1):
            state = stepper(state, self.h, self.mp, dp, noise_rng, **kw)
            if on_step:
                on_step(s, state.x.data)
        return state.x

    def classify(self, z: Tensor, training: bool = False, dropout_rng=None) -> Tensor:
        drop = self.config.dropout if training else 0.0
        for i, (w, b) in enumerate(self.classifier):
            if i:
                z = ad.relu(z)
                if drop:
                    z = ad.dropout(z, drop, dropout_rng)
            z = ad.add(z @ w, b)
        return z

    def forward(self, x, training: bool = False, dropout_rng=None, noise_rng=None, on_step=None) -> Tensor:
        z = self.embed(x, training, dropout_rng, noise_rng, on_step)
        return self.classify(z, training, dropout_rng)


# -- results ---------------------------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    test_acc: float = float("nan")
    val_acc: float = float("nan")
    best_epoch: int = -1
    epochs_run: int = 0
    epoch_seconds: float = float("nan")
    losses: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)
    failed: bool = False
    error: str = ""
    trace: Optional[EnergyTrace] = None
    params: Optional[dict] = None

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("seed", "test_acc", "val_acc", "best_epoch", "epochs_run",
                                            "epoch_seconds", "failed", "error")}
        d["losses"] = list(self.losses)
        d["val_curve"] = list(self.val_curve)
        return d


@dataclass
class RunResult:
    seeds: list

    @property
    def successful(self) -> list:
        return [s for s in self.seeds if not s.failed]

    @property
    def accuracies(self) -> list:
        return [s.test_acc for s in self.successful]

    @property
    def num_failed(self) -> int:
        return sum(s.failed for s in self.seeds)

    @property
    def mean(self) -> float:
        acc = self.accuracies
        return float(np.mean(acc)) if acc else float("nan")

    @property
    def std(self) -> float:
        acc = self.accuracies
        return float(np.std(acc)) if acc else float("nan")

    @property
    def best_epochs(self) -> list:
        return [s.best_epoch for s in self.successful]

    @property
    def trace(self) -> Optional[EnergyTrace]:
        ok = self.successful
        return ok[0].trace if ok else None

    @property
    def epoch_seconds(self) -> float:
        t = [s.epoch_seconds for s in self.successful]
        return float(np.mean(t)) if t else float("nan")

    def to_dict(self) -> dict:
        return {
            "mean_acc": self.mean,
            "std_acc": self.std,
            "num_failed": self.num_failed,
            "best_epochs": self.best_epochs,
            "epoch_seconds": self.epoch_seconds,
            "seeds": [s.to_dict() for s in self.seeds],
        }

    def summary(self) -> str:
        return (f"acc {100 * self.mean:.2f} ± {100 * self.std:.2f} over {len(self.accuracies)} seed(s)"
                f", {self.num_failed} failed")


# -- training ---------------------------------------------------------------------------


def _eval_rng(seed: int):
    return np.random.default_rng([seed, 2])


def evaluate(model: HampModel, data: LabeledDataset, seed: int, index=None) -> float:
    with ad.no_grad():
        logits = model.forward(data.features, training=False, noise_rng=_eval_rng(seed))
    return accuracy(logits.data, data.labels, index)


def train_seed(config: TrainConfig, data: LabeledDataset, seed: int, keep_params: bool = False) -> SeedResult:
    """Train one seed; divergence or a non-finite loss marks the seed failed."""
    res = SeedResult(seed=seed)
    if data.features is None or data.labels is None or data.split is None:
        raise ConfigError("dataset needs features, labels and a split")
    init_rng = np.random.default_rng([seed, 0])
    train_rng = np.random.default_rng([seed, 1])
    model = HampModel(config, data.features.shape[1], data.num_classes, data.hypergraph, init_rng)
    opt = AdamState(lr=config.lr)
    tr, va, te = (data.split[k] for k in ("train", "val", "test"))
    if tr.size == 0 or va.size == 0 or te.size == 0:
        raise ConfigError("train, val and test splits must all be nonempty")
    best_val, best_state = -1.0, model.state_dict()
    t_start = time.perf_counter()
    try:
        for epoch in range(config.epochs):
            ad.get_tape().clear()
            logits = model.forward(data.features, training=True, dropout_rng=train_rng, noise_rng=train_rng)
            loss = ad.cross_entropy(logits, data.labels, tr)
            if not np.isfinite(loss.data).all():
                raise TrainingAborted(f"non-finite loss at epoch {epoch}")
            ad.backward(loss)
            adam_step(model.params, opt)
            res.losses.append(loss.item())
            val = evaluate(model, data, seed, va)
            res.val_curve.append(val)
            res.epochs_run = epoch + 1
            if val > best_val:
                best_val, res.best_epoch, best_state = val, epoch, model.state_dict()
            elif epoch - res.best_epoch >= config.patience:
                break
    except (DivergenceError, TrainingAborted) as e:
        ad.get_tape().clear()
        res.failed, res.error = True, str(e)
        res.epoch_seconds = (time.perf_counter() - t_start) / max(res.epochs_run, 1)
        log.info("seed %d failed: %s", seed, e)
        return res
    res.epoch_seconds = (time.perf_counter() - t_start) / max(res.epochs_run, 1)
    model.load_state_dict(best_state)
    res.val_acc = evaluate(model, data, seed, va)
    res.test_acc = evaluate(model, data, seed, te)
    res.trace = embedding_trace(model, data, seed)
    if keep_params:
        res.params = best_state
    log.debug("seed %d: best epoch %d, val %.4f, test %.4f", seed, res.best_epoch, res.val_acc, res.test_acc)
    return res


def embedding_trace(model: HampModel, data: LabeledDataset, seed: int) -> EnergyTrace:
    """Energy trace of the dynamics unroll under the given parameters."""
    trace = EnergyTrace()
    groups = data.labels if data.num_classes == 2 else None

    def on_step(step, x):
        trace.append(trace_record(step, x, model.h, groups))

    with ad.no_grad():
        model.embed(data.features, training=False, noise_rng=_eval_rng(seed), on_step=on_step)
    return trace


def _seed_worker(args):
    config, data, seed, single_thread = args
    if single_thread:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(1):
            return train_seed(config, data, seed)
    return train_seed(config, data, seed)


def _map(fn, items, jobs: int, single_thread: bool = False):
    items = list(items)
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def train(config: TrainConfig, data: LabeledDataset, jobs: int = 1, single_thread: bool = False) -> RunResult:
    """Train every seed in ``config.seeds``; seeds run in a process pool when jobs > 1."""
    if data.features is not None and data.features.ndim != 2:
        raise ConfigError("features must be a matrix")
    items = [(config, data, int(s), single_thread) for s in config.seeds]
    return RunResult(_map(_seed_worker, items, jobs))


def _cell_worker(args):
    config, data, single_thread = args
    return [_seed_worker((config, data, int(s), single_thread)) for s in config.seeds]


def _run_cells(configs, data, jobs, single_thread):
    items = [(c, data, single_thread) for c in configs]
    if jobs > 1:
        # fan out at the seed level so short sweeps still use every worker
        flat = [(c, data, int(s), single_thread) for c in configs for s in c.seeds]
        out = _map(_seed_worker, flat, jobs)
        results, i = [], 0
        for c in configs:
            results.append(RunResult(out[i:i + len(c.seeds)]))
            i += len(c.seeds)
        return results
    return [RunResult(r) for r in map(_cell_worker, items)]


# -- sweeps -----------------------------------------------------------------------------


SWEEP_HEADER = ["depth", "mode", "total_time", "mean_acc", "std_acc", "num_failed"]


def depth_sweep(config: TrainConfig, data: LabeledDataset, depths: Sequence[int], out_csv=None,
                jobs: int = 1, single_thread: bool = False) -> list:
    """Retrain at each unroll length (T = depth * tau); returns ``[(depth, RunResult)]``."""
    depths = [int(d) for d in depths]
    if not depths:
        raise ConfigError("depths must be nonempty")
    if any(d < 1 for d in depths):
        raise ConfigError("depths must be >= 1")
    configs = [config.replace(steps=d) for d in depths]
    results = list(zip(depths, _run_cells(configs, data, jobs, single_thread)))
    if out_csv is not None:
        atomic_write_csv(out_csv, SWEEP_HEADER, (
            [d, config.mode, d * config.dynamics.tau, r.mean, r.std, r.num_failed] for d, r in results))
    return results


TOGGLES = ("repulsion", "allen_cahn", "noise")
EPSILON_GRID = (0.0, 0.1, 0.3)


@dataclass
class AblationRow:
    repulsion: Optional[bool]
    allen_cahn: Optional[bool]
    epsilon: Optional[float]
    result: RunResult

    @property
    def label(self) -> str:
        parts = []
        if self.repulsion is not None:
            parts.append(f"repulsion={'on' if self.repulsion else 'off'}")
        if self.allen_cahn is not None:
            parts.append(f"allen_cahn={'on' if self.allen_cahn else 'off'}")
        if self.epsilon is not None:
            parts.append(f"epsilon={self.epsilon:g}")
        return ",".join(parts) or "baseline"


def ablation_configs(config: TrainConfig, toggles: Sequence[str], epsilon_grid=EPSILON_GRID,
                     gamma_on: Optional[float] = None, delta_on: Optional[float] = None) -> list:
    """Enumerate the toggle combinations as ``[(repulsion, allen_cahn, epsilon, config)]``.

    Repulsion off sets gamma = 0 (gate range [0, 1]); Allen-Cahn off sets delta = 0;
    the noise toggle walks ``epsilon_grid``. Toggles absent from ``toggles`` keep
    the config's values and are reported as None.
    """
    toggles = list(dict.fromkeys(toggles))
    unknown = set(toggles) - set(TOGGLES)
    if unknown:
        raise ConfigError(f"unknown toggles {sorted(unknown)}; choose from {TOGGLES}")
    dp = config.dynamics
    g_on = dp.gamma if gamma_on is None else gamma_on
    d_on = dp.delta if delta_on is None else delta_on
    if "repulsion" in toggles and g_on <= 0:
        raise ConfigError("repulsion toggle needs gamma > 0 for the 'on' setting")
    if "allen_cahn" in toggles and d_on <= 0:
        raise ConfigError("allen_cahn toggle needs delta > 0 for the 'on' setting")
    rep = [False, True] if "repulsion" in toggles else [None]
    ac = [False, True] if "allen_cahn" in toggles else [None]
    eps = list(epsilon_grid) if "noise" in toggles else [None]
    out = []
    for r, a, e in itertools.product(rep, ac, eps):
        changes = {}
        if r is not None:
            changes["gamma"] = g_on if r else 0.0
        if a is not None:
            changes["delta"] = d_on if a else 0.0
        if e is not None:
            changes["epsilon"] = float(e)
        out.append((r, a, e, config.replace(dynamics=changes)))
    return out


ABLATION_HEADER = ["repulsion", "allen_cahn", "epsilon", "mean_acc", "std_acc", "num_failed"]


def ablate(config: TrainConfig, data: LabeledDataset, toggles: Sequence[str], epsilon_grid=EPSILON_GRID,
           out_csv=None, jobs: int = 1, single_thread: bool = False, **on_values) -> list:
    cells = ablation_configs(config, toggles, epsilon_grid, **on_values)
    results = _run_cells([c for *_, c in cells], data, jobs, single_thread)
    rows = [AblationRow(r, a, e, res) for (r, a, e, _), res in zip(cells, results)]
    if out_csv is not None:
        def fmt(v):
            return "" if v is None else v
        atomic_write_csv(out_csv, ABLATION_HEADER, (
            [fmt(r.repulsion), fmt(r.allen_cahn), fmt(r.epsilon), r.result.mean, r.result.std,
             r.result.num_failed] for r in rows))
    return rows


# -- complexity probe -------------------------------------------------------------------


@dataclass
class ProbeRow:
    incidences: int
    nodes: int
    channels: int
    seconds_per_step: float


@dataclass
class ProbeResult:
    rows: list
    slope: Optional[float] = None

    def to_csv(self, path) -> None:
        atomic_write_csv(path, ["incidences", "nodes", "channels", "seconds_per_step"],
                         ([r.incidences, r.nodes, r.channels, r.seconds_per_step] for r in self.rows))


def _step_runner(h: Hypergraph, channels: int, seed: int = 0) -> Callable[[], None]:
    """A zero-argument callable running one HAMP-I step with a learned gate."""
    rng = np.random.default_rng(seed)
    mp = MessageParams.init(channels, rng, gamma=0.1)
    dp = DynamicsParams(tau=0.1, total_time=0.1, delta=1.0)
    state = NodeState.first_order(rng.uniform(-1, 1, (h.num_nodes, channels)))
    h.gather_nodes, h.gather_edges, h.scatter_nodes, h.edge_mean_operator(mp.norm)  # build caches

    def run():
        with ad.no_grad():
            hamp1_step(state, h, mp, dp)
    return run


def time_steps(cases: Sequence[tuple], repeats: int = 5, warmup: int = 1) -> list:
    """Median seconds per step for each ``(hypergraph, channels, seed)`` case.

    Repeats are interleaved round-robin across the cases so slow drifts in
    machine load affect every case alike and cancel in time ratios.
    """
    runners = [_step_runner(h, c, s) for h, c, s in cases]
    times = [[] for _ in runners]
    for i in range(warmup + repeats):
        for k, run in enumerate(runners):
            t0 = time.perf_counter()
            run()
            if i >= warmup:
                times[k].append(time.perf_counter() - t0)
    return [float(np.median(t)) for t in times]


def time_step(h: Hypergraph, channels: int, repeats: int = 5, seed: int = 0, warmup: int = 1) -> float:
    """Median wall-clock seconds of one HAMP-I step with a learned gate."""
    return time_steps([(h, channels, seed)], repeats, warmup)[0]


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def complexity_probe(sizes: Sequence[SynthSpec], channels: int = 32, repeats: int = 5) -> ProbeResult:
    """Per-step time against incidence count tr(D_v) + tr(D_e) (= 2 x incidences)."""
    hs = [generate(dataclasses.replace(spec, connected=False)).hypergraph for spec in sizes]
    secs = time_steps([(h, channels, spec.seed) for h, spec in zip(hs, sizes)], repeats)
    rows = []
    for h, sec in zip(hs, secs):
        if sec < 1e-3:
            warnings.warn(f"per-step time {sec * 1e3:.3f} ms is near the timing noise floor", RuntimeWarning)
        rows.append(ProbeRow(2 * h.num_incidences, h.num_nodes, channels, sec))
    slope = None
    if len(rows) >= 2:
        slope = loglog_slope([r.incidences for r in rows], [r.seconds_per_step for r in rows])
    return ProbeResult(rows, slope)


def default_probe_sizes(base_edges: int = 2000, factors=(1, 2, 4, 10), edge_size: int = 5,
                        seed: int = 0) -> list:
    """Two-group specs whose incidence counts scale with ``factors``."""
    out = []
    for f in factors:
        m = base_edges * f
        n = max(2 * edge_size, m)  # keep nodes proportional to edges so degrees stay fixed
        out.append(SynthSpec(n1=n // 2, n2=n - n // 2, intra_edges=m // 4, intra_size=edge_size,
                             cross_edges=m // 2, cross_size=edge_size, d=1, seed=seed, connected=False))
    return out


# -- gradient check ---------------------------------------------------------------------


def tiny_problem(seed: int, mode: str = "hamp1", steps: int = 4):
    """A small dataset plus config whose full unrolled loss is cheap to differentiate numerically."""
    spec = SynthSpec(n1=4, n2=4, intra_edges=2, intra_size=3, cross_edges=2, cross_size=3, d=3,
                     gap=1.0, noise=0.5, seed=seed)
    data = generate(spec).dataset
    dyn = DynamicsParams(tau=0.25, total_time=0.25 * steps, delta=1.5, epsilon=0.1, beta=0.2,
                         gamma=0.1, activation="tanh")
    cfg = TrainConfig(mode=mode, dynamics=dyn, hidden_dim=3, classifier_hidden=3, classifier_layers=2,
                      epochs=1, patience=1, seeds=[seed])
    return cfg, data


def _relative_error(g: np.ndarray, fd: np.ndarray, floor: float = 1e-8) -> float:
    scale = max(np.abs(g).max(), np.abs(fd).max(), floor)
    return float(np.abs(g - fd).max() / scale)


def gradcheck(seed: int, mode: str = "hamp1", steps: int = 4, eps: float = 1e-5) -> dict:
    """Compare backward gradients with central differences for every parameter tensor.

    Returns per-tensor relative errors ``max|g - fd| / max(max|g|, max|fd|)``
    and their maximum under ``"max"``.
    """
    cfg, data = tiny_problem(seed, mode, steps)
    model = HampModel(cfg, data.features.shape[1], data.num_classes, data.hypergraph,
                      np.random.default_rng([seed, 0]))
    idx = data.split["train"]

    def loss_value():
        noise = np.random.default_rng([seed, 3])
        logits = model.forward(data.features, training=False, noise_rng=noise)
        return ad.cross_entropy(logits, data.labels, idx)

    ad.get_tape().clear()
    loss = loss_value()
    ad.backward(loss)
    errors = {}
    with ad.no_grad():
        for name, p in model.params.items():
            g = p.grad.copy()
            fd = np.zeros_like(p.data)
            flat, fd_flat = p.data.reshape(-1), fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = loss_value().item()
                flat[i] = orig - eps
                down = loss_value().item()
                flat[i] = orig
                fd_flat[i] = (up - down) / (2 * eps)
            errors[name] = _relative_error(g, fd)
    return {"max": max(errors.values()), "per_tensor": errors,
            "num_params": int(sum(p.size for p in model.params.values()))}
