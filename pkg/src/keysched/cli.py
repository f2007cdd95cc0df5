"""Command-line entry point: ``keysched {gen,train,eval,sweep,oracle,plot}``.

Every command reads one flat :class:`RunConfig`. Values come from the
defaults, then an optional ``--config`` file of ``key = value`` lines, then
command-line flags. ``--dump-config`` prints the resolved config in the same
file format and exits.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import rng as crng
from .env import SynthConfig, gen_trace, load_trace, save_trace
from .errors import ConfigError, FormatError, KeyschedError
from .evaluation import (
    CostModel,
    CurveRow,
    cki_histogram,
    evaluate,
    metrics_from_rollouts,
    oracle_schedule,
    read_curve_csv,
    run_all,
    sweep,
    write_curve_csv,
    write_histogram_csv,
)
from .plotting import plot_curves
from .policy import init_params, load_checkpoint, save_checkpoint
from .schedulers import (
    DeviationRegressor,
    DeviationScheduler,
    FixedScheduler,
    MagnitudeScheduler,
    PolicyScheduler,
    RandomScheduler,
)
from .trainer import TrainConfig, train

SEED_ENV = "KEYSCHED_SEED"
COMMANDS = ("gen", "train", "eval", "sweep", "oracle", "plot")
SCHEDULER_KINDS = ("fixed", "random", "magnitude", "deviation", "policy")


@dataclass
class RunConfig:
    # paths
    trace_dir: str = "traces"
    test_dir: str = ""
    out_dir: str = "runs"
    checkpoint: str = ""
    mkdir: bool = False
    seed: int = 0
    jobs: int = 1
    # trace generation
    n: int = 20
    frames: int = 600
    scene_rate: float = 1.0
    quality_mean: float = SynthConfig.base_quality_mean
    quality_jitter: float = SynthConfig.base_quality_jitter
    quality_corr: float = SynthConfig.quality_corr
    motion_mean: float = SynthConfig.motion_mean
    motion_jitter: float = SynthConfig.motion_jitter
    motion_corr: float = SynthConfig.motion_corr
    spike: float = SynthConfig.scene_change_motion_spike
    alpha: float = SynthConfig.alpha
    beta: float = SynthConfig.beta
    floor: float = SynthConfig.quality_floor
    feature_dim: int = SynthConfig.feature_dim
    sigma: float = SynthConfig.feature_noise_sigma
    kappa: float = SynthConfig.agreement_kappa
    # training
    eta: float = TrainConfig.eta
    episode_len: int = TrainConfig.episode_len
    trials: int = TrainConfig.trials
    batch: int = TrainConfig.batch_episodes
    episodes: int = TrainConfig.total_episodes
    gamma: float = TrainConfig.gamma
    lambda1: float = TrainConfig.lambda1
    epsilon: float = TrainConfig.epsilon
    reward_mode: str = TrainConfig.reward_mode
    reward_scale: float = TrainConfig.reward_scale
    lr: float = TrainConfig.lr
    rho: float = TrainConfig.rho
    baseline: str = TrainConfig.baseline_mode
    return_mode: str = TrainConfig.return_mode
    hidden: tuple[int, ...] = TrainConfig.hidden_sizes
    lkd_scale: float = TrainConfig.lkd_scale
    normalize_inputs: bool = TrainConfig.normalize_inputs
    checkpoint_every: int = 0
    # evaluation
    scheduler: str = "fixed"
    control: float = 20.0
    window: int = 90
    t_key: float = CostModel.t_key
    t_nonkey: float = CostModel.t_nonkey
    t_sched: float = CostModel.t_sched
    bin_width: int = 1
    # sweeps
    fixed: tuple[int, ...] = (5, 10, 20, 40, 80)
    random: tuple[float, ...] = ()
    magnitude: tuple[float, ...] = ()
    deviation: tuple[float, ...] = ()
    taus: tuple[float, ...] = ()
    oracle: bool = False
    budget: tuple[int, ...] = ()
    # plotting
    curve: str = ""

    # -- derived configs --
    def synth(self) -> SynthConfig:
        return SynthConfig(
            n_frames=self.frames, base_quality_mean=self.quality_mean, base_quality_jitter=self.quality_jitter,
            quality_corr=self.quality_corr, motion_mean=self.motion_mean, motion_jitter=self.motion_jitter,
            motion_corr=self.motion_corr, scene_change_rate=self.scene_rate,
            scene_change_motion_spike=self.spike, alpha=self.alpha, beta=self.beta, quality_floor=self.floor,
            feature_dim=self.feature_dim, feature_noise_sigma=self.sigma, agreement_kappa=self.kappa)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            eta=self.eta, episode_len=self.episode_len, trials=self.trials, batch_episodes=self.batch,
            total_episodes=self.episodes, gamma=self.gamma, lambda1=self.lambda1, epsilon=self.epsilon,
            reward_mode=self.reward_mode, reward_scale=self.reward_scale, lr=self.lr, rho=self.rho,
            seed=self.seed, baseline_mode=self.baseline, return_mode=self.return_mode,
            hidden_sizes=tuple(self.hidden), lkd_scale=self.lkd_scale, normalize_inputs=self.normalize_inputs,
            checkpoint_every=self.checkpoint_every)

    def cost(self) -> CostModel:
        return CostModel(self.t_key, self.t_nonkey, self.t_sched)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "policy.kpol"

    @property
    def eval_dir(self) -> Path:
        return Path(self.test_dir or self.trace_dir)


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def default_config() -> RunConfig:
    cfg = RunConfig()
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None and env_seed.strip():
        cfg.seed = parse_value("seed", env_seed)
    return cfg


# -- config text ----------------------------------------------------------------

def parse_value(key: str, text: str):
    kind = FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            v = float(text)
            if not math.isfinite(v):
                raise ValueError(text)
            return v
        if kind == "str":
            return text
        elem = int if "int" in kind else float
        return tuple(elem(t) for t in text.replace(" ", "").split(",") if t)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {kind}") from None


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {format_value(getattr(cfg, f.name))}\n" for f in fields(RunConfig))


def parse_config_text(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = base if base is not None else default_config()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(key or "config", f"{source}:{lineno}: expected 'key = value'")
        if key not in FIELD_TYPES:
            raise ConfigError(key, f"{source}:{lineno}: unknown config key")
        setattr(cfg, key, parse_value(key, val))
    return cfg


# -- argument parsing --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keysched", description="Key-frame scheduling experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} step",
                           description="Config keys (flag form shown; file form uses underscores).")
        p.add_argument("--config", help="file of 'key = value' lines; flags override it")
        p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            default = format_value(f.default)
            if f.type == "bool":
                p.add_argument(flag, dest=f.name, nargs="?", const="true", default=argparse.SUPPRESS,
                               help=f"{f.name} (bool, default {default})")
            else:
                p.add_argument(flag, dest=f.name, default=argparse.SUPPRESS,
                               help=f"{f.name} ({f.type}, default {default or 'empty'})")
    return parser


def resolve(argv) -> tuple[str, RunConfig, bool]:
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    command = ns.pop("command")
    cfg = default_config()
    path = ns.pop("config", None)
    dump = ns.pop("dump_config", False)
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
        cfg = parse_config_text(text, cfg, path)
    for key, val in ns.items():
        setattr(cfg, key, parse_value(key, val))
    return command, cfg, dump


# -- validation ----------------------------------------------------------------------

def _positive_ints(name, vals):
    for v in vals:
        if v < 1:
            raise ConfigError(name, f"entries must be >= 1, got {v}")


def validate(cfg: RunConfig, command: str) -> None:
    """Check everything that can be checked before a long computation starts."""
    if cfg.jobs < 1:
        raise ConfigError("jobs", "must be >= 1")
    if cfg.window < 1:
        raise ConfigError("window", "must be >= 1")
    if cfg.bin_width < 1:
        raise ConfigError("bin_width", "must be >= 1")
    cfg.synth().validate()
    cfg.cost().validate()
    if command == "gen" and cfg.n < 1:
        raise ConfigError("n", "must be >= 1")
    if command == "train":
        cfg.train_config().validate()
        if not cfg.hidden or min(cfg.hidden) < 1:
            raise ConfigError("hidden", "must be a non-empty list of positive sizes")
    if command == "eval" and cfg.scheduler not in SCHEDULER_KINDS:
        raise ConfigError("scheduler", f"must be one of {SCHEDULER_KINDS}")
    if command == "sweep":
        _positive_ints("fixed", cfg.fixed)
        _positive_ints("budget", cfg.budget)
        if cfg.oracle and not cfg.budget:
            raise ConfigError("budget", "--oracle needs at least one budget")
    if command == "oracle":
        if not cfg.budget:
            raise ConfigError("budget", "oracle needs a budget grid")
        _positive_ints("budget", cfg.budget)


def _need_dir(path: Path, what: str) -> None:
    if not path.is_dir():
        raise FileNotFoundError(f"{what} directory {path} does not exist")


def _out_dir(path: Path, mkdir: bool) -> Path:
    if not path.is_dir():
        if not mkdir:
            raise FileNotFoundError(f"output directory {path} does not exist (pass --mkdir to create it)")
        path.mkdir(parents=True, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory {path} is not writable")
    return path


def load_traces(directory: Path):
    _need_dir(directory, "trace")
    paths = sorted(directory.glob("*.ksch"))
    if not paths:
        raise FileNotFoundError(f"no .ksch trace files in {directory}")
    return [load_trace(p) for p in paths]


def _need_checkpoint(cfg: RunConfig) -> Path:
    path = cfg.checkpoint_path
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return path


# -- commands ------------------------------------------------------------------------

def trace_file_name(seed: int, idx: int) -> str:
    return f"trace_{seed}_{idx}.ksch"


def cmd_gen(cfg: RunConfig) -> int:
    out = _out_dir(Path(cfg.trace_dir), cfg.mkdir)
    synth = cfg.synth()
    for idx in range(cfg.n):
        t = gen_trace(synth, crng.derive_seed(cfg.seed, idx))
        path = out / trace_file_name(cfg.seed, idx)
        save_trace(t, path)
        print(f"{path.name}: frames={t.n_frames} scene_changes={len(t.scene_changes)} "
              f"mean_motion={float(np.mean(t.motion)):.4f} mean_key_quality={float(np.mean(t.key_quality)):.4f}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    out = _out_dir(Path(cfg.out_dir), cfg.mkdir)
    _out_dir(cfg.checkpoint_path.parent, cfg.mkdir)
    traces = load_traces(Path(cfg.trace_dir))
    tc = cfg.train_config()
    ckpt_dir = out if cfg.checkpoint_every else None
    if tc.total_episodes == 0:
        params, opt, log = train(traces, tc, checkpoint_dir=ckpt_dir)
    else:
        def progress(done, log):
            if done % max(tc.batch_episodes, tc.total_episodes // 10) < tc.batch_episodes:
                print(f"episode {done}/{tc.total_episodes}: mean_return={log.rows[-1][1]:.4f}", file=sys.stderr)
        params, opt, log = train(traces, tc, checkpoint_dir=ckpt_dir, progress=progress)
    save_checkpoint(cfg.checkpoint_path, params, opt)
    log.write_csv(out / "train_log.csv")
    if log.rows:
        tail = log.rows[-max(1, len(log.rows) // 10):]
        ret = float(np.mean([r[1] for r in tail]))
        kar = float(np.mean([r[3] for r in tail]))
        print(f"final mean_return={ret:.6f} realized_kar={kar:.6f} checkpoint={cfg.checkpoint_path}")
    else:
        print(f"no episodes run; checkpoint={cfg.checkpoint_path} holds the initialisation")
    return 0


def make_scheduler(kind: str, control: float, cfg: RunConfig, train_traces=None, params=None):
    if kind == "fixed":
        return FixedScheduler(int(control) if float(control).is_integer() else control)
    if kind == "random":
        return RandomScheduler(control, cfg.seed)
    if kind == "magnitude":
        return MagnitudeScheduler(control)
    if kind == "deviation":
        return DeviationScheduler(control, DeviationRegressor().fit(train_traces))
    if kind == "policy":
        return PolicyScheduler(params, control)
    raise ConfigError("scheduler", f"must be one of {SCHEDULER_KINDS}")


def cmd_eval(cfg: RunConfig) -> int:
    out = _out_dir(Path(cfg.out_dir), cfg.mkdir)
    params = load_checkpoint(_need_checkpoint(cfg))[0] if cfg.scheduler == "policy" else None
    test = load_traces(cfg.eval_dir)
    train_traces = load_traces(Path(cfg.trace_dir)) if cfg.scheduler == "deviation" else None
    sched = make_scheduler(cfg.scheduler, cfg.control, cfg, train_traces, params)
    rolls = run_all(sched, test, cfg.window, cfg.jobs)
    m = metrics_from_rollouts(rolls, cfg.cost())
    write_curve_csv([CurveRow(cfg.scheduler, sched.control, m.aki, m.mean_quality, m.sim_fps, m.n_keys,
                              m.n_frames)], out / "eval.csv")
    write_histogram_csv(cki_histogram(rolls, cfg.bin_width), out / "cki_hist.csv")
    print(f"{cfg.scheduler}({format_value(sched.control)}): mean_quality={m.mean_quality:.6f} aki={m.aki:.4f} "
          f"sim_fps={m.sim_fps:.4f} keys={m.n_keys} frames={m.n_frames}")
    return 0


def oracle_rows(traces, budgets):
    """One row per budget: keys are capped per trace at min(budget, frames)."""
    rows = []
    for b in budgets:
        keys = frames = 0
        qsum = 0.0
        for t in traces:
            ks, q = oracle_schedule(t, 0, t.n_frames, min(b, t.n_frames))
            keys += len(ks)
            frames += t.n_frames
            qsum += q * t.n_frames
        rows.append((b, frames / keys, qsum / frames, keys, frames))
    return rows


def cmd_sweep(cfg: RunConfig) -> int:
    out = _out_dir(Path(cfg.out_dir), cfg.mkdir)
    params = load_checkpoint(_need_checkpoint(cfg))[0] if cfg.taus else None
    test = load_traces(cfg.eval_dir)
    train_traces = load_traces(Path(cfg.trace_dir)) if cfg.deviation else None
    regressor = DeviationRegressor().fit(train_traces) if cfg.deviation else None
    factories = []
    for n in cfg.fixed:
        factories.append(("fixed", n, lambda n=n: FixedScheduler(n)))
    for p in cfg.random:
        factories.append(("random", p, lambda p=p: RandomScheduler(p, cfg.seed)))
    for thr in cfg.magnitude:
        factories.append(("magnitude", thr, lambda thr=thr: MagnitudeScheduler(thr)))
    for thr in cfg.deviation:
        factories.append(("deviation", thr, lambda thr=thr: DeviationScheduler(thr, regressor)))
    for tau in cfg.taus:
        factories.append(("policy", tau, lambda tau=tau: PolicyScheduler(params, tau)))
    rows, warnings = sweep(factories, test, cfg.cost(), cfg.window, cfg.jobs)
    if cfg.oracle:
        cost = cfg.cost()
        for b, aki, q, keys, frames in oracle_rows(test, cfg.budget):
            rows.append(CurveRow("oracle", b, aki, q, cost.fps(keys, frames), keys, frames))
        rows.sort(key=lambda r: (r.aki, r.scheduler, str(r.control)))
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    path = Path(cfg.curve) if cfg.curve else out / "curve.csv"
    write_curve_csv(rows, path)
    print(f"{len(rows)} rows -> {path}")
    return 0


def cmd_oracle(cfg: RunConfig) -> int:
    out = _out_dir(Path(cfg.out_dir), cfg.mkdir)
    test = load_traces(cfg.eval_dir)
    lines = ["budget,aki,quality"]
    for b, aki, q, _, _ in oracle_rows(test, cfg.budget):
        lines.append(f"{b},{format(aki, '.17g')},{format(q, '.17g')}")
    (out / "oracle.csv").write_text("\n".join(lines) + "\n")
    print(f"{len(lines) - 1} budgets -> {out / 'oracle.csv'}")
    return 0


def cmd_plot(cfg: RunConfig) -> int:
    out = _out_dir(Path(cfg.out_dir), cfg.mkdir)
    src = Path(cfg.curve) if cfg.curve else out / "curve.csv"
    if not src.is_file():
        raise FileNotFoundError(f"curve CSV {src} does not exist")
    rows = read_curve_csv(src)
    try:
        written = plot_curves(rows, out)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"unusable curve CSV: {exc}", None, src) from None
    for p in written:
        print(p)
    return 0


HANDLERS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "oracle": cmd_oracle, "plot": cmd_plot}


def main(argv=None) -> int:
    try:
        command, cfg, dump = resolve(argv)
        if dump:
            sys.stdout.write(dump_config(cfg))
            return 0
        validate(cfg, command)
        return HANDLERS[command](cfg)
    except KeyschedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
