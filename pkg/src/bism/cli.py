"""Experiment driver: INI configuration, train/eval/sample/probe-bias/
gen-data subcommands, metrics CSV, binary checkpoints, and an output
directory lockfile.

Everything a run writes is deterministic under its seed except the
wall_seconds column of metrics.csv.
"""

import argparse
import configparser
import contextlib
import dataclasses
import os
import struct
import sys

import numpy as np

from . import autodiff as ad
from . import bilevel, data, evaluation, models, objectives, posteriors, samplers
from .bilevel import MetricsRow, TrainConfig
from .errors import (ConfigError, ContractError, NumericError, ParseError,
                     ResourceError, UsageError)

__all__ = [
    "ModelSpec", "PosteriorSpec", "ExperimentConfig", "MetricsRow",
    "load_config", "serialize_config", "save_config",
    "write_metrics_csv", "save_checkpoint", "load_checkpoint",
    "build_model", "build_posterior",
    "cmd_train", "cmd_eval", "cmd_sample", "cmd_probe_bias", "cmd_gen_data",
    "main",
]


# ---------------------------------------------------------------- config

@dataclasses.dataclass(frozen=True)
class ModelSpec:
    kind: str
    d_v: int
    d_h: int
    sigma: float = 1.0
    scale: float = 0.01
    hidden: int = 128
    t_hidden: int = 64
    head_width: int = 64


@dataclasses.dataclass(frozen=True)
class PosteriorSpec:
    kind: str
    tau: float = 0.1
    hidden: int = 128


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    posterior: PosteriorSpec
    trainer: TrainConfig
    grid_bounds: tuple = None
    grid_resolution: int = 128
    data_path: str = None
    out_dir: str = "out"


_FLOATS = "floats"

_SCHEMA = {
    "model": {"kind": str, "d_v": int, "d_h": int, "sigma": float,
              "scale": float, "hidden": int, "t_hidden": int,
              "head_width": int},
    "posterior": {"kind": str, "tau": float, "hidden": int},
    "objective": {"kind": str, "n_directions": int, "sigma": float,
                  "levels": _FLOATS, "weights": _FLOATS, "sigma0": float},
    "trainer": {"K": int, "N": int, "alpha": float, "beta": float,
                "batch_size": int, "max_iters": int, "seed": int,
                "lower": str, "latent_mode": str, "inner_optimizer": str,
                "method": str, "cd_k": int, "persistent": bool,
                "lr_decay": bool, "node_cap": int},
    "eval": {"eval_every": int, "grid_xmin": float, "grid_xmax": float,
             "grid_ymin": float, "grid_ymax": float, "grid_resolution": int},
    "paths": {"data": str, "out_dir": str},
}

_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True,
               "false": False, "no": False, "off": False, "0": False}


def _convert(section, key, raw, kind):
    try:
        if kind is str:
            return raw.strip()
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            word = raw.strip().lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL_WORDS[word]
        if kind is _FLOATS:
            raw = raw.strip()
            if not raw:
                return ()
            return tuple(float(tok) for tok in raw.split(","))
    except ValueError as e:
        raise ConfigError(f"config: {section}.{key}: {e}") from None
    raise ConfigError(f"config: {section}.{key}: unhandled type")


def _read_sections(path):
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh, source=str(path))
    except configparser.MissingSectionHeaderError as e:
        raise ParseError(f"{path}: line {e.lineno}: expected a [section] "
                         f"header before any keys") from None
    except configparser.ParsingError as e:
        spots = ", ".join(f"line {ln}" for ln, _ in e.errors)
        raise ParseError(f"{path}: cannot parse ({spots})") from None
    except configparser.DuplicateOptionError as e:
        raise ParseError(f"{path}: line {e.lineno}: duplicate key "
                         f"{e.option!r}") from None
    except configparser.DuplicateSectionError as e:
        raise ParseError(f"{path}: line {e.lineno}: duplicate section "
                         f"[{e.section}]") from None
    out = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"config: unknown section [{section}]")
        out[section] = {}
        for key, raw in parser[section].items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"config: unknown key {section}.{key}")
            out[section][key] = _convert(section, key, raw,
                                         _SCHEMA[section][key])
    return out


_POSTERIOR_FOR_MODEL = {"grbm": "bernoulli", "deep": "gaussian"}


def load_config(path):
    """Parse, default-fill, and cross-validate an experiment config."""
    sec = _read_sections(path)

    m = sec.get("model", {})
    for required in ("kind", "d_v", "d_h"):
        if required not in m:
            raise ConfigError(f"config: model.{required} is required")
    if m["kind"] not in _POSTERIOR_FOR_MODEL:
        raise ConfigError(f"config: model.kind must be grbm or deep, "
                          f"got {m['kind']!r}")
    model = ModelSpec(**m)

    p = sec.get("posterior", {})
    p.setdefault("kind", _POSTERIOR_FOR_MODEL[model.kind])
    posterior = PosteriorSpec(**p)
    if posterior.kind != _POSTERIOR_FOR_MODEL[model.kind]:
        raise ConfigError(
            f"config: posterior.kind {posterior.kind!r} does not fit "
            f"model.kind {model.kind!r}")

    o = dict(sec.get("objective", {}))
    if "kind" not in o:
        raise ConfigError("config: objective.kind is required")
    objective = objectives.make_objective(o.pop("kind"), **o)

    t = dict(sec.get("trainer", {}))
    ev = sec.get("eval", {})
    if "eval_every" in ev:
        t["eval_every"] = ev["eval_every"]
    trainer = TrainConfig(objective=objective, **t)
    if trainer.lower == "fisher" and posterior.kind == "bernoulli":
        raise ConfigError("config: trainer.lower = fisher needs a "
                          "continuous-latent posterior")
    if trainer.method in ("cd", "marginal") and model.kind != "grbm":
        raise ConfigError(f"config: trainer.method = {trainer.method} "
                          f"needs the grbm model")

    bounds = None
    bound_keys = ("grid_xmin", "grid_xmax", "grid_ymin", "grid_ymax")
    if any(k in ev for k in bound_keys):
        missing = [k for k in bound_keys if k not in ev]
        if missing:
            raise ConfigError(f"config: eval.{missing[0]} is required once "
                              f"any grid bound is set")
        bounds = ((ev["grid_xmin"], ev["grid_xmax"]),
                  (ev["grid_ymin"], ev["grid_ymax"]))

    paths = sec.get("paths", {})
    data_path = paths.get("data")
    if data_path is not None and not os.path.exists(data_path):
        raise ConfigError(f"config: paths.data: {data_path} does not exist")

    return ExperimentConfig(
        model=model, posterior=posterior, trainer=trainer,
        grid_bounds=bounds,
        grid_resolution=ev.get("grid_resolution", 128),
        data_path=data_path,
        out_dir=paths.get("out_dir", "out"))


def _g(x):
    return f"{x:.17g}"


def serialize_config(config):
    """Render a config back to INI text; load(serialize(c)) == c."""
    m, p, t = config.model, config.posterior, config.trainer
    o = t.objective
    lines = [
        "[model]",
        f"kind = {m.kind}", f"d_v = {m.d_v}", f"d_h = {m.d_h}",
        f"sigma = {_g(m.sigma)}", f"scale = {_g(m.scale)}",
        f"hidden = {m.hidden}", f"t_hidden = {m.t_hidden}",
        f"head_width = {m.head_width}",
        "",
        "[posterior]",
        f"kind = {p.kind}", f"tau = {_g(p.tau)}", f"hidden = {p.hidden}",
        "",
        "[objective]",
        f"kind = {o.kind}", f"n_directions = {o.n_directions}",
        f"sigma = {_g(o.sigma)}",
    ]
    if o.levels:
        lines.append("levels = " + ", ".join(_g(x) for x in o.levels))
    if o.weights:
        lines.append("weights = " + ", ".join(_g(x) for x in o.weights))
    if o.sigma0:
        lines.append(f"sigma0 = {_g(o.sigma0)}")
    lines += [
        "",
        "[trainer]",
        f"K = {t.K}", f"N = {t.N}", f"alpha = {_g(t.alpha)}",
        f"beta = {_g(t.beta)}", f"batch_size = {t.batch_size}",
        f"max_iters = {t.max_iters}", f"seed = {t.seed}",
        f"lower = {t.lower}", f"latent_mode = {t.latent_mode}",
        f"inner_optimizer = {t.inner_optimizer}", f"method = {t.method}",
        f"cd_k = {t.cd_k}", f"persistent = {str(t.persistent).lower()}",
        f"lr_decay = {str(t.lr_decay).lower()}", f"node_cap = {t.node_cap}",
        "",
        "[eval]",
        f"eval_every = {t.eval_every}",
        f"grid_resolution = {config.grid_resolution}",
    ]
    if config.grid_bounds is not None:
        (x0, x1), (y0, y1) = config.grid_bounds
        lines += [f"grid_xmin = {_g(x0)}", f"grid_xmax = {_g(x1)}",
                  f"grid_ymin = {_g(y0)}", f"grid_ymax = {_g(y1)}"]
    lines += ["", "[paths]", f"out_dir = {config.out_dir}"]
    if config.data_path is not None:
        lines.append(f"data = {config.data_path}")
    return "\n".join(lines) + "\n"


def save_config(config, path):
    with open(path, "w") as fh:
        fh.write(serialize_config(config))


def build_model(config):
    m = config.model
    if m.kind == "grbm":
        return models.Grbm(m.d_v, m.d_h)
    return models.DeepEblvm(m.d_v, m.d_h, hidden=m.hidden,
                            t_hidden=m.t_hidden, head_width=m.head_width)


def build_posterior(config):
    m, p = config.model, config.posterior
    if p.kind == "bernoulli":
        return posteriors.BernoulliPosterior(m.d_v, m.d_h, tau=p.tau)
    return posteriors.GaussianPosterior(m.d_v, m.d_h, hidden=p.hidden)


# ---------------------------------------------------------------- metrics

_CSV_FIELDS = ("iter", "wall_seconds", "upper_loss", "lower_loss",
               "test_ll", "test_fisher", "posterior_fisher")


def _cell(x):
    x = float(x)
    return "" if np.isnan(x) else f"{x:.17g}"


def write_metrics_csv(rows, path):
    """Fixed-header CSV; NaN turns into an empty field."""
    lines = [",".join(_CSV_FIELDS)]
    last = None
    for r in rows:
        if last is not None and r.iteration <= last:
            raise ContractError(
                f"metrics rows must have strictly increasing iterations; "
                f"{r.iteration} follows {last}")
        last = r.iteration
        lines.append(",".join(
            [str(int(r.iteration)), _cell(r.wall_seconds),
             _cell(r.upper_loss), _cell(r.lower_loss), _cell(r.test_ll),
             _cell(r.test_fisher), _cell(r.posterior_fisher)]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ------------------------------------------------------------- checkpoint

_CKPT_MAGIC = b"BISMCKPT"
_CKPT_VERSION = 1


def _pack_str(s):
    enc = s.encode("utf-8")
    return struct.pack("<H", len(enc)) + enc


class _Cursor:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def pull(self, n):
        if self.pos + n > len(self.blob):
            raise ParseError("checkpoint: truncated file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self):
        return struct.unpack("<H", self.pull(2))[0]

    def u32(self):
        return struct.unpack("<I", self.pull(4))[0]

    def text(self):
        return self.pull(self.u16()).decode("utf-8")


def save_checkpoint(path, model_kind, posterior_kind, theta, phi):
    """Binary container: magic, version, kind tags, then named
    little-endian float64 entries. Written atomically."""
    blob = bytearray()
    blob += _CKPT_MAGIC
    blob += struct.pack("<I", _CKPT_VERSION)
    blob += _pack_str(model_kind)
    blob += _pack_str(posterior_kind)
    entries = ([("theta." + k, v) for k, v in theta.items()]
               + [("phi." + k, v) for k, v in phi.items()])
    blob += struct.pack("<I", len(entries))
    for name, arr in entries:
        a = np.asarray(ad.value_of(arr), dtype="<f8")
        blob += _pack_str(name)
        blob += struct.pack("<B", a.ndim)
        for d in a.shape:
            blob += struct.pack("<I", d)
        blob += a.tobytes()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Inverse of save_checkpoint: (model_kind, posterior_kind, theta, phi)."""
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read())
    if cur.pull(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
        raise ParseError(f"checkpoint: bad magic in {path}")
    version = cur.u32()
    if version != _CKPT_VERSION:
        raise ParseError(f"checkpoint: unsupported format version {version}")
    model_kind = cur.text()
    posterior_kind = cur.text()
    theta, phi = {}, {}
    for _ in range(cur.u32()):
        name = cur.text()
        ndim = struct.unpack("<B", cur.pull(1))[0]
        shape = tuple(cur.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(cur.pull(8 * count), dtype="<f8").reshape(shape)
        arr = np.array(arr)  # own, writable copy
        group, _, key = name.partition(".")
        if group == "theta":
            theta[key] = arr
        elif group == "phi":
            phi[key] = arr
        else:
            raise ParseError(f"checkpoint: entry {name!r} belongs to "
                             f"neither theta nor phi")
    if cur.pos != len(cur.blob):
        raise ParseError("checkpoint: trailing bytes after last entry")
    return model_kind, posterior_kind, theta, phi


def _rebuild(model_kind, posterior_kind, theta, phi):
    if model_kind == "grbm":
        d_v, d_h = theta["W"].shape
        model = models.Grbm(d_v, d_h)
    elif model_kind == "deep":
        d_v = theta["g1/W0"].shape[1]
        d_h = theta["t/W0"].shape[1]
        model = models.DeepEblvm(d_v, d_h)
    else:
        raise ParseError(f"checkpoint: unknown model kind {model_kind!r}")
    if posterior_kind == "bernoulli":
        d_h, d_v = phi["A"].shape
        posterior = posteriors.BernoulliPosterior(d_v, d_h)
    elif posterior_kind == "gaussian":
        posterior = posteriors.GaussianPosterior(model.d_v, model.d_h)
    else:
        raise ParseError(
            f"checkpoint: unknown posterior kind {posterior_kind!r}")
    return model, posterior


# --------------------------------------------------------------- lockfile

@contextlib.contextmanager
def _locked(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    lock = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ResourceError(
            f"output directory {out_dir} is locked by another run "
            f"(remove {lock} if stale)") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        os.unlink(lock)


# ------------------------------------------------------------ subcommands

# evaluation inside training is capped so eval cost stays bounded
_EVAL_POINTS = 2000


def _train_eval_fn(model, posterior, trainer, eval_pts, ckpt_path):
    def eval_fn(theta, phi, iteration):
        save_checkpoint(ckpt_path, model.kind, posterior.kind, theta, phi)
        out = {}
        if model.kind == "grbm":
            out["test_ll"] = evaluation.test_log_likelihood(eval_pts, theta)
            if model.d_v <= 8:
                out["test_fisher"] = evaluation.test_fisher_loss(
                    eval_pts, theta)
            else:
                out["test_fisher"] = evaluation.test_fisher_loss(
                    eval_pts, theta, exact=False, n_directions=10,
                    rng=np.random.default_rng((trainer.seed, 91, iteration)))
        else:
            out["posterior_fisher"] = evaluation.posterior_fisher_eval(
                model, posterior, theta, phi, eval_pts,
                np.random.default_rng((trainer.seed, 92, iteration)))
        return out

    return eval_fn


def cmd_train(config):
    if config.data_path is None:
        raise UsageError("train: paths.data must point at a dataset file")
    with _locked(config.out_dir):
        dataset = data.load_dataset(config.data_path)
        model = build_model(config)
        posterior = build_posterior(config)
        ckpt_path = os.path.join(config.out_dir, "checkpoint.ckpt")
        metrics_path = os.path.join(config.out_dir, "metrics.csv")
        eval_fn = _train_eval_fn(model, posterior, config.trainer,
                                 dataset.points[:_EVAL_POINTS], ckpt_path)
        try:
            result = bilevel.train(model, posterior, dataset, config.trainer,
                                   eval_fn=eval_fn)
        except bilevel.TrainingAborted as e:
            write_metrics_csv(e.metrics, metrics_path)
            print(f"error: {e}; last-good checkpoint kept at {ckpt_path}",
                  file=sys.stderr)
            return 3
        write_metrics_csv(result.metrics, metrics_path)
        save_checkpoint(ckpt_path, model.kind, posterior.kind,
                        result.theta, result.phi)
        print(f"finished {config.trainer.max_iters} iterations; wrote "
              f"{metrics_path}")
    return 0


def _parse_grid_bounds(text):
    try:
        x0, x1, y0, y1 = (float(t) for t in text.split(","))
    except ValueError:
        raise UsageError(
            f"--grid-bounds wants xmin,xmax,ymin,ymax, got {text!r}") from None
    return ((x0, x1), (y0, y1))


def cmd_eval(checkpoint, data_path, out_dir, flags=(), grid_bounds=None,
             grid_resolution=128, seed=0):
    model_kind, posterior_kind, theta, phi = load_checkpoint(checkpoint)
    model, posterior = _rebuild(model_kind, posterior_kind, theta, phi)
    dataset = data.load_dataset(data_path)
    flags = set(flags)
    if model.kind != "grbm":
        if "test_ll" in flags:
            raise UsageError("eval: test log-likelihood is intractable for "
                             "the deep model")
        if "test_fisher" in flags:
            raise UsageError("eval: the Fisher test loss needs the "
                             "analytically marginalized model")
    if model.kind == "grbm" and "posterior_fisher" in flags:
        raise UsageError("eval: posterior Fisher divergence needs a "
                         "continuous-latent posterior")
    if not flags:
        flags = ({"test_ll", "test_fisher"} if model.kind == "grbm"
                 else {"posterior_fisher"})

    with _locked(out_dir):
        if "test_ll" in flags:
            print(f"test_ll {evaluation.test_log_likelihood(dataset, theta):.17g}")
        if "test_fisher" in flags:
            print(f"test_fisher {evaluation.test_fisher_loss(dataset, theta):.17g}")
        if "posterior_fisher" in flags:
            val = evaluation.posterior_fisher_eval(
                model, posterior, theta, phi, dataset,
                np.random.default_rng(seed))
            print(f"posterior_fisher {val:.17g}")
        if model.kind == "grbm" and model.d_v == 2:
            if grid_bounds is None:
                lo = dataset.points.min(axis=0) - 1.0
                hi = dataset.points.max(axis=0) + 1.0
                grid_bounds = ((lo[0], hi[0]), (lo[1], hi[1]))
            grid = evaluation.density_grid(theta, grid_bounds,
                                           grid_resolution)
            grid_path = os.path.join(out_dir, "grid.txt")
            evaluation.save_density_grid(grid, grid_path)
            print(f"grid {grid_path}")
    return 0


def cmd_sample(checkpoint, data_path, count, out, schedule, seed=0):
    model_kind, posterior_kind, theta, phi = load_checkpoint(checkpoint)
    model, posterior = _rebuild(model_kind, posterior_kind, theta, phi)
    anchors = data.load_dataset(data_path)
    rng = np.random.default_rng(seed)
    draws = samplers.eblvm_sample(model, posterior, theta, phi,
                                  anchors.points, count, schedule, rng)
    data.save_dataset(out, data.Dataset(draws, name="samples",
                                        seed=seed, generator=model.kind))
    print(f"wrote {count} samples to {out}")
    return 0


def cmd_probe_bias(config, checkpoint, n_values, k_star=2000):
    model_kind, posterior_kind, theta, phi = load_checkpoint(checkpoint)
    if model_kind != "grbm":
        raise UsageError("probe-bias: needs a checkpoint of the "
                         "analytically tractable model")
    model, posterior = _rebuild(model_kind, posterior_kind, theta, phi)
    if config.data_path is None:
        raise UsageError("probe-bias: paths.data must point at a dataset")
    dataset = data.load_dataset(config.data_path)
    trainer = config.trainer
    batch = dataset.points[:trainer.batch_size]
    rng = np.random.default_rng((trainer.seed, 17))
    bundle = objectives.draw_noise(trainer.objective, batch, rng)
    pts = objectives.perturbed_points(trainer.objective, batch, bundle)
    lower_fn, upper_fn = bilevel._bind_losses(
        model, posterior, trainer, batch, pts, bundle,
        np.random.SeedSequence((trainer.seed, 18)))
    curve = bilevel.gradient_bias_probe(lower_fn, upper_fn, theta, phi,
                                        batch, trainer, n_values,
                                        k_star=k_star)
    with _locked(config.out_dir):
        path = os.path.join(config.out_dir, "bias.csv")
        lines = ["N,bias"] + [f"{n},{b:.17g}" for n, b in curve]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        print(f"wrote {path}")
    return 0


_GENERATORS = ("checkerboard", "grbm")


def cmd_gen_data(kind, n, seed, out, checkpoint=None):
    rng = np.random.default_rng(seed)
    if kind == "checkerboard":
        ds = data.checkerboard(n, rng, seed=seed)
    elif kind == "grbm":
        if checkpoint is None:
            raise UsageError("gen-data grbm: --checkpoint supplies the "
                             "model parameters")
        _, _, theta, _ = load_checkpoint(checkpoint)
        ds = data.grbm_synthetic(theta, n, rng, seed=seed)
    else:
        raise UsageError(f"gen-data: unknown generator kind {kind!r} "
                         f"(expected one of {', '.join(_GENERATORS)})")
    data.save_dataset(out, ds)
    print(f"wrote {n} points to {out}")
    return 0


# ----------------------------------------------------------------- driver

def _load_for(args, required=True):
    if args.config is None:
        if required:
            raise UsageError(f"{args.command}: --config is required")
        return None
    config = load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(
            config, trainer=dataclasses.replace(config.trainer,
                                                seed=args.seed))
    if args.out_dir is not None:
        config = dataclasses.replace(config, out_dir=args.out_dir)
    return config


def _run_train(args):
    return cmd_train(_load_for(args))


def _run_eval(args):
    flags = set()
    if args.test_ll:
        flags.add("test_ll")
    if args.test_fisher:
        flags.add("test_fisher")
    if args.posterior_fisher:
        flags.add("posterior_fisher")
    bounds = (_parse_grid_bounds(args.grid_bounds)
              if args.grid_bounds else None)
    return cmd_eval(args.checkpoint, args.data, args.out_dir or "out",
                    flags=flags, grid_bounds=bounds,
                    grid_resolution=args.grid_res,
                    seed=args.seed if args.seed is not None else 0)


def _run_sample(args):
    schedule = samplers.LangevinSchedule(step=args.step, n_steps=args.steps,
                                         t_lo=args.t_lo, t_hi=args.t_hi)
    return cmd_sample(args.checkpoint, args.data, args.count, args.out,
                      schedule, seed=args.seed if args.seed is not None else 0)


def _run_probe_bias(args):
    try:
        n_values = [int(tok) for tok in args.n_list.split(",")]
    except ValueError:
        raise UsageError(
            f"--n-list wants comma-separated integers, got {args.n_list!r}"
        ) from None
    return cmd_probe_bias(_load_for(args), args.checkpoint, n_values,
                          k_star=args.k_star)


def _run_gen_data(args):
    return cmd_gen_data(args.kind, args.n,
                        args.seed if args.seed is not None else 0,
                        args.out, checkpoint=args.checkpoint)


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (INI)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out-dir", dest="out_dir",
                        help="overrides the output directory")

    parser = argparse.ArgumentParser(
        prog="bism", description="bi-level score matching experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common],
                       help="run the trainer from a config")
    t.set_defaults(fn=_run_train)

    e = sub.add_parser("eval", parents=[common],
                       help="report metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--test-ll", action="store_true")
    e.add_argument("--test-fisher", action="store_true")
    e.add_argument("--posterior-fisher", action="store_true")
    e.add_argument("--grid-bounds", help="xmin,xmax,ymin,ymax")
    e.add_argument("--grid-res", type=int, default=128)
    e.set_defaults(fn=_run_eval)

    s = sub.add_parser("sample", parents=[common],
                       help="draw visibles from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True,
                   help="training points used as posterior anchors")
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--step", type=float, default=0.02)
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--t-lo", dest="t_lo", type=float, default=1.0)
    s.add_argument("--t-hi", dest="t_hi", type=float, default=100.0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_run_sample)

    b = sub.add_parser("probe-bias", parents=[common],
                       help="surrogate-gradient bias versus unroll length")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--n-list", required=True,
                   help="comma-separated unroll lengths")
    b.add_argument("--k-star", dest="k_star", type=int, default=2000)
    b.set_defaults(fn=_run_probe_bias)

    g = sub.add_parser("gen-data", parents=[common],
                       help="write a synthetic dataset")
    g.add_argument("kind")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--out", required=True)
    g.add_argument("--checkpoint")
    g.set_defaults(fn=_run_gen_data)

    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ConfigError, ParseError, ResourceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
