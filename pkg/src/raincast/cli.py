"""End-to-end pipeline orchestration as subcommands.

    raincast prep     radiance + rain stacks -> prepared sample archive
    raincast flow     archive -> 16 extrapolated radiance frames per sample
    raincast train    archive -> generator/discriminator checkpoint
    raincast predict  checkpoint + flow outputs -> cumulative rain grids
    raincast eval     predictions vs observations -> CRPS report

Configuration is a flat ``key = value`` text file with dotted section
prefixes (``flow.lk_window = 15``); CLI flags override the file, the file
overrides defaults. Every subcommand validates its inputs before writing
anything, emits byte-deterministic outputs for identical inputs and seed,
and writes results in sample order regardless of worker count.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import cgan
from .errors import ConfigError, EmptyDataset, RaincastError
from .evaluate import accumulate_rain, bilinear_resample, evaluate_run
from .grids import (
    Grid2D,
    GridStack,
    Kind,
    PipelineConfig,
    crop_center,
    read_grid_stack,
    write_grid_stack,
    write_pgm,
)
from .optflow import FlowField, FlowParams, extrapolate, flow_to_stack
from .preprocess import (
    ChannelSelection,
    denormalize,
    make_sequences,
    pearson_correlation_matrix,
)


class ArchiveSample(NamedTuple):
    """Minimal sample view reloaded from a prepared archive."""

    inputs: GridStack
    input_rain: GridStack


@dataclass
class RunConfig:
    """Materialised configuration for one subcommand invocation."""

    paths: dict[str, str]
    channels: ChannelSelection
    pipeline: PipelineConfig
    flow: FlowParams
    train: cgan.TrainConfig
    arch: cgan.GanArchitecture
    stride: int = 1
    seed: int = 0
    workers: int = 1


_PATH_KEYS = ("radiance", "rain", "archive", "flow", "checkpoint", "pred", "obs", "out")
_SECTION_TYPES = {
    "pipeline": PipelineConfig,
    "flow": FlowParams,
    "train": cgan.TrainConfig,
    "arch": cgan.GanArchitecture,
}


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read ``key = value`` lines; '#' starts a comment, blanks are skipped."""
    entries: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            elem = default[0] if default else ""
            if isinstance(elem, float):
                return tuple(float(s) for s in items)
            if isinstance(elem, int):
                return tuple(int(s) for s in items)
            return tuple(items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def build_run_config(entries: dict[str, str]) -> RunConfig:
    """Validate dotted keys against the defaults and build a RunConfig."""
    paths: dict[str, str] = {}
    sections: dict[str, dict] = {name: {} for name in _SECTION_TYPES}
    channels: dict[str, str] = {}
    top: dict[str, str] = {}

    for key, raw in entries.items():
        if "." in key:
            section, field = key.split(".", 1)
        else:
            section, field = "", key
        if section == "paths":
            if field not in _PATH_KEYS:
                raise ConfigError(f"unknown path key paths.{field}")
            paths[field] = raw
        elif section == "channels":
            if field not in ("indices", "names"):
                raise ConfigError(f"unknown key channels.{field}")
            channels[field] = raw
        elif section in _SECTION_TYPES:
            sections[section][field] = raw
        elif section == "prep" and field == "stride":
            top["stride"] = raw
        elif section == "" and field in ("seed", "workers"):
            top[field] = raw
        else:
            raise ConfigError(f"unknown config key {key!r}")

    built = {}
    for name, cls in _SECTION_TYPES.items():
        defaults = cls()
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for field, raw in sections[name].items():
            if field not in names:
                raise ConfigError(f"unknown config key {name}.{field}")
            kwargs[field] = _coerce(raw, getattr(defaults, field), f"{name}.{field}")
        try:
            built[name] = dataclasses.replace(defaults, **kwargs)
        except ValueError as exc:
            raise ConfigError(f"invalid [{name}] configuration: {exc}") from exc

    seed = _coerce(top.get("seed", "0"), 0, "seed")
    if "seed" not in sections["train"]:
        built["train"] = dataclasses.replace(built["train"], seed=seed)

    sel = ChannelSelection()
    if channels:
        kwargs = {}
        if "indices" in channels:
            kwargs["indices"] = _coerce(channels["indices"], (0,), "channels.indices")
        if "names" in channels:
            kwargs["names"] = _coerce(channels["names"], ("",), "channels.names")
        sel = dataclasses.replace(sel, **kwargs)

    return RunConfig(
        paths=paths,
        channels=sel,
        pipeline=built["pipeline"],
        flow=built["flow"],
        train=built["train"],
        arch=built["arch"],
        stride=_coerce(top.get("stride", "1"), 1, "prep.stride"),
        seed=seed,
        workers=_coerce(top.get("workers", "1"), 1, "workers"),
    )


def load_run_config(args: argparse.Namespace) -> RunConfig:
    entries = parse_config_file(args.config) if args.config else {}
    cfg = build_run_config(entries)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if args.workers is not None:
        cfg.workers = args.workers
    if args.out is not None:
        cfg.paths["out"] = args.out
    for key in _PATH_KEYS:
        flag = getattr(args, f"path_{key}", None)
        if flag is not None:
            cfg.paths[key] = flag
    return cfg


def _out_dir(cfg: RunConfig, stage: str) -> Path:
    root = Path(cfg.paths.get("out", "out"))
    return root / stage


def _require_path(cfg: RunConfig, key: str, default: Path | None = None) -> Path:
    if key in cfg.paths:
        path = Path(cfg.paths[key])
    elif default is not None:
        path = default
    else:
        raise ConfigError(f"missing required path: paths.{key}")
    if not path.exists():
        raise ConfigError(f"paths.{key} does not exist: {path}")
    return path


# --- prep ---

def cmd_prep(cfg: RunConfig, args: argparse.Namespace) -> int:
    radiance_path = _require_path(cfg, "radiance")
    rain_path = _require_path(cfg, "rain")
    radiance = read_grid_stack(radiance_path)
    rain = read_grid_stack(rain_path)
    if args.stride is not None:
        cfg.stride = args.stride

    from .grids import replace_nonfinite

    corr = pearson_correlation_matrix(replace_nonfinite(radiance, "max_of_frame"),
                                      cfg.channels)
    samples = make_sequences(radiance, rain, cfg.pipeline, cfg.stride, cfg.channels)

    out = _out_dir(cfg, "prep")
    out.mkdir(parents=True, exist_ok=True)
    (out / "correlation.json").write_text(corr.to_json() + "\n")

    files = []
    flags: dict[str, dict] = {}
    for i, sample in enumerate(samples):
        names = {
            "inputs": f"sample_{i:03d}_inputs.nwg",
            "input_rain": f"sample_{i:03d}_input_rain.nwg",
            "targets": f"sample_{i:03d}_targets.nwg",
        }
        write_grid_stack(sample.inputs, out / names["inputs"])
        write_grid_stack(sample.input_rain, out / names["input_rain"])
        write_grid_stack(sample.targets, out / names["targets"])
        files.append(names)
        sample_flags = {k: v for k, v in sample.inputs.meta.items() if v}
        if sample_flags:
            flags[str(i)] = sample_flags

    manifest = {
        "n_samples": len(samples),
        "dt": rain.dt,
        "t0s": [s.t0 for s in samples],
        "stride": cfg.stride,
        "padded_size": cfg.pipeline.padded_size,
        "files": files,
        "flags": flags,
    }
    (out / "samples.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")
    print(f"prep: wrote {len(samples)} samples to {out}")
    return 0


def _load_archive(path: Path) -> dict:
    manifest_path = path / "samples.json"
    if not manifest_path.exists():
        raise ConfigError(f"no samples.json in archive {path}")
    manifest = json.loads(manifest_path.read_text())
    manifest["_dir"] = path
    return manifest


def _archive_stack(manifest: dict, index: int, role: str) -> GridStack:
    return read_grid_stack(manifest["_dir"] / manifest["files"][index][role])


# --- flow ---

def _flow_one(payload) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    values, t0, dt, pipeline, params, steps = payload
    stack = GridStack(values, kind=Kind.NORM_RADIANCE, t0=t0, dt=dt)
    result = extrapolate(stack, pipeline, params, steps)
    flow = result.meta["flow"]
    return result.values, flow.u, flow.v, result.meta["persistence_fallback"]


def cmd_flow(cfg: RunConfig, args: argparse.Namespace) -> int:
    archive = _load_archive(_require_path(cfg, "archive", _out_dir(cfg, "prep")))
    steps = args.steps if args.steps is not None else cfg.pipeline.horizon
    inputs = [_archive_stack(archive, i, "inputs") for i in range(archive["n_samples"])]

    payloads = [(s.values, s.t0, s.dt, cfg.pipeline, cfg.flow, steps) for s in inputs]
    if cfg.workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_flow_one, payloads))
    else:
        results = [_flow_one(p) for p in payloads]

    out = _out_dir(cfg, "flow")
    out.mkdir(parents=True, exist_ok=True)
    fallbacks = []
    for i, (values, u, v, fallback) in enumerate(results):
        stack = GridStack(values, kind=Kind.NORM_RADIANCE,
                          t0=inputs[i].time_of(inputs[i].n_frames - 1) + inputs[i].dt,
                          dt=inputs[i].dt)
        write_grid_stack(stack, out / f"sample_{i:03d}_extrap.nwg")
        write_grid_stack(flow_to_stack(FlowField(u, v)), out / f"sample_{i:03d}_flow.nwg")
        if fallback:
            fallbacks.append(i)
        if args.emit_pgm:
            for k in range(values.shape[0]):
                write_pgm(Grid2D(values[k, 0]), (-1.0, 1.0),
                          out / f"sample_{i:03d}_step_{k + 1:02d}.pgm")
            strip = np.concatenate([values[k, 0] for k in range(values.shape[0])], axis=1)
            write_pgm(Grid2D(strip), (-1.0, 1.0), out / f"sample_{i:03d}_strip.pgm")
    (out / "flags.json").write_text(
        json.dumps({"persistence_fallback": fallbacks}, sort_keys=True) + "\n")
    print(f"flow: extrapolated {len(results)} samples ({steps} steps) to {out}")
    return 0


# --- train ---

def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    archive = _load_archive(_require_path(cfg, "archive", _out_dir(cfg, "prep")))
    if archive["n_samples"] == 0:
        raise EmptyDataset(f"archive {archive['_dir']} holds no samples")
    samples = [
        ArchiveSample(inputs=_archive_stack(archive, i, "inputs"),
                      input_rain=_archive_stack(archive, i, "input_rain"))
        for i in range(archive["n_samples"])
    ]
    pairs = cgan.flatten_pairs(samples)

    train_cfg = cfg.train
    if args.epochs is not None:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)

    out = _out_dir(cfg, "train")
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"

    with open(metrics_path, "w") as metrics_fh:
        def on_metrics(row: dict) -> None:
            metrics_fh.write(json.dumps(row, sort_keys=True) + "\n")

        def on_epoch(state: cgan.GanState, epoch: int) -> None:
            cgan.save_checkpoint(state, out / f"checkpoint_epoch_{epoch + 1:04d}.ckpt")

        state = cgan.train(pairs, train_cfg, cfg.arch,
                           on_epoch=on_epoch, on_metrics=on_metrics)
    cgan.save_checkpoint(state, out / "checkpoint_final.ckpt")
    print(f"train: {state.step} steps, checkpoint at {out / 'checkpoint_final.ckpt'}")
    return 0


# --- predict ---

def _predict_one(payload) -> np.ndarray:
    frames, ckpt_path, pipeline = payload
    state = cgan.load_checkpoint(ckpt_path)
    rain_norm = cgan.predict(state, frames)
    native = pipeline.native_size
    total = None
    denorm = np.empty_like(rain_norm[:, 0, :native, :native])
    for k in range(rain_norm.shape[0]):
        grid = denormalize(Grid2D(rain_norm[k, 0], kind=Kind.NORM_RAIN), pipeline.rain_scale)
        denorm[k] = crop_center(grid, native, native).values
    cum = accumulate_rain(GridStack(denorm[:, None], kind=Kind.RAIN_RATE),
                          pipeline.dt_hours)
    return bilinear_resample(cum, pipeline.resample_factor).values


def _observed_cumulative(targets: GridStack, pipeline: PipelineConfig) -> np.ndarray:
    native = pipeline.native_size
    denorm = np.empty((targets.n_frames, native, native))
    for k in range(targets.n_frames):
        grid = denormalize(Grid2D(targets.values[k, 0], kind=Kind.NORM_RAIN),
                           pipeline.rain_scale)
        denorm[k] = crop_center(grid, native, native).values
    cum = accumulate_rain(GridStack(denorm[:, None], kind=Kind.RAIN_RATE),
                          pipeline.dt_hours)
    return bilinear_resample(cum, pipeline.resample_factor).values


def cmd_predict(cfg: RunConfig, args: argparse.Namespace) -> int:
    ckpt_path = _require_path(cfg, "checkpoint",
                              _out_dir(cfg, "train") / "checkpoint_final.ckpt")
    flow_dir = _require_path(cfg, "flow", _out_dir(cfg, "flow"))
    archive = _load_archive(_require_path(cfg, "archive", _out_dir(cfg, "prep")))
    cgan.load_checkpoint(ckpt_path)  # validate before writing anything

    extrap = []
    for i in range(archive["n_samples"]):
        path = flow_dir / f"sample_{i:03d}_extrap.nwg"
        if not path.exists():
            raise ConfigError(f"missing flow output for sample {i}: {path}")
        extrap.append(read_grid_stack(path))

    payloads = [(s.values, str(ckpt_path), cfg.pipeline) for s in extrap]
    if cfg.workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            pred_grids = list(pool.map(_predict_one, payloads))
    else:
        pred_grids = [_predict_one(p) for p in payloads]
    obs_grids = [
        _observed_cumulative(_archive_stack(archive, i, "targets"), cfg.pipeline)
        for i in range(archive["n_samples"])
    ]

    out = _out_dir(cfg, "predict")
    out.mkdir(parents=True, exist_ok=True)
    pred_stack = GridStack(np.stack(pred_grids)[:, None], kind=Kind.RAIN_RATE,
                           t0=archive["t0s"][0] if archive["t0s"] else 0.0,
                           dt=archive["dt"])
    obs_stack = GridStack(np.stack(obs_grids)[:, None], kind=Kind.RAIN_RATE,
                          t0=pred_stack.t0, dt=pred_stack.dt)
    write_grid_stack(pred_stack, out / "pred_cum.nwg")
    write_grid_stack(obs_stack, out / "obs_cum.nwg")
    if args.emit_pgm:
        for i in range(pred_stack.n_frames):
            write_pgm(Grid2D(pred_stack.values[i, 0]), (0.0, 50.0),
                      out / f"sample_{i:03d}_pred_cum.pgm")
    print(f"predict: wrote cumulative grids for {pred_stack.n_frames} samples to {out}")
    return 0


# --- eval ---

def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    pred_path = _require_path(cfg, "pred", _out_dir(cfg, "predict") / "pred_cum.nwg")
    obs_path = _require_path(cfg, "obs", _out_dir(cfg, "predict") / "obs_cum.nwg")
    pred = read_grid_stack(pred_path)
    obs = read_grid_stack(obs_path)
    report = evaluate_run(pred, obs, cfg.pipeline, estimator=args.estimator,
                          block=args.block)
    out = _out_dir(cfg, "eval")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    print(f"eval: mean CRPS = {report.mean_crps:.6f} over {report.n_samples} samples "
          f"(block {report.block_size}, {report.estimator})")
    return 0


# --- entry point ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="raincast",
        description="IR-radiance precipitation nowcasting pipeline",
    )
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    parser.add_argument("--workers", type=int, default=None, help="worker pool size")
    parser.add_argument("--out", default=None, help="output root directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_prep = sub.add_parser("prep", help="build the prepared sample archive")
    p_prep.add_argument("--radiance", dest="path_radiance", help="input radiance NWG1")
    p_prep.add_argument("--rain", dest="path_rain", help="input rain NWG1")
    p_prep.add_argument("--stride", type=int, default=None, help="window stride (frames)")
    p_prep.set_defaults(func=cmd_prep)

    p_flow = sub.add_parser("flow", help="extrapolate radiance frames")
    p_flow.add_argument("--archive", dest="path_archive", help="prepared sample archive")
    p_flow.add_argument("--steps", type=int, default=None, help="forecast steps (default 16)")
    p_flow.add_argument("--emit-pgm", action="store_true", help="write inspection PGMs")
    p_flow.set_defaults(func=cmd_flow)

    p_train = sub.add_parser("train", help="train the radiance -> rain translator")
    p_train.add_argument("--archive", dest="path_archive", help="prepared sample archive")
    p_train.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    p_train.set_defaults(func=cmd_train)

    p_pred = sub.add_parser("predict", help="translate flow outputs to cumulative rain")
    p_pred.add_argument("--checkpoint", dest="path_checkpoint", help="trained checkpoint")
    p_pred.add_argument("--flow-dir", dest="path_flow", help="flow output directory")
    p_pred.add_argument("--archive", dest="path_archive", help="prepared sample archive")
    p_pred.add_argument("--emit-pgm", action="store_true", help="write inspection PGMs")
    p_pred.set_defaults(func=cmd_predict)

    p_eval = sub.add_parser("eval", help="score predictions with CRPS")
    p_eval.add_argument("--pred", dest="path_pred", help="predicted cumulative NWG1")
    p_eval.add_argument("--obs", dest="path_obs", help="observed cumulative NWG1")
    p_eval.add_argument("--block", type=int, default=32, help="aggregation block size")
    p_eval.add_argument("--estimator", choices=("nrg", "fair"), default="nrg")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args)
        return args.func(cfg, args)
    except RaincastError as exc:
        print(f"raincast {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
