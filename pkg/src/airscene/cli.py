"""Command line entry point: synth, train, eval, and explain runs.

Every subcommand resolves its parameters in three layers (built-in defaults,
then the matching table of a TOML config file, then explicitly passed flags)
and records the merged result in ``run.json`` inside the output directory,
so a finished run can be reproduced from that file alone.  A single root
``--seed`` feeds labeled substreams to the scenario generator and trainer;
no subcommand writes outside its ``--out`` directory.

Exit codes: 0 success, 2 usage or input error, 1 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

try:
    import tomllib
except ModuleNotFoundError:                     # 3.10 fallback
    import tomli as tomllib

from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    SceneWindow,
    build_scenes,
    ingest_tracks,
    load_scenes,
    resample,
    save_stats,
    write_tracks_csv,
)
from .estimator import AttentionTrajectoryPredictor
from .explain import (
    Region,
    attention_timeseries,
    export_frames,
    region_timeseries,
    render_scene,
)
from .numerics import NumericsError
from .scenario import ScenarioConfig, ScenarioError, generate_scenario
from .seeding import derive_seed
from .training import evaluate, evaluate_baseline, save_metrics_csv

log = logging.getLogger(__name__)


class UsageError(Exception):
    """Bad flags, bad config file, or unusable inputs; exits with code 2."""


_SYNTH_DEFAULTS: dict = {
    "out": None,
    "seed": 0,
    "n_episodes": 4,
    "n_aircraft_min": 4,
    "n_aircraft_max": 6,
    "direct_to_prob": 0.3,
    "noise_std_km": 0.05,
    "min_gap_s": 90.0,
    "sample_dt_s": 5.0,
}

_CORPUS_DEFAULTS: dict = {
    "tracks": None,
    "scenes": None,
    "dt": 5.0,
    "stride": 1,
    "n_max": 8,
}

_TRAIN_DEFAULTS: dict = {
    "out": None,
    "seed": 0,
    **_CORPUS_DEFAULTS,
    "d_model": 64,
    "n_heads": 4,
    "n_variate_layers": 2,
    "n_aircraft_layers": 2,
    "ffn_hidden": 128,
    "mlp_hidden": 128,
    "T": 24,
    "H": 12,
    "lr": 1e-3,
    "batch_size": 8,
    "max_epochs": 100,
    "patience": 10,
    "clip_norm": 1.0,
    "loss_mode": "supervised",
    "lr_schedule": "cosine",
    "val_fraction": 0.2,
}

_EVAL_DEFAULTS: dict = {
    "out": None,
    "seed": 0,
    "checkpoint": None,
    **_CORPUS_DEFAULTS,
}

_EXPLAIN_DEFAULTS: dict = {
    "out": None,
    "seed": 0,
    "checkpoint": None,
    **_CORPUS_DEFAULTS,
    "query": None,
    "region": None,
    "mode": "row",
    "reduction": "last-layer-mean",
    "render": False,
}


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def _load_config_table(path, subcommand: str, allowed: set[str]) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"config file {p} is not valid TOML: {exc}") from None
    table = doc.get(subcommand, {})
    if not isinstance(table, dict):
        raise UsageError(f"[{subcommand}] in {p} must be a table")
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise UsageError(f"unknown [{subcommand}] config keys: {', '.join(unknown)}")
    return table


def resolve_config(subcommand: str, args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config-file table < explicitly passed flags."""
    resolved = dict(defaults)
    if args.config is not None:
        resolved.update(_load_config_table(args.config, subcommand, set(defaults)))
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _prepare_out(out, force: bool) -> Path:
    if not out:
        raise UsageError("--out is required (flag or config file)")
    out_dir = Path(out)
    if out_dir.exists():
        if not out_dir.is_dir():
            raise UsageError(f"--out {out_dir} exists and is not a directory")
        if any(out_dir.iterdir()) and not force:
            raise UsageError(
                f"output dir {out_dir} is not empty; pass --force to write into it"
            )
    else:
        out_dir.mkdir(parents=True)
    return out_dir


def _write_run_json(out_dir: Path, subcommand: str, resolved: dict) -> None:
    payload = {"subcommand": subcommand, **resolved, "out": str(out_dir)}
    text = json.dumps(payload, sort_keys=True, indent=2)
    (out_dir / "run.json").write_text(text + "\n")


def _load_corpus(resolved: dict, T: int, H: int) -> list[SceneWindow]:
    tracks_path, scenes_path = resolved["tracks"], resolved["scenes"]
    if (tracks_path is None) == (scenes_path is None):
        raise UsageError("exactly one of --tracks or --scenes is required")
    if scenes_path is not None:
        p = Path(scenes_path)
        if not p.is_file():
            raise UsageError(f"scenes file not found: {p}")
        scenes = load_scenes(p)
    else:
        p = Path(tracks_path)
        if not p.is_file():
            raise UsageError(f"tracks file not found: {p}")
        dt = float(resolved["dt"])
        result = ingest_tracks(p)
        if result.rejected_rows or result.dropped_tracks:
            log.info("ingest: %d rows rejected, %d tracks dropped",
                     result.rejected_rows, result.dropped_tracks)
        uniform = [resample(tr, dt) for tr in result.tracks]
        scenes = build_scenes(uniform, dt=dt, T=T, H=H,
                              stride=int(resolved["stride"]),
                              n_max=int(resolved["n_max"]))
    if not scenes:
        raise UsageError(f"no usable scenes in {p}")
    bad = [s for s in scenes if s.T != T or s.H != H]
    if bad:
        raise UsageError(
            f"scenes have T={bad[0].T}, H={bad[0].H} but the model expects T={T}, H={H}"
        )
    return scenes


def _load_model(resolved: dict):
    path = resolved["checkpoint"]
    if not path:
        raise UsageError("--checkpoint is required (flag or config file)")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint file not found: {p}")
    try:
        return load_checkpoint(p)
    except CheckpointError as exc:
        raise UsageError(f"cannot load checkpoint {p}: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    resolved = resolve_config("synth", args, _SYNTH_DEFAULTS)
    out_dir = _prepare_out(resolved["out"], args.force)
    try:
        cfg = ScenarioConfig(
            seed=derive_seed(int(resolved["seed"]), "synth"),
            n_episodes=int(resolved["n_episodes"]),
            n_aircraft_range=(int(resolved["n_aircraft_min"]),
                              int(resolved["n_aircraft_max"])),
            direct_to_prob=float(resolved["direct_to_prob"]),
            noise_std_km=float(resolved["noise_std_km"]),
            min_gap_s=float(resolved["min_gap_s"]),
            sample_dt_s=float(resolved["sample_dt_s"]),
        )
        result = generate_scenario(cfg)
    except ScenarioError as exc:
        raise UsageError(str(exc)) from None

    write_tracks_csv(result.tracks, out_dir / "tracks.csv")
    manifest = {
        "seed": cfg.seed,
        "config": dataclasses.asdict(cfg),
        "events": [dataclasses.asdict(e) for e in result.events],
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )
    _write_run_json(out_dir, "synth", resolved)
    n_direct = sum(e.direct_to for e in result.events)
    print(f"wrote {len(result.tracks)} tracks ({n_direct} direct-to) to {out_dir}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    resolved = resolve_config("train", args, _TRAIN_DEFAULTS)
    out_dir = _prepare_out(resolved["out"], args.force)
    scenes = _load_corpus(resolved, int(resolved["T"]), int(resolved["H"]))
    est = AttentionTrajectoryPredictor(
        d_model=int(resolved["d_model"]),
        n_heads=int(resolved["n_heads"]),
        n_variate_layers=int(resolved["n_variate_layers"]),
        n_aircraft_layers=int(resolved["n_aircraft_layers"]),
        ffn_hidden=int(resolved["ffn_hidden"]),
        mlp_hidden=int(resolved["mlp_hidden"]),
        T=int(resolved["T"]),
        H=int(resolved["H"]),
        lr=float(resolved["lr"]),
        batch_size=int(resolved["batch_size"]),
        max_epochs=int(resolved["max_epochs"]),
        patience=int(resolved["patience"]),
        clip_norm=float(resolved["clip_norm"]),
        loss_mode=str(resolved["loss_mode"]),
        lr_schedule=str(resolved["lr_schedule"]),
        val_fraction=float(resolved["val_fraction"]),
        seed=derive_seed(int(resolved["seed"]), "train"),
    )
    try:
        est.fit(scenes)
    except NumericsError:
        raise
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None

    est.save(out_dir / "checkpoint.json")
    save_stats(est.stats_, out_dir / "stats.json")
    save_metrics_csv(est.metrics_, out_dir / "metrics.csv")
    _write_run_json(out_dir, "train", resolved)
    best = est.metrics_[est.best_epoch_]
    print(f"trained {len(est.metrics_)} epochs on {len(scenes)} scenes")
    if est.loss_mode == "supervised":
        print(f"best epoch {best.epoch}: val ADE {best.val_ade:.4f} km, "
              f"FDE {best.val_fde:.4f} km")
    else:
        print(f"best epoch {best.epoch}: val reconstruction loss {best.val_loss:.6f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    resolved = resolve_config("eval", args, _EVAL_DEFAULTS)
    out_dir = _prepare_out(resolved["out"], args.force)
    params, model_cfg, stats = _load_model(resolved)
    scenes = _load_corpus(resolved, model_cfg.T, model_cfg.H)
    model = evaluate(scenes, params, model_cfg, stats)
    base = evaluate_baseline(scenes)
    payload = {
        "model": {"ade": model.ade, "fde": model.fde},
        "baseline": {"ade": base.ade, "fde": base.fde},
        "n_aircraft": model.n_aircraft,
        "n_scenes": len(scenes),
    }
    (out_dir / "eval.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n"
    )
    _write_run_json(out_dir, "eval", resolved)
    print(f"model     ADE {model.ade:.4f} km  FDE {model.fde:.4f} km")
    print(f"baseline  ADE {base.ade:.4f} km  FDE {base.fde:.4f} km  "
          f"({model.n_aircraft} aircraft, {len(scenes)} scenes)")
    return 0


def _parse_region(text: str) -> Region:
    try:
        x0, y0, x1, y1 = (float(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(
            f"--region wants 'x0,y0,x1,y1' in km, got {text!r}"
        ) from None
    try:
        return Region(x_min=min(x0, x1), x_max=max(x0, x1),
                      y_min=min(y0, y1), y_max=max(y0, y1))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_explain(args: argparse.Namespace) -> int:
    resolved = resolve_config("explain", args, _EXPLAIN_DEFAULTS)
    out_dir = _prepare_out(resolved["out"], args.force)
    params, model_cfg, stats = _load_model(resolved)
    scenes = _load_corpus(resolved, model_cfg.T, model_cfg.H)

    reduction = str(resolved["reduction"])
    if reduction not in ("last-layer-mean", "mean"):
        raise UsageError(
            f"reduction must be 'last-layer-mean' or 'mean', got {reduction!r}"
        )
    query, region_text = resolved["query"], resolved["region"]
    if (query is None) == (region_text is None):
        raise UsageError("exactly one of --query or --region is required")

    if query is not None:
        available = sorted({sid for sc in scenes
                            for sid, ok in zip(sc.ids, sc.valid) if ok})
        if query not in available:
            raise UsageError(
                f"query {query!r} not found; available ids: {', '.join(available)}"
            )
        series = attention_timeseries(scenes, params, model_cfg, stats,
                                      query, reduction)
    else:
        region = _parse_region(region_text)
        try:
            series = region_timeseries(scenes, params, model_cfg, stats,
                                       region, str(resolved["mode"]), reduction)
        except NumericsError:
            raise
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    export_frames(series, out_dir / "frames.json")
    rendered = 0
    if resolved["render"]:
        by_t0 = {sc.t0: sc for sc in scenes}
        for frame in series.frames:
            svg = render_scene(by_t0[frame.t0], frame, query_id=query)
            (out_dir / f"frame_{frame.t0:g}.svg").write_text(svg)
            rendered += 1
    _write_run_json(out_dir, "explain", resolved)
    note = f" ({len(series.skipped)} scenes skipped)" if series.skipped else ""
    svgs = f", {rendered} SVG renders" if rendered else ""
    print(f"wrote {len(series.frames)} frames{svgs} to {out_dir}{note}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="TOML",
                   help="config file with one flat table per subcommand")
    p.add_argument("--out", metavar="DIR",
                   help="output directory (required here or in the config)")
    p.add_argument("--seed", type=int, metavar="N",
                   help="root seed; stage streams are derived from it (default 0)")
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty output directory")


def _add_corpus_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tracks", metavar="CSV", help="track CSV to window into scenes")
    p.add_argument("--scenes", metavar="JSON", help="prebuilt scenes file")
    p.add_argument("--dt", type=float, metavar="S", help="resample step, seconds")
    p.add_argument("--stride", type=int, help="window stride in steps")
    p.add_argument("--n-max", type=int, dest="n_max",
                   help="max aircraft per scene (closest to runway kept)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="airscene",
        description="synthetic terminal-area traffic, attention-based "
                    "trajectory prediction, and attention explanations",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic arrival-traffic corpus")
    _add_common(p)
    p.add_argument("--n-episodes", type=int, dest="n_episodes")
    p.add_argument("--n-aircraft-min", type=int, dest="n_aircraft_min")
    p.add_argument("--n-aircraft-max", type=int, dest="n_aircraft_max")
    p.add_argument("--direct-to-prob", type=float, dest="direct_to_prob")
    p.add_argument("--noise-std-km", type=float, dest="noise_std_km")
    p.add_argument("--min-gap-s", type=float, dest="min_gap_s")
    p.add_argument("--sample-dt-s", type=float, dest="sample_dt_s")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", help="train the predictor and write a checkpoint")
    _add_common(p)
    _add_corpus_flags(p)
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--n-heads", type=int, dest="n_heads")
    p.add_argument("--n-variate-layers", type=int, dest="n_variate_layers")
    p.add_argument("--n-aircraft-layers", type=int, dest="n_aircraft_layers")
    p.add_argument("--ffn-hidden", type=int, dest="ffn_hidden")
    p.add_argument("--mlp-hidden", type=int, dest="mlp_hidden")
    p.add_argument("--T", type=int, dest="T", help="past steps per window")
    p.add_argument("--H", type=int, dest="H", help="future steps per window")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--clip-norm", type=float, dest="clip_norm")
    p.add_argument("--loss-mode", dest="loss_mode",
                   choices=("supervised", "unsupervised"))
    p.add_argument("--lr-schedule", dest="lr_schedule",
                   choices=("constant", "cosine"))
    p.add_argument("--val-fraction", type=float, dest="val_fraction")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against the "
                                    "constant-velocity baseline")
    _add_common(p)
    _add_corpus_flags(p)
    p.add_argument("--checkpoint", metavar="JSON")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("explain", help="attention scores for a query aircraft "
                                       "or a fixed region")
    _add_common(p)
    _add_corpus_flags(p)
    p.add_argument("--checkpoint", metavar="JSON")
    p.add_argument("--query", metavar="ID", help="aircraft to follow")
    p.add_argument("--region", metavar="X0,Y0,X1,Y1",
                   help="fixed box in km; switches to the region view")
    p.add_argument("--mode", choices=("row", "column"),
                   help="region view: average member rows or inbound columns")
    p.add_argument("--reduction", choices=("last-layer-mean", "mean"))
    p.add_argument("--render", action="store_true", default=None,
                   help="also write one SVG per frame")
    p.set_defaults(handler=cmd_explain)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:                   # argparse already printed usage
        return int(exc.code or 0)
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort CLI boundary
        log.error("internal error: %s", exc)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
