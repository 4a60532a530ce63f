"""``worldscan`` command line.

Every subcommand reads its parameters from built-in defaults, then an
optional JSON config (``--config``, flat object, unknown keys rejected), then
explicit flags, later sources winning. Each run writes ``report.json`` plus
command artifacts into ``--out-dir``. Artifacts hold no timestamps or
absolute paths, so a fixed seed gives byte-identical files; the wall-clock
time is printed to stderr only.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import cpscan, datafilter, refinersched, seqmodel, trajbench
from .errors import AlignmentError, InvalidInputError, SamplingError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
BLOWUP_NORM = 1e6


class ConfigError(Exception):
    pass


# -- config plumbing --------------------------------------------------------

@dataclass
class Param:
    default: object
    help: str = ""
    kind: type | None = None  # element type for lists, value type for None defaults

    @property
    def type(self):
        if self.kind is not None and not isinstance(self.default, list):
            return self.kind
        return type(self.default)


def _coerce(key: str, value, p: Param):
    if value is None:
        return None
    t = p.type
    if t is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        elem = p.kind or (type(p.default[0]) if p.default else object)
        return [_coerce(key, v, Param(None, kind=elem)) if elem is not object else v for v in value]
    if t is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if t is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if t is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if t is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def resolve_config(params: dict[str, Param], config_path: str | None, flags: dict) -> dict:
    """Defaults, then config file, then explicit flags."""
    cfg = {k: p.default for k, p in params.items()}
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(params))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in loaded.items():
            cfg[k] = _coerce(k, v, params[k])
    for k, v in flags.items():
        if k in params and v is not None:
            cfg[k] = _coerce(k, v, params[k])
    return cfg


def _add_params(parser: argparse.ArgumentParser, params: dict[str, Param]):
    for key, p in params.items():
        flag = "--" + key.replace("_", "-")
        if p.type is bool:
            parser.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=p.help)
        elif p.type is list:
            elem = p.kind or (type(p.default[0]) if p.default else str)
            parser.add_argument(flag, dest=key, nargs="+", type=elem, default=None, help=p.help)
        else:
            parser.add_argument(flag, dest=key, type=p.type, default=None, help=p.help)


# -- output helpers ---------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=1, allow_nan=False) + "\n")


def write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else _fmt(r.get(k))) for k in columns})


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


class Outputs:
    def __init__(self, out_dir: Path, fmt: str):
        self.dir = out_dir
        self.fmt = fmt
        self.files: list[str] = []
        out_dir.mkdir(parents=True, exist_ok=True)

    def table(self, stem: str, rows: list[dict], columns: list[str] | None = None, json_obj=None):
        if self.fmt in ("json", "both"):
            write_json(self.dir / f"{stem}.json", rows if json_obj is None else json_obj)
            self.files.append(f"{stem}.json")
        if self.fmt in ("csv", "both"):
            write_csv(self.dir / f"{stem}.csv", rows, columns)
            self.files.append(f"{stem}.csv")

    def json(self, name: str, obj):
        write_json(self.dir / name, obj)
        self.files.append(name)


# -- commands ---------------------------------------------------------------

SCAN_PARAMS = {
    "d": Param(16, "head dimension"),
    "s": Param(256, "spatial tokens per frame"),
    "t": Param(1000, "number of frames"),
    "gamma": Param(0.99, "decay gate"),
    "scaling": Param("frame", "key scaling: frame | l2 | none"),
    "kernel": Param("gdn", "recurrence: gdn | linear"),
}


def cmd_scan_demo(cfg: dict, out: Outputs) -> tuple[dict, int]:
    if cfg["scaling"] not in ("frame", "l2", "none"):
        raise ConfigError(f"scaling must be frame, l2 or none, got {cfg['scaling']!r}")
    if cfg["kernel"] not in ("gdn", "linear"):
        raise ConfigError(f"kernel must be gdn or linear, got {cfg['kernel']!r}")
    if min(cfg["d"], cfg["s"], cfg["t"]) < 1:
        raise ConfigError("d, s and t must be >= 1")
    rng = np.random.default_rng(cfg["seed"])
    d, s = cfg["d"], cfg["s"]
    state = np.zeros((d, d))
    rows = []
    first_bad = None
    with np.errstate(all="ignore"):
        for t in range(cfg["t"]):
            # frames drawn one at a time so long runs stay small in memory
            (frame,) = seqmodel.random_frames(rng, 1, d, s, scaling=cfg["scaling"], gamma=cfg["gamma"])
            if cfg["kernel"] == "gdn":
                state, o = seqmodel.gdn_frame_step(state, frame)
            else:
                state = state + frame.v @ frame.k.T
                o = state @ frame.q
            sn = float(np.linalg.norm(state))
            rows.append({"frame_index": t, "state_norm": sn, "output_norm": float(np.linalg.norm(o))})
            if first_bad is None and not (math.isfinite(sn) and sn <= BLOWUP_NORM):
                first_bad = t
    out.table("trace", rows, ["frame_index", "state_norm", "output_norm"])
    norms = np.array([r["state_norm"] for r in rows])
    finite = norms[np.isfinite(norms)]
    metrics = {
        "blowup": first_bad is not None,
        "first_unstable_step": first_bad,
        "max_state_norm": float(finite.max()) if finite.size else None,
        "final_state_norm": rows[-1]["state_norm"],
        "all_finite": bool(np.all(np.isfinite(norms))),
    }
    return metrics, EXIT_OK


CP_PARAMS = {
    "t": Param(32, "sequence length"),
    "shards": Param([1, 2, 4, 8], "shard counts to test"),
    "d": Param(8, "head dimension"),
    "s": Param(16, "tokens per frame"),
    "kernels": Param([1, 2, 3, 5], "temporal conv kernel sizes"),
    "tolerance": Param(1e-10, "pass threshold on max abs deviation"),
    "corrupt": Param(False, "halve every shard's input composite (negative control)"),
}


def cmd_cp_verify(cfg: dict, out: Outputs) -> tuple[dict, int]:
    rng = np.random.default_rng(cfg["seed"])
    t = cfg["t"]
    frames = seqmodel.random_frames(rng, t, cfg["d"], cfg["s"])
    seq = seqmodel.gdn_forward_scan(frames)
    rows = []
    for p in cfg["shards"]:
        try:
            plan = cpscan.ShardPlan(t, p)
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from exc
        shards = plan.split(frames)
        summaries = [cpscan.shard_summary(sh, cfg["d"]) for sh in shards]
        if cfg["corrupt"]:
            summaries = [cpscan.ShardSummary(sm.c, 0.5 * sm.h) for sm in summaries]
        res = cpscan.scan_from_starts(shards, cpscan.prefix_compose(summaries))
        dev = max(float(np.max(np.abs(a - b))) for a, b in zip(res.outputs, seq.outputs))
        rows.append({"check": "scan", "t": t, "p": p, "kernel": None, "causal": None, "max_deviation": dev})
    x = rng.standard_normal((t, cfg["d"]))
    for k in cfg["kernels"]:
        if k < 1:
            raise ConfigError(f"kernel sizes must be >= 1, got {k}")
        w = rng.standard_normal(k)
        for causal in (False, True):
            full = cpscan.temporal_conv(x, w, causal)
            for p in cfg["shards"]:
                plan = cpscan.ShardPlan(t, p)
                parts = [x[r.start:r.stop] for r in plan.ranges]
                got = np.concatenate(cpscan.sharded_conv(parts, w, causal))
                dev = float(np.max(np.abs(got - full)))
                rows.append({"check": "conv", "t": t, "p": p, "kernel": k, "causal": causal, "max_deviation": dev})
    out.table("deviations", rows, ["check", "t", "p", "kernel", "causal", "max_deviation"])
    worst = max(r["max_deviation"] for r in rows)
    ok = worst <= cfg["tolerance"]
    return {"max_deviation": worst, "passed": ok, "checks": len(rows)}, EXIT_OK if ok else EXIT_FAIL


TRAJ_PARAMS = {
    "template": Param("orbit_return", "bundled template name or waypoint JSON file"),
    "scene": Param(None, "scene JSON {median_depth, point_cloud?}", kind=str),
    "median_depth": Param(10.0, "scene median depth, metres (ignored when --scene is given)"),
    "point_cloud": Param(None, "point cloud file (.bin float32 xyz, .npy or text)", kind=str),
    "duration": Param(60.0, "seconds"),
    "fps": Param(16.0, "camera frames per second"),
    "max_points": Param(200_000, "cloud points kept for collision checks"),
}


def _load_scene(cfg: dict) -> trajbench.Scene:
    depth, cloud_path = cfg["median_depth"], cfg["point_cloud"]
    base = Path(".")
    if cfg["scene"]:
        path = Path(cfg["scene"])
        if not path.exists():
            raise FileNotFoundError(f"scene file not found: {path}")
        obj = json.loads(path.read_text())
        depth = float(obj["median_depth"])
        cloud_path = obj.get("point_cloud", cloud_path)
        base = path.parent
    cloud = None
    if cloud_path:
        cp = Path(cloud_path)
        if not cp.is_absolute() and cfg["scene"]:
            cp = base / cp
        if not cp.exists():
            raise FileNotFoundError(f"point cloud not found: {cp}")
        cloud = trajbench.load_point_cloud(cp)
    return trajbench.Scene(depth, cloud)


def cmd_traj_gen(cfg: dict, out: Outputs) -> tuple[dict, int]:
    tpl = cfg["template"]
    if tpl.endswith(".json") and not Path(tpl).exists():
        raise FileNotFoundError(f"template file not found: {tpl}")
    template = trajbench.load_template(tpl)
    scene = _load_scene(cfg)
    traj, status = trajbench.generate_trajectory(template, scene, cfg["duration"], cfg["fps"],
                                                 seed=cfg["seed"], max_points=cfg["max_points"])
    pairs = trajbench.detect_revisits(traj, top_k=trajbench.REVISIT_TOP_K)
    stats = trajbench.smoothness_stats(traj)
    trajbench.save_trajectory(out.dir / "trajectory.json", traj, status=status.to_dict(),
                              revisit_pairs=[p.to_dict() for p in pairs])
    out.files.append("trajectory.json")
    out.table("revisits", [p.to_dict() for p in pairs], ["i", "j", "distance", "angle", "score"])
    metrics = dict(stats, collision=status.collision, retries=status.retries, speed_limit=status.speed_limit,
                   speed=status.speed, revisit_pairs=len(pairs))
    return metrics, EXIT_OK


EVAL_PARAMS = {
    "gt": Param([], "ground-truth trajectory files, one per scene", kind=str),
    "est": Param([], "estimated trajectory files, same order", kind=str),
    "gt_fps": Param(None, "override the ground-truth fps", kind=float),
    "est_fps": Param(None, "override the estimate fps", kind=float),
}


def _eval_scene(gt: trajbench.Trajectory, est: trajbench.Trajectory) -> dict:
    metrics, _ = trajbench.evaluate_camera(gt, est)
    pairs = trajbench.detect_revisits(gt, top_k=trajbench.REVISIT_TOP_K)
    return dict(metrics.to_dict(), revisit_pairs=[p.to_dict() for p in pairs])


def cmd_traj_eval(cfg: dict, out: Outputs) -> tuple[dict, int]:
    if not cfg["gt"] or len(cfg["gt"]) != len(cfg["est"]):
        raise ConfigError("need matching, nonempty --gt and --est lists")
    pairs = []
    for g, e in zip(cfg["gt"], cfg["est"]):
        gt, est = trajbench.load_trajectory(g), trajbench.load_trajectory(e)
        if cfg["gt_fps"]:
            gt.fps = cfg["gt_fps"]
        if cfg["est_fps"]:
            est.fps = cfg["est_fps"]
        pairs.append((gt, est))
    cap = int(os.environ.get("WORLDSCAN_THREADS", "0") or 0) or (os.cpu_count() or 1)
    results = trajbench.evaluate_many(pairs, workers=min(cap, len(pairs)), fn=_eval_scene)
    scenes = [dict(scene=i, gt=Path(g).name, est=Path(e).name, **r)
              for i, (g, e, r) in enumerate(zip(cfg["gt"], cfg["est"], results))]
    rows = [{k: s[k] for k in ("scene", "gt", "est", "rot_err_deg", "trans_err", "cam_mc")} for s in scenes]
    mean = {k: float(np.mean([s[k] for s in scenes])) for k in ("rot_err_deg", "trans_err", "cam_mc")}
    out.table("metrics", rows, list(rows[0]), json_obj={"scenes": scenes, "mean": mean})
    return dict(mean, scenes=len(scenes)), EXIT_OK


REFINE_PARAMS = {
    "shape": Param([4, 8, 8], "latent shape"),
    "schedule": Param(list(refinersched.DISTILLED_SIGMAS), "descending sigmas ending at 0"),
    "velocity": Param("oracle", "velocity model: oracle | zero"),
    "samples": Param(1000, "noise levels to draw from the training sampler"),
    "lognorm_mean": Param(0.0, "logit-normal mean"),
    "lognorm_std": Param(1.0, "logit-normal std"),
    "lognorm_shift": Param(0.0, "additive shift after the sigmoid"),
    "tolerance": Param(1e-10, "pass threshold on the final residual (oracle velocity)"),
}


def cmd_refine_demo(cfg: dict, out: Outputs) -> tuple[dict, int]:
    if cfg["velocity"] not in ("oracle", "zero"):
        raise ConfigError(f"velocity must be oracle or zero, got {cfg['velocity']!r}")
    try:
        schedule = refinersched.SigmaSchedule(tuple(cfg["schedule"]))
        params = refinersched.LogitNormalParams(cfg["lognorm_mean"], cfg["lognorm_std"], cfg["lognorm_shift"])
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc
    rng = np.random.default_rng(cfg["seed"])
    shape = tuple(cfg["shape"])
    x_h = rng.standard_normal(shape)
    x_l = x_h + 0.3 * rng.standard_normal(shape)  # stand-in for a degraded first-stage latent
    x_1 = refinersched.make_source(x_l, schedule.sigma_start, rng.standard_normal(shape))
    if cfg["velocity"] == "oracle":
        vel = refinersched.oracle_velocity(x_1, x_h, schedule.sigma_start)
    else:
        vel = lambda x, sigma: np.zeros_like(x)
    trace = refinersched.RefineTrace()
    x = refinersched.euler_refine(x_1, schedule, vel, trace)
    out.table("refine_trace", trace.steps, ["sigma", "mean_abs"])
    sigmas = refinersched.sample_sigmas(params, schedule.sigma_start, rng, cfg["samples"])
    out.table("sigma_samples", [{"sigma": float(s)} for s in sigmas], ["sigma"])
    residual = float(np.max(np.abs(x - x_h)))
    in_range = bool(np.all((sigmas > 0) & (sigmas <= schedule.sigma_start)))
    metrics = {"final_residual": residual, "sigma_min": float(sigmas.min()), "sigma_max": float(sigmas.max()),
               "sigma_in_range": in_range, "steps": len(schedule.steps) - 1}
    ok = in_range and (cfg["velocity"] != "oracle" or residual <= cfg["tolerance"])
    return metrics, EXIT_OK if ok else EXIT_FAIL


FILTER_PARAMS = {
    "stats": Param(None, "clip-stats CSV (clip_id plus metric columns)", kind=str),
    "profile": Param("MiraData", "dataset profile name"),
    "profiles": Param(None, "profile JSON file (default: bundled table)", kind=str),
}


def cmd_filter_audit(cfg: dict, out: Outputs) -> tuple[dict, int]:
    if not cfg["stats"]:
        raise ConfigError("--stats is required")
    if not Path(cfg["stats"]).exists():
        raise FileNotFoundError(f"stats file not found: {cfg['stats']}")
    profiles = datafilter.load_profiles(cfg["profiles"])
    if cfg["profile"] not in profiles:
        raise ConfigError(f"unknown profile {cfg['profile']!r}; available: {', '.join(sorted(profiles))}")
    rows = datafilter.audit(datafilter.read_clip_stats(cfg["stats"]), profiles[cfg["profile"]])
    if out.fmt in ("csv", "both"):
        datafilter.write_audit_csv(out.dir / "audit.csv", rows)
        out.files.append("audit.csv")
    if out.fmt in ("json", "both"):
        out.json("audit.json", rows)
    passed = sum(r["pass"] for r in rows)
    return {"clips": len(rows), "passed": passed, "rejected": len(rows) - passed}, EXIT_OK


@dataclass
class Command:
    params: dict[str, Param]
    run: Callable[[dict, Outputs], tuple[dict, int]]
    help: str


COMMANDS = {
    "scan-demo": Command(SCAN_PARAMS, cmd_scan_demo, "run a frame-wise scan and trace state norms"),
    "cp-verify": Command(CP_PARAMS, cmd_cp_verify, "check sharded scan and halo conv against unsharded"),
    "traj-gen": Command(TRAJ_PARAMS, cmd_traj_gen, "generate a benchmark camera trajectory"),
    "traj-eval": Command(EVAL_PARAMS, cmd_traj_eval, "score estimated trajectories against ground truth"),
    "refine-demo": Command(REFINE_PARAMS, cmd_refine_demo, "truncated-sigma Euler refinement demo"),
    "filter-audit": Command(FILTER_PARAMS, cmd_filter_audit, "apply a dataset filter profile to clip stats"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flat object of command parameters)")
    common.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
    common.add_argument("--out-dir", default=None, help="artifact directory (default: worldscan-out/<command>)")
    common.add_argument("--format", choices=["json", "csv", "both"], default=None, help="artifact formats")
    parser = argparse.ArgumentParser(prog="worldscan", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, cmd in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=cmd.help, description=cmd.help)
        _add_params(sp, cmd.params)
    return parser


GLOBAL_PARAMS = {"seed": Param(0, "RNG seed"), "format": Param("both", "json | csv | both")}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cmd = COMMANDS[args.command]
    params = dict(cmd.params, **GLOBAL_PARAMS)
    started = time.perf_counter()
    try:
        cfg = resolve_config(params, args.config, vars(args))
        if cfg["format"] not in ("json", "csv", "both"):
            raise ConfigError(f"format must be json, csv or both, got {cfg['format']!r}")
        out = Outputs(Path(args.out_dir or Path("worldscan-out") / args.command), cfg["format"])
        metrics, code = cmd.run(cfg, out)
    except ConfigError as exc:
        print(f"worldscan {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidInputError, AlignmentError, SamplingError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"worldscan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report = {"command": args.command, "config": cfg, "metrics": metrics,
              "artifacts": out.files + ["report.json"], "exit_code": code}
    write_json(out.dir / "report.json", report)
    elapsed = time.perf_counter() - started
    print(json.dumps(_jsonable(metrics)))
    print(f"worldscan {args.command}: exit {code}, {elapsed:.2f} s, artifacts in {out.dir}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
