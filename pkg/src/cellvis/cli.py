"""``cellvis`` command line: synth, extract, train, predict, evaluate, correlate, bench.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures print one ``error: code=<n> type=<name> message=<text>`` line on
stderr and remove any files the command had started to write.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from .baselines import LinearPoseRegressor, MLSTMRegressor, MMLPRegressor, pose_to_features
from .camera import CameraIntrinsics, Pose6DoF, look_at
from .cellgrid import (
    CHANNELS, CellFeatureExtractor, CellGrid, axis_neighbors, build_grid, correlation_analysis,
    extract_frame_features,
)
from .config import ConfigError, describe_keys, load_config
from .evaluation import (
    SplitSpec, config_fingerprint, evaluate, split_windows, stack_windows, write_report_csv,
    write_report_json,
)
from .formats import read_fvt, write_fvt
from .hpr import HULL_BACKENDS, HprParams
from .model import CellVisibilityPredictor
from .pc_io import (
    DEFAULT_8I_SCALE, PointCloudFrame, load_sequence, load_trajectory_csv, synth_body, synth_scene,
    trajectory_array, write_ply, write_trajectory_csv,
)

log = logging.getLogger("cellvis")

COMMANDS = ("synth", "extract", "train", "predict", "evaluate", "correlate", "bench")
REFERENCE_FPS = 45.0
TARGET_FPS = 30.0


class UsageError(Exception):
    """Missing inputs or artifacts; maps to exit code 2."""


class OutputTracker:
    """Remembers files a command creates so a failed run can remove them."""

    def __init__(self):
        self.paths: list = []

    def __call__(self, path) -> str:
        path = str(path)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self.paths.append(path)
        return path

    def rollback(self) -> None:
        for p in reversed(self.paths):
            try:
                os.remove(p)
            except FileNotFoundError:
                pass


# -- config-derived helpers ------------------------------------------------

def _out(cfg, *parts) -> str:
    return os.path.join(cfg["paths"]["output"], *parts)


def _intrinsics(cfg) -> CameraIntrinsics:
    return CameraIntrinsics(**cfg["intrinsics"])


def _hpr(cfg) -> HprParams:
    return HprParams(cfg["features"]["gamma"])


def _model_ckpt(cfg, f, target):
    return _out(cfg, "checkpoints", f"model_h{f}_{target}.ckpt")


def _baseline_ckpt(cfg, f, kind):
    return _out(cfg, "checkpoints", f"{kind}_h{f}.ckpt")


def _split(cfg) -> SplitSpec:
    return SplitSpec(tuple(cfg["split"]["train_videos"]), cfg["split"]["test_video"])


def _video_dir(cfg, video):
    return os.path.join(cfg["paths"]["videos"], video)


def _load_video(cfg, video):
    d = _video_dir(cfg, video)
    if not os.path.isdir(d):
        raise UsageError(f"video directory not found: {d}")
    return load_sequence(d, cfg["video"]["source_scale"], cfg["video"]["fps"])


def _load_features(cfg, videos=None) -> dict:
    root = _out(cfg, "features")
    if not os.path.isdir(root):
        raise UsageError(f"no features under {root}; run 'cellvis extract' first")
    seqs = {}
    for video in sorted(os.listdir(root)):
        if videos is not None and video not in videos:
            continue
        for name in sorted(os.listdir(os.path.join(root, video))):
            if not name.endswith(".fvt"):
                continue
            x, channels, meta = read_fvt(os.path.join(root, video, name))
            if tuple(channels) != CHANNELS:
                raise UsageError(f"{video}/{name}: unexpected channels {channels}")
            seqs[(video, name[:-4])] = {
                "features": x.astype(np.float64),
                "poses": np.asarray(meta["poses"], dtype=np.float64),
                "video_frames": list(meta["video_frames"]),
                "grid": CellGrid.from_dict(meta["grid"]),
            }
    if not seqs:
        raise UsageError(f"no feature files found under {root}")
    return seqs


def _horizons(cfg):
    return [int(h) for h in cfg["eval"]["horizons"]]


def _window_history(cfg) -> int:
    b = cfg["baselines"]
    return max(cfg["model"]["history"], b["history"], b["lr_history"])


# -- commands -----------------------------------------------------------------

def cmd_synth(cfg, out):
    s = cfg["synth"]
    scale = cfg["video"]["source_scale"]
    for name, generator in sorted(s["videos"].items()):
        vdir = _video_dir(cfg, name)
        seq = None
        for u in range(s["users"]):
            scene = {"generator": generator, "seed": cfg["seed"], "frames": s["frames"],
                     "points": s["points"], "fps": cfg["video"]["fps"],
                     "params": {"trajectory": s["trajectory"], "camera_radius": s["camera_radius"],
                                "trajectory_seed": 1000 * cfg["seed"] + u + 1}}
            frames, traj = synth_scene(scene)
            seq = seq or frames
            path = out(os.path.join(cfg["paths"]["trajectories"], name, f"user{u:02d}.csv"))
            write_trajectory_csv(path, traj, cfg["video"]["angle_unit"])
        for fr in seq:
            src = PointCloudFrame(fr.frame_index, fr.positions / scale, fr.colors)
            write_ply(out(os.path.join(vdir, f"frame_{fr.frame_index:04d}.ply")), src)
        log.info("synth: %s (%s) %d frames x %d points, %d users", name, generator,
                 len(seq), s["points"], s["users"])
    return 0


def cmd_extract(cfg, out):
    vroot, troot = cfg["paths"]["videos"], cfg["paths"]["trajectories"]
    if not os.path.isdir(vroot):
        raise UsageError(f"videos directory not found: {vroot}")
    videos = sorted(d for d in os.listdir(vroot) if os.path.isdir(os.path.join(vroot, d)))
    if not videos:
        raise UsageError(f"no video directories in {vroot}")
    fe = cfg["features"]
    unit = cfg["video"]["angle_unit"]
    for video in videos:
        tdir = os.path.join(troot, video)
        users = sorted(n for n in os.listdir(tdir) if n.endswith(".csv")) if os.path.isdir(tdir) else []
        if not users:
            log.warning("extract: no trajectories for %s; skipped", video)
            continue
        seq = _load_video(cfg, video)
        ext = CellFeatureExtractor(tuple(cfg["grid"]["dims"]), cfg["grid"]["connectivity"],
                                   _intrinsics(cfg), fe["gamma"], fe["voxel_size"],
                                   fe["samples_per_cell"], fe["hull"], fe["n_jobs"]).fit(seq.frames)
        for name in users:
            records = load_trajectory_csv(os.path.join(tdir, name), unit)
            idx, poses = trajectory_array(records)
            vframes = [int(i) % len(seq) for i in idx]
            t0 = time.perf_counter()
            feats = ext.transform([(seq[i], r.pose) for i, r in zip(vframes, records)])
            dt = time.perf_counter() - t0
            meta = {"video": video, "user": name[:-4], "grid": ext.grid_.to_dict(),
                    "video_frames": vframes, "poses": poses.tolist(),
                    "fingerprint": config_fingerprint({k: cfg[k] for k in ("grid", "intrinsics", "features", "video")})}
            write_fvt(out(_out(cfg, "features", video, name[:-4] + ".fvt")), feats, CHANNELS, meta)
            log.info("extract: %s/%s %d frames in %.2fs (%.1f fps)", video, name[:-4], len(feats), dt,
                     len(feats) / dt if dt > 0 else float("inf"))
    return 0


def _model_estimator(cfg, f, target, dims):
    m, t = cfg["model"], cfg["train"]
    return CellVisibilityPredictor(
        hidden_dim=m["hidden_dim"], heads=m["heads"], graph_layers=m["graph_layers"],
        history=m["history"], horizon=f, target=target, attention=m["attention"], dims=dims,
        connectivity=cfg["grid"]["connectivity"], lr=t["lr"], batch_size=t["batch_size"],
        epochs=t["epochs"], patience=t["patience"], seed=cfg["seed"], dtype=t["dtype"])


def _learned_baseline(cfg, kind, f):
    b, t = cfg["baselines"], cfg["train"]
    common = dict(history=b["history"], horizon=f, lr=t["lr"], batch_size=t["batch_size"],
                  epochs=t["epochs"], patience=t["patience"], seed=cfg["seed"], dtype=t["dtype"])
    if kind == "M-MLP":
        return MMLPRegressor(hidden=(b["mlp_hidden"], b["mlp_hidden"]), **common)
    return MLSTMRegressor(hidden=b["lstm_hidden"], layers=b["lstm_layers"], **common)


def _windows(cfg, seqs, h, f):
    t = cfg["train"]
    parts = split_windows(seqs, _split(cfg), h, f, t["train_stride"], t["eval_stride"])
    return {k: stack_windows(v) if v else None for k, v in parts.items()}


def cmd_train(cfg, out):
    seqs = _load_features(cfg)
    dims = tuple(next(iter(seqs.values()))["grid"].dims)
    methods = cfg["eval"]["methods"]
    for f in _horizons(cfg):
        if "model" in methods:
            w = _windows(cfg, seqs, cfg["model"]["history"], f)
            if w["train"] is None:
                raise ValueError(f"no training windows for horizon {f}")
            for target in cfg["eval"]["targets"]:
                est = _model_estimator(cfg, f, target, dims)
                val = None if w["val"] is None else (w["val"].X, w["val"].y(target), w["val"].occupancy)
                t0 = time.perf_counter()
                est.fit(w["train"].X, w["train"].y(target), w["train"].occupancy, eval_set=val)
                est.save(out(_model_ckpt(cfg, f, target)), {"config_fingerprint": config_fingerprint(cfg)})
                est.write_loss_curve(out(_out(cfg, "checkpoints", f"loss_h{f}_{target}.csv")))
                log.info("train: model h%d %s, %d windows, %d epochs, %.1fs", f, target,
                         len(w["train"]), len(est.loss_curve_), time.perf_counter() - t0)
        for kind, tag in (("M-MLP", "mmlp"), ("M-LSTM", "mlstm")):
            if kind not in methods:
                continue
            w = _windows(cfg, seqs, cfg["baselines"]["history"], f)
            if w["train"] is None:
                raise ValueError(f"no training windows for horizon {f}")
            val = None if w["val"] is None else (w["val"].poses, w["val"].target_poses)
            est = _learned_baseline(cfg, kind, f).fit(w["train"].poses, w["train"].target_poses, eval_set=val)
            est.save(out(_baseline_ckpt(cfg, f, tag)), {"config_fingerprint": config_fingerprint(cfg)})
            log.info("train: %s h%d, %d windows", kind, f, len(w["train"]))
    return 0


def _test_windows(cfg, seqs, f):
    w = _windows(cfg, {k: v for k, v in seqs.items() if k[0] == cfg["split"]["test_video"]},
                 _window_history(cfg), f)
    if w["test"] is None:
        raise UsageError(f"no test windows for horizon {f} in video {cfg['split']['test_video']!r}")
    return w["test"]


def _require(path, f):
    if not os.path.isfile(path):
        raise UsageError(f"missing checkpoint for horizon {f}: {path}")
    return path


def cmd_predict(cfg, out):
    seqs = _load_features(cfg, {cfg["split"]["test_video"]})
    for f in _horizons(cfg):
        for target in cfg["eval"]["targets"]:
            est = CellVisibilityPredictor.load(_require(_model_ckpt(cfg, f, target), f))
            ws = _test_windows(cfg, seqs, f)
            pred = est.predict(ws.X[:, -est.history:], ws.occupancy)
            y = ws.y(target)
            path = out(_out(cfg, "predictions", f"pred_h{f}_{target}.csv"))
            with open(path, "w", newline="") as fh:
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(["window", "video", "user", "target_frame", "cell", "y_hat", "y"])
                for i in range(len(ws)):
                    video, user = ws.sources[i]
                    for c in range(pred.shape[1]):
                        wr.writerow([i, video, user, int(ws.target_frames[i]), c,
                                     repr(float(pred[i, c])), repr(float(y[i, c]))])
            log.info("predict: h%d %s, %d windows -> %s", f, target, len(ws), path)
    return 0


class _BaselineFeatures:
    """Predicted pose -> masked (F, V) per window, cached per horizon."""

    def __init__(self, cfg, regressor_for, seqs):
        self.cfg = cfg
        self.regressor_for = regressor_for
        self.seqs = seqs
        self.cache = {}
        self.video = None

    def __call__(self, ws, target, f):
        if f not in self.cache:
            cfg = self.cfg
            if self.video is None:
                self.video = _load_video(cfg, cfg["split"]["test_video"])
            poses = self.regressor_for(f).predict(ws.poses)
            F = np.zeros(ws.occupancy.shape)
            V = np.zeros(ws.occupancy.shape)
            fe = cfg["features"]
            for i, (src, tf) in enumerate(zip(ws.sources, ws.target_frames)):
                meta = self.seqs[src]
                frame = self.video[meta["video_frames"][int(tf)]]
                F[i], V[i] = pose_to_features(Pose6DoF.from_array(poses[i]), frame, meta["grid"],
                                              _intrinsics(cfg), _hpr(cfg), fe["voxel_size"],
                                              fe["samples_per_cell"], fe["hull"])
            m = (ws.occupancy > 0).astype(np.float64)
            self.cache[f] = {"viewport": F * m, "visibility": V * m}
        return self.cache[f][target]


def cmd_evaluate(cfg, out):
    methods = cfg["eval"]["methods"]
    horizons = _horizons(cfg)
    for f in horizons:  # fail early, before any expensive work
        for target in cfg["eval"]["targets"]:
            if "model" in methods:
                _require(_model_ckpt(cfg, f, target), f)
        for kind, tag in (("M-MLP", "mmlp"), ("M-LSTM", "mlstm")):
            if kind in methods:
                _require(_baseline_ckpt(cfg, f, tag), f)
    seqs = _load_features(cfg, {cfg["split"]["test_video"]})
    windows = {f: _test_windows(cfg, seqs, f) for f in horizons}
    b = cfg["baselines"]
    table = {}
    if "model" in methods:
        def model_method(ws, target, f):
            est = CellVisibilityPredictor.load(_model_ckpt(cfg, f, target))
            return est.predict(ws.X[:, -est.history:], ws.occupancy)
        table["model"] = model_method
    factories = {
        "LR": lambda f: LinearPoseRegressor("LR", b["lr_history"], f).fit(),
        "TLR": lambda f: LinearPoseRegressor("TLR", b["lr_history"], f).fit(),
        "M-MLP": lambda f: MMLPRegressor.load(_baseline_ckpt(cfg, f, "mmlp")),
        "M-LSTM": lambda f: MLSTMRegressor.load(_baseline_ckpt(cfg, f, "mlstm")),
    }
    for kind in ("LR", "TLR", "M-MLP", "M-LSTM"):
        if kind in methods:
            table[kind] = _BaselineFeatures(cfg, factories[kind], seqs)
    rows = evaluate(table, windows, horizons, tuple(cfg["eval"]["targets"]), cfg["video"]["fps"])
    write_report_csv(out(_out(cfg, "reports", "report.csv")), rows)
    write_report_json(out(_out(cfg, "reports", "report.json")), rows, cfg)
    for r in rows:
        print(f"{r.method:7s} {r.target:10s} h={r.horizon_frames:4d} ({r.horizon_ms:5d} ms) "
              f"mse={r.mse:.6f} r2={r.r2:.4f} n={r.n_windows}")
    return 0


def _write_matrix(path, ids, matrix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell"] + [str(i) for i in ids])
        for i, row in zip(ids, matrix):
            w.writerow([i] + [repr(float(v)) for v in row])


def cmd_correlate(cfg, out):
    c = cfg["correlate"]
    video = c["video"] or cfg["split"]["test_video"]
    seqs = _load_features(cfg, {video})
    ch = CHANNELS.index(c["channel"])
    series = np.concatenate([seqs[k]["features"][:, :, ch] for k in sorted(seqs)], axis=0)
    dims = next(iter(seqs.values()))["grid"].dims
    full = correlation_analysis(series)
    _write_matrix(out(_out(cfg, "reports", "correlation.csv")), full.cell_ids, full.matrix)
    cell = c["cell"] if c["cell"] >= 0 else int(np.argmax(series.var(axis=0)))
    if cell >= series.shape[1]:
        raise ConfigError(f"correlate.cell {cell} out of range for {series.shape[1]} cells")
    for axis, name in enumerate("xyz"):
        ids = axis_neighbors(dims, cell, axis, c["count"])
        res = correlation_analysis(series, ids)
        _write_matrix(out(_out(cfg, "reports", f"correlation_{name}.csv")), res.cell_ids, res.matrix)
    log.info("correlate: %s channel %s, %d samples, reference cell %d", video, c["channel"],
             len(series), cell)
    return 0


def cmd_bench(cfg, out):
    b = cfg["bench"]
    rng = np.random.default_rng(cfg["seed"])
    frame = PointCloudFrame(0, synth_body(rng, b["points"], 1.8))
    grid = build_grid([frame], tuple(cfg["grid"]["dims"]))
    pose = look_at(frame.positions.mean(axis=0) + np.array([0.0, 0.0, -2.5]), frame.positions.mean(axis=0))
    voxel = b["downsample"] * DEFAULT_8I_SCALE
    results = {}
    for hull in HULL_BACKENDS:
        extract_frame_features(frame, grid, pose, _intrinsics(cfg), _hpr(cfg), voxel,
                               cfg["features"]["samples_per_cell"], hull)
        t0 = time.perf_counter()
        for _ in range(b["frames"]):
            extract_frame_features(frame, grid, pose, _intrinsics(cfg), _hpr(cfg), voxel,
                                   cfg["features"]["samples_per_cell"], hull)
        dt = time.perf_counter() - t0
        fps = b["frames"] / dt
        results[hull] = {"fps": fps, "seconds_per_frame": dt / b["frames"],
                         "meets_30fps": fps >= TARGET_FPS, "ratio_to_45fps": fps / REFERENCE_FPS}
        print(f"bench {hull:9s} {b['points']} points, voxel {voxel:.5f} m: {fps:7.2f} fps "
              f"(target {TARGET_FPS:.0f}: {'met' if fps >= TARGET_FPS else 'not met'}; "
              f"reference ~{REFERENCE_FPS:.0f})")
    path = out(_out(cfg, "reports", "bench.json"))
    with open(path, "w") as fh:
        json.dump({"points": b["points"], "voxel_size": voxel, "frames": b["frames"],
                   "results": results}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "correlate": cmd_correlate,
    "bench": cmd_bench,
}

_HELP = {
    "synth": "write synthetic PLY videos and viewer trajectories",
    "extract": "compute FVT1 cell feature files per (video, user)",
    "train": "train the graph model and learned baselines per horizon",
    "predict": "write per-window test predictions as CSV",
    "evaluate": "score all methods per horizon; CSV + JSON report",
    "correlate": "cell-pair correlation matrices of one feature channel",
    "bench": "feature extraction throughput on a 100k-point frame",
}


def build_parser() -> argparse.ArgumentParser:
    epilog = describe_keys()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="cellvis", description=__doc__.split("\n")[0],
                                     epilog=epilog, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name, help=_HELP[name], description=_HELP[name], epilog=epilog,
                           formatter_class=fmt)
        p.add_argument("-c", "--config", help="JSON config file (defaults below)")
        p.add_argument("--horizon", type=int, help="restrict to one horizon (frames)")
        p.add_argument("--target", choices=("visibility", "viewport"), help="restrict to one target")
        p.add_argument("--angle-unit", choices=("radians", "degrees"), help="trajectory angle unit")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def _overrides(args) -> dict:
    o = {}
    if args.horizon is not None:
        if args.horizon < 1:
            raise ConfigError("--horizon must be >= 1")
        o["eval"] = {"horizons": [args.horizon]}
    if args.target is not None:
        o["model"] = {"target": args.target}
        o.setdefault("eval", {})["targets"] = [args.target]
    if args.angle_unit is not None:
        o["video"] = {"angle_unit": args.angle_unit}
    if args.seed is not None:
        o["seed"] = args.seed
    return o


def _fail(code, exc) -> int:
    msg = " ".join(str(exc).split())
    print(f"error: code={code} type={type(exc).__name__} message={msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    out = OutputTracker()
    try:
        cfg = load_config(args.config, _overrides(args))
        return HANDLERS[args.command](cfg, out)
    except (ConfigError, UsageError) as exc:
        out.rollback()
        return _fail(2, exc)
    except KeyboardInterrupt as exc:
        out.rollback()
        return _fail(1, exc)
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        out.rollback()
        log.debug("traceback", exc_info=True)
        return _fail(1, exc)


if __name__ == "__main__":
    sys.exit(main())
