"""Command-line pipeline: generate | fit | segment | track | eval | repro.

Every command is deterministic given (inputs, seed): CSV/JSON/PLY/PPM outputs
are byte-identical across reruns and across --threads values. Wall-clock
timings go to run.log only, which is the one file excluded from that
guarantee.

Exit codes: 0 success, 2 configuration/input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import io_formats as iof
from .clustering import ClusterHierarchy, build_hierarchy
from .config import ConfigError, load_run_config
from .core import GaussianSet
from .deform import cascade_to_payload
from .losses import DataObservation
from .optimize import fit_sequence, mean_center_error
from .scenegen import _PALETTE, SceneSpec, SceneSequence, generate
from .segmentation import adjusted_rand_index, build_features, segment
from .tracking import PinholeCamera, Track2D, mte, project, project_track, select_candidate

INIT_GAUSSIANS_HEADER = ["index", "x", "y", "z", "qw", "qx", "qy", "qz",
                         "sx", "sy", "sz", "r", "g", "b"]


# ---------------------------------------------------------------------------
# scene directory layout


def write_scene_dir(seq, out_dir):
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    iof.write_json(
        out / "scene.json",
        {
            "spec": seq.spec.to_payload(),
            "cameras": [c.to_payload() for c in seq.cameras],
            "part_quats": seq.part_quats.tolist(),
            "n_parts": int(seq.part_labels.max() + 1),
            "scene_scale": seq.scene_scale,
        },
    )
    for t, obs in enumerate(seq.observations):
        iof.write_ply(out / "frames" / f"frame_{t:03d}.ply", obs.points)
    iof.write_gt_trajectory_csv(out / "gt_trajectory.csv", seq.gt_centers)
    iof.write_labels_csv(out / "labels.csv", seq.part_labels)
    g = seq.frame0
    rows = [
        [i, *g.centers[i], *g.orientations[i], *g.scales[i], *g.colors[i]]
        for i in range(g.n)
    ]
    iof.write_csv(out / "init_gaussians.csv", INIT_GAUSSIANS_HEADER, rows)


def load_scene_dir(path):
    root = Path(path)
    if not (root / "scene.json").exists():
        raise FileNotFoundError(f"{root}/scene.json")
    meta = iof.read_json(root / "scene.json")
    spec = SceneSpec.from_payload(meta["spec"])
    cameras = [PinholeCamera.from_payload(c) for c in meta["cameras"]]
    gt = iof.read_gt_trajectory_csv(root / "gt_trajectory.csv")
    labels = iof.read_labels_csv(root / "labels.csv")
    header, rows = iof.read_csv(root / "init_gaussians.csv")
    if header != INIT_GAUSSIANS_HEADER:
        raise ValueError("unexpected init_gaussians.csv header")
    data = np.array([[float(v) for v in r[1:]] for r in rows])
    frame0 = GaussianSet(
        centers=data[:, 0:3],
        orientations=data[:, 3:7],
        scales=data[:, 7:10],
        colors=data[:, 10:13],
        frame_index=0,
    )
    observations = []
    for t in range(spec.n_frames):
        pts, _ = iof.read_ply(root / "frames" / f"frame_{t:03d}.ply")
        observations.append(DataObservation(points=pts, correspondence=np.arange(len(pts))))
    return SceneSequence(
        spec=spec,
        frame0=frame0,
        observations=observations,
        gt_centers=gt,
        part_labels=labels,
        part_quats=np.asarray(meta["part_quats"], dtype=np.float64),
        cameras=cameras,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg):
    if cfg.out is None:
        raise ConfigError("generate needs an output directory (--out)")
    seq = generate(cfg.scene_spec())
    write_scene_dir(seq, cfg.out)
    print(f"wrote scene '{seq.spec.kind}' ({seq.frame0.n} Gaussians, "
          f"{seq.n_frames} frames) to {cfg.out}")
    return 0


def cmd_fit(cfg, scene_dir):
    if cfg.out is None:
        raise ConfigError("fit needs an output directory (--out)")
    t0 = time.perf_counter()
    seq = load_scene_dir(scene_dir)
    tc = cfg.train_config(scene_scale=seq.scene_scale)
    hierarchy = build_hierarchy(seq.frame0.centers, tc.layer_sizes, seed=tc.seed)
    report = fit_sequence(seq.frame0, seq.observations, tc, hierarchy)

    out = Path(cfg.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    iof.write_trajectory_csv(out / "trajectory.csv", report.sets)
    iof.write_losses_csv(out / "losses.csv", report.frames)
    iof.write_json(out / "hierarchy.json", report.hierarchy.to_payload())
    for frame_rep, cascade in zip(report.frames, report.cascades):
        payload = cascade_to_payload(cascade)
        payload["frame_index"] = frame_rep.frame_index
        iof.write_json(out / "checkpoints" / f"frame_{frame_rep.frame_index:03d}.json", payload)
    err = mean_center_error(report.sets, seq.gt_centers)
    summary = {
        "scene_dir": str(scene_dir),
        "scene_kind": seq.spec.kind,
        "n_gaussians": int(seq.frame0.n),
        "n_frames": int(seq.n_frames),
        "layer_sizes": list(tc.layer_sizes),
        "iters_per_frame": int(tc.iters_per_frame),
        "seed": int(tc.seed),
        "max_scale": float(tc.max_scale),
        "propagate_covariance": bool(tc.propagate_covariance),
        "mean_center_error": err,
        "final_losses": report.frames[-1].final_losses,
    }
    iof.write_json(out / "summary.json", summary)
    wall = time.perf_counter() - t0
    (out / "run.log").write_text(
        f"fit {scene_dir} completed in {wall:.3f}s "
        f"({sum(r.wall_time for r in report.frames):.3f}s in optimization)\n"
    )
    print(f"fit {seq.spec.kind}: mean center error {err:.6f} "
          f"(scene scale {seq.scene_scale:.3f}) -> {out}")
    return 0


def _load_fit_dir(fit_dir):
    fit = Path(fit_dir)
    if not (fit / "summary.json").exists():
        raise FileNotFoundError(f"{fit}/summary.json")
    summary = iof.read_json(fit / "summary.json")
    centers, quats, scales = iof.read_trajectory_csv(fit / "trajectory.csv")
    return summary, centers, quats, scales


def _scene_for_fit(summary, scene_dir=None):
    path = scene_dir if scene_dir is not None else summary["scene_dir"]
    return load_scene_dir(path)


def cmd_segment(cfg, fit_dir, scene_dir=None):
    if cfg.out is None:
        raise ConfigError("segment needs an output directory (--out)")
    summary, centers, quats, scales = _load_fit_dir(fit_dir)
    seq = _scene_for_fit(summary, scene_dir)
    opts = cfg.seg_options()
    sets = [
        GaussianSet(centers=centers[t], orientations=quats[t], scales=scales[t],
                    frame_index=t)
        for t in range(centers.shape[0])
    ]
    feats = build_features(
        sets, lambda_p=opts["lambda_p"], lambda_r=opts["lambda_r"],
        lambda_p0=opts["lambda_p0"],
    )
    labels = segment(feats, opts["k_parts"], seed=cfg.seed)
    ari = adjusted_rand_index(labels, seq.part_labels)

    out = Path(cfg.out)
    (out / "labeled").mkdir(parents=True, exist_ok=True)
    iof.write_labels_csv(out / "labels.csv", labels)
    iof.write_json(out / "summary.json", {
        "fit_dir": str(fit_dir),
        "k_parts": int(opts["k_parts"]),
        "ari": float(ari),
    })
    colors = _PALETTE[labels % len(_PALETTE)]
    for t in range(centers.shape[0]):
        iof.write_ply(out / "labeled" / f"frame_{t:03d}.ply", centers[t], colors)
    print(f"segment {summary['scene_kind']}: k={opts['k_parts']} ARI {ari:.4f} -> {out}")
    return 0


def _draw_dots(image, pixels, color, radius=1):
    h, w = image.shape[:2]
    for u, v in pixels:
        if not (np.isfinite(u) and np.isfinite(v)):
            continue
        x, y = int(round(u)), int(round(v))
        image[max(0, y - radius):min(h, y + radius + 1),
              max(0, x - radius):min(w, x + radius + 1)] = color


def cmd_track(cfg, fit_dir, scene_dir=None):
    if cfg.out is None:
        raise ConfigError("track needs an output directory (--out)")
    summary, centers, _, _ = _load_fit_dir(fit_dir)
    seq = _scene_for_fit(summary, scene_dir)
    opts = cfg.track_options()
    camera = seq.cameras[opts["camera_index"] % len(seq.cameras)]

    rng = np.random.default_rng(cfg.seed)
    n = seq.gt_centers.shape[1]
    n_tracks = min(opts["n_tracks"], n)
    chosen = np.sort(rng.choice(n, size=n_tracks, replace=False))

    out = Path(cfg.out)
    (out / "overlays").mkdir(parents=True, exist_ok=True)
    entries = []
    for track_id, gi in enumerate(chosen):
        gt_track = project_track(camera, seq.gt_centers[:, gi])
        if not gt_track.valid[0]:
            continue  # target starts behind the camera; not a usable track
        cand = select_candidate(centers, camera, gt_track)
        pred_track = project_track(camera, centers[:, cand])
        err = mte(pred_track, gt_track, camera.image_diagonal)
        entries.append((track_id, int(cand), float(err)))
        image = np.zeros((camera.height, camera.width, 3), dtype=np.uint8)
        _draw_dots(image, gt_track.pixels[gt_track.valid], np.array([220, 60, 50], np.uint8))
        _draw_dots(image, pred_track.pixels[pred_track.valid], np.array([70, 220, 90], np.uint8))
        iof.write_ppm(out / "overlays" / f"track_{track_id:02d}.ppm", image)

    if not entries:
        raise RuntimeError("no usable tracks (all targets behind the camera)")
    iof.write_mte_csv(out / "mte.csv", entries)
    errs = np.array([e[2] for e in entries])
    iof.write_json(out / "summary.json", {
        "fit_dir": str(fit_dir),
        "camera_index": int(opts["camera_index"]),
        "n_tracks": int(len(entries)),
        "mean_mte": float(errs.mean()),
        "median_mte": float(np.median(errs)),
        "max_mte": float(errs.max()),
    })
    print(f"track {summary['scene_kind']}: median MTE {np.median(errs) * 100:.3f}% "
          f"over {len(entries)} tracks -> {out}")
    return 0


def cmd_eval(cfg, run_dirs):
    if cfg.out is None:
        raise ConfigError("eval needs an output path (--out)")
    runs = {}
    for d in run_dirs:
        summary_path = Path(d) / "summary.json"
        if not summary_path.exists():
            raise FileNotFoundError(str(summary_path))
        runs[Path(d).name] = iof.read_json(summary_path)
    out = Path(cfg.out)
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "eval.json"
    iof.write_json(out, {"runs": runs})
    print(f"aggregated {len(runs)} run(s) -> {out}")
    return 0


def cmd_repro(cfg):
    """Small end-to-end pipeline: generate, fit K=3 vs K=1, segment, track, eval."""
    if cfg.out is None:
        raise ConfigError("repro needs an output directory (--out)")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed

    def sub(**overrides):
        c = load_run_config(None)
        c.seed = seed
        c.threads = cfg.threads
        c.train = dict(base_train)
        for k, v in overrides.pop("train", {}).items():
            c.train[k] = v
        for k, v in overrides.items():
            setattr(c, k, v)
        return c

    base_train = {"iters_per_frame": 30, "layer_sizes": (4, 12, 40)}
    scenes = {
        "wheel": SceneSpec("wheel", n_gaussians=120, n_frames=6,
                           motion_magnitude=18.0, seed=seed),
        "pendulum": SceneSpec("pendulum", n_gaussians=120, n_frames=6,
                              motion_magnitude=25.0, seed=seed),
        "two_blobs": SceneSpec("two_blobs", n_gaussians=120, n_frames=6,
                               motion_magnitude=0.05, seed=seed),
    }
    for name, spec in scenes.items():
        write_scene_dir(generate(spec), out / f"scene_{name}")

    fits = {}
    for name in scenes:
        for tag, layers in (("k3", (4, 12, 40)), ("k1", (40,))):
            fit_out = out / f"fit_{name}_{tag}"
            cmd_fit(sub(out=str(fit_out), train={"layer_sizes": layers}),
                    out / f"scene_{name}")
            fits[(name, tag)] = fit_out

    seg_cfg = sub(out=str(out / "seg_two_blobs"))
    seg_cfg.segmentation = {"k_parts": 2}
    cmd_segment(seg_cfg, fits[("two_blobs", "k3")])

    track_cfg = sub(out=str(out / "track_pendulum"))
    cmd_track(track_cfg, fits[("pendulum", "k3")])

    rows = []
    for name in scenes:
        e3 = iof.read_json(fits[(name, "k3")] / "summary.json")["mean_center_error"]
        e1 = iof.read_json(fits[(name, "k1")] / "summary.json")["mean_center_error"]
        ratio = e1 / e3 if e3 > 0 else float("inf")
        rows.append([name, e1, e3, ratio])
    iof.write_csv(out / "comparison.csv",
                  ["scene", "err_single_layer", "err_cascade", "ratio"], rows)

    eval_cfg = sub(out=str(out / "eval.json"))
    cmd_eval(eval_cfg, [fits[(n, t)] for n in scenes for t in ("k3", "k1")]
             + [out / "seg_two_blobs", out / "track_pendulum"])
    print(f"repro pipeline complete -> {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(
        prog="gscascade",
        description="Cascaded deformation fitting for dynamic Gaussian scenes",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)
        sp.add_argument("--layers", help="comma-separated cluster counts, coarsest first")
        sp.add_argument("--iters", type=int, help="iterations per frame")
        sp.add_argument("--max-scale", dest="max_scale", type=float)

    sp = sub.add_parser("generate", help="write a synthetic scene directory")
    common(sp)
    sp = sub.add_parser("fit", help="fit the deformation cascade to a scene")
    sp.add_argument("scene_dir")
    common(sp)
    sp = sub.add_parser("segment", help="motion-based part segmentation of a fit")
    sp.add_argument("fit_dir")
    sp.add_argument("--scene", help="override the scene directory recorded in the fit")
    common(sp)
    sp = sub.add_parser("track", help="2D tracking evaluation of a fit")
    sp.add_argument("fit_dir")
    sp.add_argument("--scene", help="override the scene directory recorded in the fit")
    common(sp)
    sp = sub.add_parser("eval", help="aggregate run summaries into one JSON")
    sp.add_argument("run_dirs", nargs="+")
    common(sp)
    sp = sub.add_parser("repro", help="full small-scale pipeline, twice-runnable")
    common(sp)
    return p


def _config_document(args):
    if getattr(args, "config", None) is None:
        return None
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(_config_document(args), cli=args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "fit":
            return cmd_fit(cfg, args.scene_dir)
        if args.command == "segment":
            return cmd_segment(cfg, args.fit_dir, args.scene)
        if args.command == "track":
            return cmd_track(cfg, args.fit_dir, args.scene)
        if args.command == "eval":
            return cmd_eval(cfg, args.run_dirs)
        if args.command == "repro":
            return cmd_repro(cfg)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, NotADirectoryError) as e:
        print(f"config error: missing input: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
