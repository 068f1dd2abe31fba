"""Command-line interface: ``pedfit <command> [options]``.

Progress goes to standard error; results go to files only. Every command
exits 0 on success and 1 with a one-line reason on failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import io
from .body_model import default_template, forward_kinematics
from .pointcloud import write_cloud
from .priors import Priors, load_gmm, save_gmm
from .solver import FitError, fit_sequence
from .stereo import StereoRig, load_rig, project, save_rig
from .synth import SceneSpec, default_priors, make_scene, train_priors

log = logging.getLogger("pedfit")


def _config(args):
    cfg = io.load_config(args.config) if args.config else io.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _rig(cfg, path=None):
    path = path or cfg.rig
    return load_rig(path) if path else StereoRig.default()


def _priors(cfg):
    if cfg.priors.pose is None and cfg.priors.temporal is None:
        log.info("training default priors on the synthetic walking corpus")
        return default_priors()
    pose = load_gmm(cfg.priors.pose) if cfg.priors.pose else None
    temporal = load_gmm(cfg.priors.temporal) if cfg.priors.temporal else None
    return Priors(pose, temporal)


def _scene_spec(cfg):
    s = cfg.scene
    return SceneSpec(s.n_frames, s.distance, s.lateral, s.speed, tuple(s.heading), s.frame_interval, s.noise_px,
                     s.occlusion, s.angular_resolution, s.dropout, s.occluder, s.occluder_offset)


def _scene_seeds(cfg):
    return [int(v) for v in np.random.default_rng(cfg.seed).integers(0, 2**31, size=cfg.scene.n_scenes)]


def _scenes(cfg, template, rig):
    spec = _scene_spec(cfg)
    for i, seed in enumerate(_scene_seeds(cfg)):
        log.info("scene %d/%d (seed %d)", i + 1, cfg.scene.n_scenes, seed)
        yield make_scene(spec, template, rig, seed=seed, track_id=i)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    cfg = _config(args)
    out = Path(args.out)
    template = default_template(cfg.samples_per_bone)
    rig = _rig(cfg)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    frames, refs, motion, gts, ids = [], [], [], [], []
    for scene in _scenes(cfg, template, rig):
        tid = scene.frames[0].track_id
        for f in scene.frames:
            ref = f"clouds/track{tid}_frame{f.frame_id:04d}.ply"
            write_cloud(f.cloud.points, str(out / ref))
            frames.append(f)
            refs.append(ref)
        motion.append((tid, scene.gt, scene.timestamps))
        gts.append(ev.JointSeries.from_params(scene.gt, template, ev.labelled(scene.frames)))
        ids += [f.frame_id for f in scene.frames]
    io.save_annotations(frames, out / "annotations.jsonl", refs)
    io.save_motion(motion, out / "gt_motion.jsonl")
    io.save_joints(_concat(gts), out / "gt_joints.json", ids)
    save_rig(rig, str(out / "rig.json"))
    log.info("wrote %d frame(s) to %s", len(frames), out)


def _concat(series):
    out = series[0]
    for s in series[1:]:
        out = out.concat(s)
    return out


def _load_obs(args, cfg):
    cloud_dir = args.clouds or str(Path(args.annotations).parent)
    rig = _rig(cfg, args.rig)
    return io.load_annotations(args.annotations, cloud_dir), rig


def cmd_fit(args):
    cfg = _config(args)
    tracks, rig = _load_obs(args, cfg)
    template = default_template(cfg.samples_per_bone)
    priors = _priors(cfg)
    lines, series, ids = [], [], []
    for tid, frames in tracks.items():
        log.info("fitting track %r (%d frames)", tid, len(frames))
        res = fit_sequence(frames, rig, priors, cfg.weights, template, admm=cfg.admm, config=cfg.solver,
                           log=log.info)
        log.info("track %r: %s after %d ADMM iteration(s), %.1f s", tid, res.status, res.admm_iterations,
                 res.wall_time)
        kps = [forward_kinematics(template, p).keypoints3d for p in res.params]
        overlays = [{side: project(rig, kp, side)[0] for side in ("left", "right")} for kp in kps]
        lines += io.results_lines(tid, frames, res, kps, overlays)
        series.append(ev.JointSeries.from_keypoints(np.array(kps)))
        ids += [f.frame_id for f in frames]
    out = Path(args.out)
    io.atomic_write(out / "results.jsonl", "".join(lines))
    io.save_joints(_concat(series), out / "joints.json", ids)


def _aligned(pred, gt):
    if set(pred.names) != set(gt.names):
        raise ev.MetricError(f"joint sets differ: {sorted(set(pred.names) ^ set(gt.names))}")
    order = [pred.names.index(n) for n in gt.names]
    return ev.JointSeries(pred.positions[:, order], pred.valid[:, order], gt.names)


def cmd_eval(args):
    pred, gt = io.load_joints(args.pred), io.load_joints(args.gt)
    pred = _aligned(pred, gt)
    results = {"global": ev.mpjpe_global(pred, gt), "relative": ev.mpjpe_relative(pred, gt)}
    io.atomic_write(args.out, ev.metrics_csv(results))
    log.info("global MPJPE %.1f mm, root-relative %.1f mm", results["global"].mean, results["relative"].mean)


def cmd_train_prior(args):
    cfg = _config(args)
    corpus = []
    for path in args.motion:
        corpus += [(params, ts) for _, params, ts in io.load_motion(path)]
    corpus = [c for c in corpus if len(c[0]) >= 2]
    if not corpus:
        raise ValueError("no motion sequence with at least two frames")
    interval = args.frame_interval or float(np.median(np.concatenate([np.diff(ts) for _, ts in corpus])))
    log.info("training on %d sequence(s), target interval %.4f s", len(corpus), interval)
    pri = train_priors(corpus, cfg.priors.pose_components, cfg.priors.temporal_components, cfg.seed, interval)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_gmm(pri.pose, out / "pose_prior.json", kind="pose")
    save_gmm(pri.temporal, out / "temporal_prior.json", kind="temporal")


def cmd_ablate(args):
    cfg = _config(args)
    template = default_template(cfg.samples_per_bone)
    rig = _rig(cfg)
    priors = _priors(cfg)
    seqs, gts = [], []
    for scene in _scenes(cfg, template, rig):
        seqs.append(scene.frames)
        gts.append(ev.JointSeries.from_params(scene.gt, template, ev.labelled(scene.frames)))
    rows = ev.ABLATION_ROWS if cfg.ablation_rows is None else [frozenset(r) for r in cfg.ablation_rows]
    table = ev.run_ablation(seqs, rig, priors, template, gts, cfg.weights, rows, cfg.admm, cfg.solver)
    io.atomic_write(args.out, ev.ablation_csv(table))


def cmd_baselines(args):
    cfg = _config(args)
    tracks, rig = _load_obs(args, cfg)
    template = default_template(cfg.samples_per_bone)
    priors = _priors(cfg)
    motion = {sid: params for sid, params, _ in io.load_motion(args.gt)}
    rng = np.random.default_rng(cfg.seed)
    preds = {"triangulation": [], "left_disp": [], "monofit_disp": []}
    gts, ids = [], []
    for tid, frames in tracks.items():
        if tid not in motion or len(motion[tid]) != len(frames):
            raise ValueError(f"ground-truth motion does not match track {tid!r}")
        disp = ev.synthetic_disparities(motion[tid], template, rig, cfg.disparity_noise_px,
                                        int(rng.integers(2**31)))
        log.info("baselines for track %r", tid)
        preds["triangulation"].append(ev.baseline_triangulation(frames, rig))
        preds["left_disp"].append(ev.baseline_left_disp(frames, rig, disp))
        preds["monofit_disp"].append(ev.baseline_monofit_disp(frames, rig, priors, template, disp))
        gts.append(ev.JointSeries.from_params(motion[tid], template, ev.labelled(frames)))
        ids += [f.frame_id for f in frames]
    out = Path(args.out)
    gt = _concat(gts)
    metrics = {}
    for name, parts in preds.items():
        s = _concat(parts)
        io.save_joints(s, out / f"{name}.json", ids)
        metrics[f"{name}/global"] = ev.mpjpe_global(s, gt)
        metrics[f"{name}/relative"] = ev.mpjpe_relative(s, gt)
    io.atomic_write(out / "metrics.csv", ev.metrics_csv(metrics))


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="pedfit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run configuration (JSON)")
        sp.add_argument("--seed", type=int, help="overrides the configuration seed")
        sp.add_argument("-q", "--quiet", action="store_true", help="no progress output")

    def observations(sp):
        sp.add_argument("--annotations", required=True, help="annotation JSON-lines file")
        sp.add_argument("--clouds", help="directory the cloud references resolve against "
                                         "(default: the annotation file's directory)")
        sp.add_argument("--rig", help="rig calibration file (default: config, else built-in)")

    sp = sub.add_parser("synth", help="generate synthetic scenes")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("fit", help="fit tracked sequences")
    common(sp)
    observations(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("train-prior", help="train pose and temporal priors from motion files")
    common(sp)
    sp.add_argument("--motion", nargs="+", required=True, help="motion JSON-lines file(s)")
    sp.add_argument("--frame-interval", type=float, help="temporal prior interval, s (default: median)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_train_prior)

    sp = sub.add_parser("eval", help="MPJPE of predicted vs ground-truth joints")
    common(sp)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True, help="metrics CSV")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="energy-term ablation on synthetic scenes")
    common(sp)
    sp.add_argument("--out", required=True, help="ablation CSV")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("baselines", help="triangulation, left+disp and monofit+disp baselines")
    common(sp)
    observations(sp)
    sp.add_argument("--gt", required=True, help="ground-truth motion file (disparity source and metrics)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_baselines)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (io.SchemaError, FitError, ev.MetricError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"pedfit {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
