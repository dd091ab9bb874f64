"""End-to-end segmentation runs and the command line.

A run goes load -> features -> lift -> train -> predict -> post-process
-> render -> metrics; every stage failure is re-raised with a [stage]
tag so the CLI can point at the step that broke. All artifacts land in
the configured output directory together with a manifest of sha256
content hashes, and `eval` recomputes the metric report from those
artifacts alone, byte-for-byte.

Config files are JSON. Exhaustive example (all keys, default values
shown; omitted keys take these defaults; relative paths resolve against
the config file's directory):

    {
      "scene": "scenes/s0",            // bundle dir (synth subcommand)
      "volume": null,                  // XOR with scene: bare .plv file
      "scribbles": null,               // default <scene>/scribbles.txt
      "outdir": "runs/s0",
      "gamma": 0.01,                   // lifting transmittance threshold
      "seed": 0,
      "workers": 1,                    // cost-volume sweep threads
      "skip_postprocess": false,       // ablation: threshold at 0.5
      "baseline": null,                // null | graphcut3d | graphcut2d
      "save_features": false,          // write features.fv (large)
      "factor_xy": 4,                  // post-process downsample factor
      "out_planes": 20,                // post-process plane budget
      "train": {"lr": 0.001, "beta1": 0.9, "beta2": 0.999,
                "eps": 1e-8, "epochs": 200, "batch_size": 1024,
                "val_fraction": 0.1, "patience": 20, "seed": 0},
      "graphcut": {"w1": 1.0, "w2": 10.0, "alpha": 0.1, "sigma": 1.0}
    }
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field, fields

import numpy as np

from .classifier import TrainConfig, init_model, predict_volume, save_model, train
from .eval import mask_metrics, parse_report, render_metrics, format_report, EvalError
from .features import (build_cost_volume, refine_cost_volume,
                       assemble_features, save_feature_volume)
from .geometry import Camera
from .graphcut import (GraphCutParams, graphcut2d_baseline,
                       graphcut3d_baseline, postprocess)
from .scribbles import lift_scribbles, load_scribbles, rasterize_scribbles
from .synth import (SceneSpec, auto_scribbles, default_scene_spec, load_png,
                    load_scene, make_scene, save_png, save_scene)
from .volume import PlaneVolume, load_volume, render_view, save_labels


class PipelineError(ValueError):
    pass


@contextmanager
def _stage(name):
    """Tag any escaping error with the pipeline stage it came from."""
    try:
        yield
    except PipelineError:
        raise
    except Exception as e:
        raise PipelineError(f"[{name}] {e}") from e


# -- configuration -------------------------------------------------------------

_BASELINES = (None, "graphcut3d", "graphcut2d")


@dataclass
class PipelineConfig:
    scene: str | None = None
    volume: str | None = None
    scribbles: str | None = None
    outdir: str = "out"
    gamma: float = 0.01
    seed: int = 0
    workers: int = 1
    skip_postprocess: bool = False
    baseline: str | None = None
    save_features: bool = False
    factor_xy: int = 4
    out_planes: int = 20
    train: TrainConfig = field(default_factory=TrainConfig)
    graphcut: GraphCutParams = field(default_factory=GraphCutParams)

    def validate(self):
        if (self.scene is None) == (self.volume is None):
            raise PipelineError(
                "config needs exactly one of 'scene' or 'volume'")
        if self.scene is not None and not os.path.isdir(self.scene):
            raise PipelineError(f"scene directory not found: {self.scene}")
        if self.volume is not None and not os.path.isfile(self.volume):
            raise PipelineError(f"volume file not found: {self.volume}")
        if self.scribbles is None and self.scene is not None:
            bundled = os.path.join(self.scene, "scribbles.txt")
            if os.path.isfile(bundled):
                self.scribbles = bundled
        if self.scribbles is None:
            raise PipelineError("config is missing 'scribbles' and the "
                                "scene bundle has none")
        if not os.path.isfile(self.scribbles):
            raise PipelineError(f"scribble file not found: {self.scribbles}")
        if not (0.0 < self.gamma < 1.0):
            raise PipelineError("gamma must be in (0, 1)")
        if self.workers < 1:
            raise PipelineError("workers must be >= 1")
        if self.baseline not in _BASELINES:
            raise PipelineError(f"unknown baseline {self.baseline!r}; "
                                f"choose from {_BASELINES[1:]}")
        if self.factor_xy < 1 or self.out_planes < 1:
            raise PipelineError("factor_xy and out_planes must be >= 1")
        return self

    def to_json(self, with_outdir=True):
        d = {"scene": self.scene, "volume": self.volume,
             "scribbles": self.scribbles, "gamma": self.gamma,
             "seed": self.seed, "workers": self.workers,
             "skip_postprocess": self.skip_postprocess,
             "baseline": self.baseline,
             "save_features": self.save_features,
             "factor_xy": self.factor_xy, "out_planes": self.out_planes,
             "train": {f.name: getattr(self.train, f.name)
                       for f in fields(TrainConfig)},
             "graphcut": {f.name: getattr(self.graphcut, f.name)
                          for f in fields(GraphCutParams)}}
        if with_outdir:
            d["outdir"] = self.outdir
        return d


def config_from_json(d, base_dir=".", default_outdir=None) -> PipelineConfig:
    """Build a config from parsed JSON; relative paths resolve against
    base_dir. Unknown keys are rejected so typos do not pass silently."""
    known = {"scene", "volume", "scribbles", "outdir", "gamma", "seed",
             "workers", "skip_postprocess", "baseline", "save_features",
             "factor_xy", "out_planes", "train", "graphcut"}
    extra = set(d) - known
    if extra:
        raise PipelineError(f"unknown config keys: {sorted(extra)}")

    def path(key, default=None):
        p = d.get(key, default)
        if p is None:
            return None
        return p if os.path.isabs(p) else os.path.normpath(
            os.path.join(base_dir, p))

    train_d = dict(d.get("train", {}))
    train_d.setdefault("seed", d.get("seed", 0))
    try:
        train_cfg = TrainConfig(**train_d)
        gc = GraphCutParams(**d.get("graphcut", {}))
    except TypeError as e:
        raise PipelineError(f"bad train/graphcut section: {e}") from e
    outdir = path("outdir") or default_outdir
    if outdir is None:
        raise PipelineError("config is missing 'outdir'")
    return PipelineConfig(
        scene=path("scene"), volume=path("volume"),
        scribbles=path("scribbles"), outdir=outdir,
        gamma=float(d.get("gamma", 0.01)), seed=int(d.get("seed", 0)),
        workers=int(d.get("workers", 1)),
        skip_postprocess=bool(d.get("skip_postprocess", False)),
        baseline=d.get("baseline"),
        save_features=bool(d.get("save_features", False)),
        factor_xy=int(d.get("factor_xy", 4)),
        out_planes=int(d.get("out_planes", 20)),
        train=train_cfg, graphcut=gc)


def load_config(path) -> PipelineConfig:
    with _stage("config"):
        with open(path) as f:
            d = json.load(f)
        cfg = config_from_json(d, base_dir=os.path.dirname(
            os.path.abspath(path)), default_outdir=os.path.dirname(
            os.path.abspath(path)))
    return cfg.validate()


# -- shared segmentation core ---------------------------------------------------

def compute_feature_volume(vol: PlaneVolume, views, seed=0, workers=1):
    """Cost volume over the source views, refined and assembled with the
    volume's own ibr + positional channels."""
    cv = build_cost_volume(vol.ref_cam, views, vol.planes, workers=workers)
    mvs = refine_cost_volume(cv, vol, seed=seed)
    return assemble_features(vol, mvs)


def segment_volume(vol, fv, scribbles, gamma=0.01,
                   train_cfg: TrainConfig | None = None,
                   params: GraphCutParams | None = None, seed=0,
                   skip_postprocess=False, factor_xy=4, out_planes=20):
    """The one code path behind both the CLI and the service: lift,
    train, predict, post-process. Returns a dict with lifted voxels,
    the trained model, the probability volume, and the final labels."""
    with _stage("lift"):
        lifted = lift_scribbles(vol, scribbles, gamma=gamma)
    with _stage("train"):
        X = fv.values[lifted.voxels[:, 2], lifted.voxels[:, 1],
                      lifted.voxels[:, 0]].astype(np.float64)
        model = init_model(fv.channels, seed=seed)
        model, history = train(model, X, lifted.labels, train_cfg)
    with _stage("predict"):
        probs = predict_volume(model, fv)
    info = None
    with _stage("postprocess"):
        if skip_postprocess:
            labels = probs > 0.5
        else:
            labels, info = postprocess(probs, vol, lifted, fv, params,
                                       factor_xy=factor_xy,
                                       out_planes=out_planes)
    return {"lifted": lifted, "model": model, "history": history,
            "probs": probs, "labels": labels, "info": info}


def _aim(eye, target, down_hint):
    fwd = np.asarray(target, float) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(down_hint, fwd)
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise PipelineError("pose looks along the down axis")
    right = right / n
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


def pose_camera(vol: PlaneVolume, eye) -> Camera:
    """Camera at `eye` (reference-camera coordinates) aimed at the
    volume's central axis point, reference intrinsics."""
    ref = vol.ref_cam
    zc = 0.5 * (vol.planes.depths[0] + vol.planes.depths[-1])
    eye_w = ref.R @ np.asarray(eye, dtype=np.float64) + ref.t
    tgt_w = ref.R @ np.array([0.0, 0.0, zc]) + ref.t
    R = _aim(eye_w, tgt_w, ref.R @ np.array([0.0, 1.0, 0.0]))
    return Camera(ref.K, R, eye_w, ref.width, ref.height)


def source_rig(vol: PlaneVolume, m_views=3, baseline=0.10):
    """Arc of source cameras around the reference, for bare volumes
    that arrive without captured views."""
    zc = 0.5 * (vol.planes.depths[0] + vol.planes.depths[-1])
    b = baseline * zc
    cams = []
    for o in np.linspace(-1.0, 1.0, m_views):
        eye = np.array([b * o, -0.3 * b * (1.0 - o * o) - 0.15 * b, 0.0])
        cams.append(pose_camera(vol, eye))
    return cams


# -- artifacts ------------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _ArtifactSet:
    def __init__(self, outdir):
        self.outdir = outdir
        self.entries = {}

    def path(self, name):
        return os.path.join(self.outdir, name)

    def add(self, name):
        self.entries[name] = {"path": name, "sha256": _sha256(self.path(name))}
        return self.path(name)

    def write_manifest(self):
        p = self.path("manifest.json")
        with open(p, "w") as f:
            json.dump({"artifacts": self.entries}, f, indent=2,
                      sort_keys=True)
            f.write("\n")
        return p


def compute_metrics(outdir, scene_dir) -> str:
    """Metric report text recomputed purely from saved artifacts.

    Reads the predicted masks/renders under `outdir` and the ground
    truth under `scene_dir`; the in-run report is produced by this very
    function, so `eval` reproduces it bitwise.
    """
    rows = []

    def have(*paths):
        return all(os.path.isfile(p) for p in paths)

    mask_ref = os.path.join(outdir, "mask_ref.png")
    gt_ref = os.path.join(scene_dir, "gt_mask_ref.png") if scene_dir else ""
    if scene_dir and have(mask_ref, gt_ref):
        m = mask_metrics(load_png(mask_ref), load_png(gt_ref))
        rows += [("ref", "accuracy", m.accuracy), ("ref", "iou", m.iou)]

    mask_val = os.path.join(outdir, "mask_val.png")
    gt_val = os.path.join(scene_dir, "gt_mask_val.png") if scene_dir else ""
    if scene_dir and have(mask_val, gt_val):
        m = mask_metrics(load_png(mask_val), load_png(gt_val))
        rows += [("val", "accuracy", m.accuracy), ("val", "iou", m.iou)]

    render_val = os.path.join(outdir, "render_val.png")
    view_val = os.path.join(scene_dir, "views", "val.png") if scene_dir else ""
    if scene_dir and have(render_val, view_val, gt_val):
        gt_mask = load_png(gt_val)
        pred = load_png(render_val)
        gt_img = load_png(view_val) * gt_mask[..., None]
        try:
            rm = render_metrics(pred, gt_img, gt_mask, pad=8)
            rows += [("val", "psnr", rm.psnr), ("val", "ssim", rm.ssim)]
        except EvalError:
            pass
    return format_report(rows) if rows else ""


# -- the run --------------------------------------------------------------------

def _load_inputs(cfg: PipelineConfig):
    if cfg.scene is not None:
        scene = load_scene(cfg.scene)
        vol = scene.volume
    else:
        scene = None
        vol = load_volume(cfg.volume)
    scribbles = load_scribbles(cfg.scribbles)
    return vol, scene, scribbles


def _source_views(cfg, vol, scene):
    if scene is not None:
        return [(scene.views[k], scene.cameras[k])
                for k in scene.source_keys()]
    cams = source_rig(vol)
    return [(render_view(vol, cam).rgb, cam) for cam in cams]


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run the configured segmentation end to end; returns the report.

    Artifacts written under cfg.outdir: config.json (echo, outdir
    implied by location), lifted.txt, model.ckpt, probs.npy, labels.bin,
    mask_ref.png, mask_val.png + render_val.png (scene runs), report.txt
    and manifest.json with sha256 hashes. Baselines skip the stages they
    replace. Deterministic for a fixed config + seed.
    """
    cfg.validate()
    os.makedirs(cfg.outdir, exist_ok=True)
    art = _ArtifactSet(cfg.outdir)

    with _stage("config"):
        with open(art.path("config.json"), "w") as f:
            json.dump(cfg.to_json(with_outdir=False), f, indent=2,
                      sort_keys=True)
            f.write("\n")
        art.add("config.json")

    with _stage("load"):
        vol, scene, scribbles = _load_inputs(cfg)

    out = {"outdir": cfg.outdir}

    if cfg.baseline == "graphcut2d":
        with _stage("baseline2d"):
            if scene is None:
                raise PipelineError("graphcut2d baseline needs a scene "
                                    "bundle (it segments the reference view)")
            image = scene.views["ref"]
            fg_px, bg_px = rasterize_scribbles(scribbles, vol.ref_cam.width,
                                               vol.ref_cam.height)
            mask = graphcut2d_baseline(image, fg_px, bg_px, seed=cfg.seed)
            save_png(art.path("mask_ref.png"), mask)
            art.add("mask_ref.png")
            out["mask_ref"] = mask
    else:
        with _stage("features"):
            views = _source_views(cfg, vol, scene)
            fv = compute_feature_volume(vol, views, seed=cfg.seed,
                                        workers=cfg.workers)
            if cfg.save_features:
                save_feature_volume(art.path("features.fv"), fv)
                art.add("features.fv")

        if cfg.baseline == "graphcut3d":
            with _stage("lift"):
                lifted = lift_scribbles(vol, scribbles, gamma=cfg.gamma)
            with _stage("baseline3d"):
                labels, info = graphcut3d_baseline(
                    vol, fv, lifted, cfg.graphcut,
                    factor_xy=cfg.factor_xy, out_planes=cfg.out_planes)
            seg = {"lifted": lifted, "labels": labels, "info": info}
        else:
            seg = segment_volume(
                vol, fv, scribbles, gamma=cfg.gamma, train_cfg=cfg.train,
                params=cfg.graphcut, seed=cfg.seed,
                skip_postprocess=cfg.skip_postprocess,
                factor_xy=cfg.factor_xy, out_planes=cfg.out_planes)
            with _stage("artifacts"):
                save_model(art.path("model.ckpt"), seg["model"],
                           config_echo=json.dumps(
                               cfg.to_json(with_outdir=False)["train"],
                               sort_keys=True))
                art.add("model.ckpt")
                np.save(art.path("probs.npy"), seg["probs"])
                art.add("probs.npy")
        out.update(seg)
        labels = seg["labels"]

        with _stage("artifacts"):
            _write_lifted(art.path("lifted.txt"), seg["lifted"])
            art.add("lifted.txt")
            save_labels(art.path("labels.bin"), labels)
            art.add("labels.bin")

        with _stage("render"):
            r_ref = render_view(vol, vol.ref_cam, selection=labels)
            mask_ref = r_ref.alpha > 0.5
            save_png(art.path("mask_ref.png"), mask_ref)
            art.add("mask_ref.png")
            out["mask_ref"] = mask_ref
            if scene is not None:
                r_val = render_view(vol, scene.cameras["val"],
                                    selection=labels)
                mask_val = r_val.alpha > 0.5
                save_png(art.path("mask_val.png"), mask_val)
                art.add("mask_val.png")
                save_png(art.path("render_val.png"), r_val.rgb)
                art.add("render_val.png")
                out["mask_val"] = mask_val

    with _stage("metrics"):
        text = compute_metrics(cfg.outdir, cfg.scene)
        with open(art.path("report.txt"), "w") as f:
            f.write(text)
        art.add("report.txt")
        out["report_text"] = text
        out["metrics"] = {(s, m): v for s, m, v in parse_report(text)}

    with _stage("manifest"):
        art.write_manifest()
        out["artifacts"] = art.entries
    return out


def _write_lifted(path, lifted):
    """Text record of the lifted scribble voxels: '<u> <v> <d> <label>'
    per line, plus drop counters in the header."""
    with open(path, "w") as f:
        f.write(f"# lifted {len(lifted.voxels)} "
                f"dropped_no_surface {lifted.dropped_no_surface} "
                f"dropped_conflict {lifted.dropped_conflict}\n")
        for (u, v, d), lab in zip(lifted.voxels, lifted.labels):
            f.write(f"{u} {v} {d} {int(lab)}\n")


# -- CLI ------------------------------------------------------------------------

def _cmd_synth(args):
    spec = default_scene_spec(args.seed, width=args.width,
                              height=args.height, depth=args.depth,
                              m_views=args.views)
    scene = make_scene(spec)
    scribbles = None if args.no_scribbles else auto_scribbles(
        scene, seed=args.seed)
    save_scene(args.outdir, scene, scribbles)
    print(f"scene written to {args.outdir}")
    return 0


def _cmd_segment(args):
    cfg = load_config(args.config)
    rep = run_pipeline(cfg)
    sys.stdout.write(rep["report_text"])
    print(f"artifacts in {cfg.outdir}")
    return 0


def _cmd_baseline(args):
    cfg = load_config(args.config)
    cfg.baseline = args.method
    rep = run_pipeline(cfg)
    sys.stdout.write(rep["report_text"])
    print(f"artifacts in {cfg.outdir}")
    return 0


def _cmd_render(args):
    with _stage("load"):
        scene = load_scene(args.scene)
        vol = scene.volume
        labels = None
        if args.labels:
            from .volume import load_labels
            labels = load_labels(args.labels)
    with _stage("render"):
        if args.pose:
            try:
                eye = [float(x) for x in args.pose.split(",")]
                if len(eye) != 3:
                    raise ValueError("need three comma-separated numbers")
            except ValueError as e:
                raise PipelineError(f"bad --pose: {e}") from e
            cam = pose_camera(vol, eye)
        else:
            if args.view not in scene.cameras:
                raise PipelineError(
                    f"unknown view {args.view!r}; have "
                    f"{sorted(scene.cameras)}")
            cam = scene.cameras[args.view]
        r = render_view(vol, cam, selection=None if args.full else labels)
        save_png(args.out, r.rgb)
        if args.mask_out:
            save_png(args.mask_out, r.alpha > 0.5)
    print(f"render written to {args.out}")
    return 0


def _cmd_eval(args):
    scene_dir = args.scene
    if scene_dir is None:
        echo = os.path.join(args.outdir, "config.json")
        if not os.path.isfile(echo):
            raise PipelineError("[eval] no --scene given and no "
                                "config.json in the output directory")
        with open(echo) as f:
            scene_dir = json.load(f).get("scene")
        if scene_dir is None:
            raise PipelineError("[eval] run had no scene; nothing to score")
    text = compute_metrics(args.outdir, scene_dir)
    sys.stdout.write(text)
    stored = os.path.join(args.outdir, "report.txt")
    if os.path.isfile(stored):
        with open(stored) as f:
            if f.read() != text:
                print("error: [eval] recomputed metrics differ from the "
                      "stored report", file=sys.stderr)
                return 1
    return 0


def _cmd_serve(args):
    from .webui import create_app
    import uvicorn
    app = create_app()
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def main(argv=None) -> int:
    p = argparse.ArgumentParser(
        prog="voxelselect",
        description="Interactive object selection in plane-structured "
                    "voxel volumes.")
    sub = p.add_subparsers(dest="cmd", required=True, metavar="command")

    s = sub.add_parser("synth", help="generate a synthetic scene bundle")
    s.add_argument("outdir", help="bundle directory to create")
    s.add_argument("--seed", type=int, default=0, help="scene seed")
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--height", type=int, default=96)
    s.add_argument("--depth", type=int, default=32, help="plane count")
    s.add_argument("--views", type=int, default=3, help="source views")
    s.add_argument("--no-scribbles", action="store_true",
                   help="skip the automatic scribbles")
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("segment", help="run the full pipeline from a config")
    s.add_argument("--config", required=True, help="JSON config path")
    s.set_defaults(func=_cmd_segment)

    s = sub.add_parser("baseline", help="run a reference baseline instead")
    s.add_argument("--config", required=True, help="JSON config path")
    s.add_argument("--method", required=True,
                   choices=["graphcut3d", "graphcut2d"])
    s.set_defaults(func=_cmd_baseline)

    s = sub.add_parser("render", help="render a view of a selection")
    s.add_argument("--scene", required=True, help="scene bundle directory")
    s.add_argument("--labels", help="VOLLABEL selection file")
    s.add_argument("--view", default="val", help="rig view key")
    s.add_argument("--pose", help="eye 'x,y,z' in reference coordinates "
                                  "(overrides --view)")
    s.add_argument("--out", required=True, help="output PNG")
    s.add_argument("--mask-out", help="also write the alpha mask PNG")
    s.add_argument("--full", action="store_true",
                   help="render the whole volume, not the selection")
    s.set_defaults(func=_cmd_render)

    s = sub.add_parser("eval", help="recompute metrics from run artifacts")
    s.add_argument("--outdir", required=True, help="run output directory")
    s.add_argument("--scene", help="scene bundle (default: from the run's "
                                   "config echo)")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("serve", help="start the interactive HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8008)
    s.set_defaults(func=_cmd_serve)

    try:
        args = p.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return args.func(args)
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
