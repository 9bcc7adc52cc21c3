"""``implantformer`` command line.

Exit codes: 0 success, 2 usage, 3 unreadable/malformed files, 4 invalid
tracks or configs, 5 evaluation input errors, 6 diverged training, 1 other.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ImplantFormerError
from .volume import DEFAULT_WINDOW

log = logging.getLogger("implantformer")


def _range(text):
    """Half-open ``a..b`` slice range."""
    try:
        a, b = text.split("..")
        lo, hi = int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a..b, got {text!r}") from None
    if hi <= lo:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return list(range(lo, hi))


def _floats(text):
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _window(text):
    vals = _floats(text)
    if len(vals) != 2 or vals[1] <= vals[0]:
        raise argparse.ArgumentTypeError("window must be lo,hi with lo < hi")
    return vals


def _read_json(path):
    from .errors import VolumeFormatError
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{path}: invalid JSON ({exc})") from exc


# ------------------------------------------------------------- commands


def cmd_phantom(args):
    from .volume import generate_phantom, random_phantom_config, save_track, save_volume

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.patients):
        cfg = random_phantom_config(args.seed, i, image_size=args.image_size, depth=args.depth,
                                    crown_boundary=args.crown_boundary)
        volume, track = generate_phantom(cfg)
        pid = f"patient-{i:04d}"
        track.patient = pid
        save_volume(volume, out / f"{pid}.ivol")
        save_track(track, out / f"{pid}.root.json")
    print(f"wrote {args.patients} phantom patients to {out}")
    return 0


def _detections_as_track(path, min_confidence):
    from .volume import KeypointTrack, load_track

    obj = _read_json(path)
    if "slices" not in obj:
        return load_track(path)
    pts = []
    for s in sorted(obj["slices"], key=lambda s: s["z"]):
        dets = [d for d in s["detections"] if d["confidence"] >= min_confidence]
        if dets:
            best = max(dets, key=lambda d: d["confidence"])
            pts.append((best["x"], best["y"], s["z"]))
    return KeypointTrack(np.array(pts, dtype=np.float64).reshape(-1, 3), "crown",
                         patient=str(obj["patient"]))


def cmd_labels(args):
    from .centerline import project_crown_to_root, project_root_to_crown
    from .volume import load_track, load_volume, partition, save_track

    if args.volume:
        crown_zs, root_zs = partition(load_volume(args.volume))
    else:
        crown_zs, root_zs = args.crown_z, args.root_z
    if args.direction == "project-to-crown":
        if crown_zs is None:
            raise argparse.ArgumentTypeError("need --crown-z or --volume")
        out = project_root_to_crown(load_track(args.track), crown_zs)
    else:
        if root_zs is None:
            raise argparse.ArgumentTypeError("need --root-z or --volume")
        out = project_crown_to_root(_detections_as_track(args.track, args.min_confidence), root_zs)
    save_track(out, args.out)
    return 0


def _cases(data_dir):
    from .volume import load_track, load_volume

    vols = sorted(Path(data_dir).glob("*.ivol"))
    if not vols:
        raise FileNotFoundError(f"no .ivol volumes in {data_dir}")
    cases = []
    for v in vols:
        track_path = v.with_name(v.stem + ".root.json")
        cases.append((v.stem, load_volume(v), load_track(track_path)))
    return cases


def cmd_train(args):
    from .evaluation import five_fold_split
    from .network import NetConfig, save_checkpoint
    from .training import TrainConfig, slice_dataset, train, write_loss_log

    net = NetConfig.from_json(_read_json(args.net_config)) if args.net_config else NetConfig()
    tc = TrainConfig.from_json(_read_json(args.train_config)) if args.train_config \
        else TrainConfig(crop_size=net.image_size)
    cases = _cases(args.data)
    if args.holdout_fold is not None:
        folds = five_fold_split([c[0] for c in cases], args.split_seed)
        held = set(folds[args.holdout_fold])
        cases = [c for c in cases if c[0] not in held]
    data = slice_dataset([(v, t) for _, v, t in cases], args.region, args.window)
    params, history = train(data, net, tc)
    save_checkpoint(args.out, net, params)
    if args.log:
        write_loss_log(args.log, history)
    print(f"trained on {len(data[0])} slices; final loss {history[-1]['l_total']:.4f}")
    return 0


def cmd_infer(args):
    from .heatmap import save_detections
    from .network import ImplantFormer, load_checkpoint
    from .pipeline import infer_volume
    from .volume import load_volume, save_track

    config, params = load_checkpoint(args.model)
    model = ImplantFormer(config, params)
    volume = load_volume(args.volume)
    patient = args.patient or Path(args.volume).stem
    res = infer_volume(model, volume, args.min_confidence, args.top_k, args.window)
    save_detections(args.detections, patient, res.detections, args.fold)
    if args.track:
        res.root_track.patient = patient
        save_track(res.root_track, args.track)
    hits = sum(1 for d in res.detections.values() if d)
    print(f"{hits}/{len(res.detections)} crown slices detected; root track {len(res.root_track)} pts")
    return 0


def cmd_eval(args):
    from .errors import EvaluationError
    from .evaluation import evaluate

    preds = sorted(glob.glob(args.pred))
    gts = sorted(glob.glob(args.gt))
    if not preds or not gts:
        raise EvaluationError("empty input: globs matched no files")
    report = evaluate(preds, gts, args.iou, box_size=args.box, bin_width=args.bin_width,
                      ap_mode=args.ap_mode)
    report.save(args.out)
    for t in report.thresholds:
        line = f"AP{round(t * 100)} {report.ap[t]:.4f}"
        if t in report.summary:
            line += f"  folds {report.summary[t]['text']}"
        print(line)
    return 0


def cmd_render(args):
    from .pipeline import render_implant_cylinder
    from .volume import load_track, load_volume, save_volume

    out = render_implant_cylinder(load_volume(args.volume), load_track(args.track),
                                  args.radius, args.depth, args.value)
    save_volume(out, args.out)
    return 0


def histogram_svg(bins, width=480, height=240):
    pad = 30
    top = max((c for _, _, c in bins), default=0) or 1
    bw = (width - 2 * pad) / max(len(bins), 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
             'stroke="black"/>']
    for i, (lo, hi, c) in enumerate(bins):
        h = (height - 2 * pad) * c / top
        x = pad + i * bw
        parts.append(f'<rect x="{x:.2f}" y="{height - pad - h:.2f}" width="{bw * 0.9:.2f}" '
                     f'height="{h:.2f}" fill="steelblue"><title>[{lo:g},{hi:g}): {c}</title></rect>')
        parts.append(f'<text x="{x:.2f}" y="{height - pad + 14}" font-size="10">{lo:g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args):
    from .evaluation import EvalReport

    report = EvalReport.from_json(_read_json(args.report))
    with open(args.out, "w") as fh:
        fh.write("bin_start,bin_end,count\n")
        for lo, hi, c in report.histogram:
            fh.write(f"{lo:g},{hi:g},{c}\n")
    if args.svg:
        Path(args.svg).write_text(histogram_svg(report.histogram))
    return 0


# --------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="implantformer",
                                description="Implant position prediction on CBCT slices.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    ph = sub.add_parser("phantom", help="synthetic CBCT phantoms")
    phs = ph.add_subparsers(dest="action", required=True)
    g = phs.add_parser("generate")
    g.add_argument("--patients", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--depth", type=int, default=40)
    g.add_argument("--crown-boundary", type=int, default=20)
    g.set_defaults(func=cmd_phantom)

    lb = sub.add_parser("labels", help="project tracks between root and crown")
    lb.add_argument("direction", choices=["project-to-crown", "project-to-root"])
    lb.add_argument("--track", required=True, help="track JSON, or detections JSON for project-to-root")
    lb.add_argument("--crown-z", type=_range, help="half-open slice range a..b")
    lb.add_argument("--root-z", type=_range, help="half-open slice range a..b")
    lb.add_argument("--volume", help="take slice ranges from this volume's crown boundary")
    lb.add_argument("--min-confidence", type=float, default=0.0)
    lb.add_argument("--out", required=True)
    lb.set_defaults(func=cmd_labels)

    tr = sub.add_parser("train", help="train on a directory of phantoms")
    tr.add_argument("--data", required=True)
    tr.add_argument("--net-config")
    tr.add_argument("--train-config")
    tr.add_argument("--out", required=True)
    tr.add_argument("--log")
    tr.add_argument("--region", choices=["crown", "root"], default="crown")
    tr.add_argument("--holdout-fold", type=int, choices=range(5))
    tr.add_argument("--split-seed", type=int, default=0)
    tr.add_argument("--window", type=_window, default=DEFAULT_WINDOW)
    tr.set_defaults(func=cmd_train)

    inf = sub.add_parser("infer", help="predict crown positions and the root track")
    inf.add_argument("--model", required=True)
    inf.add_argument("--volume", required=True)
    inf.add_argument("--detections", required=True)
    inf.add_argument("--track")
    inf.add_argument("--patient")
    inf.add_argument("--fold", type=int)
    inf.add_argument("--top-k", type=int, default=1)
    inf.add_argument("--min-confidence", type=float, default=0.0)
    inf.add_argument("--window", type=_window, default=DEFAULT_WINDOW)
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("eval", help="AP and distance histogram")
    ev.add_argument("--pred", required=True, help="glob of detection or track files")
    ev.add_argument("--gt", required=True, help="glob of track files")
    ev.add_argument("--iou", type=_floats, default=(0.5, 0.75))
    ev.add_argument("--box", type=float, default=21.0)
    ev.add_argument("--bin-width", type=float, default=5.0)
    ev.add_argument("--ap-mode", choices=["all", "11"], default="all")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    rd = sub.add_parser("render", help="burn an implant cylinder into a volume")
    rd.add_argument("--volume", required=True)
    rd.add_argument("--track", required=True)
    rd.add_argument("--radius", type=float, default=10.0)
    rd.add_argument("--depth", type=int)
    rd.add_argument("--value", type=int, default=3100)
    rd.add_argument("--out", required=True)
    rd.set_defaults(func=cmd_render)

    pl = sub.add_parser("plot", help="figures from an evaluation report")
    pls = pl.add_subparsers(dest="kind", required=True)
    dh = pls.add_parser("distance-hist")
    dh.add_argument("--report", required=True)
    dh.add_argument("--out", required=True)
    dh.add_argument("--svg")
    dh.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("IMPLANTFORMER_THREADS")
    if threads:
        _kernels.set_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        parser.print_usage(sys.stderr)
        print(f"implantformer: error: {exc}", file=sys.stderr)
        return 2
    except ImplantFormerError as exc:
        print(f"implantformer: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"implantformer: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
