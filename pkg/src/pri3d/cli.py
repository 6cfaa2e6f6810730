"""Command-line entry point: ``pri3d <subcommand> ...``.

Every subcommand exits 0 on success. Failures print one ``pri3d: error:``
line to stderr and exit 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import io
from ._parallel import pmap
from .contrastive.encoder import DEFAULT_DIM, init_params
from .contrastive.invariance import pair_invariance
from .contrastive.loss import DEFAULT_TAU
from .contrastive.train import PairSample, TrainConfig, train
from .errors import MissingFile, Pri3DError
from .geoprior import DEFAULT_VOXEL, build_surface, frame_chunks, pixel_voxel_correspondences
from .miner import (
    DEFAULT_FRAME_STRIDE,
    DEFAULT_MIN_OVERLAP,
    DEFAULT_RADIUS,
    match_frames,
    mine_pairs,
    subsample_matches,
)
from .synthetic import circular_path, generate_scene, render_path
from .viz import plot_invariance, plot_loss_trace, visualize_pair

log = logging.getLogger("pri3d")

CORR_INDEX = "index.csv"


def corr_name(i: int, j: int) -> str:
    return f"{i:06d}_{j:06d}.cor"


def chunk_name(i: int) -> str:
    return f"{i:06d}.chk"


def pv_name(i: int) -> str:
    return f"{i:06d}.pvc"


def _frame_map(frames) -> dict:
    return {f.frame_index: f for f in frames}


# --- subcommands -------------------------------------------------------------

def cmd_synth(a) -> None:
    scene = generate_scene(a.seed, a.boxes, a.texture)
    path = circular_path(scene, a.frames, a.width, a.height, a.fov, arc=math.radians(a.arc))
    frames = [io.quantize_depth(f) for f in render_path(scene, path)]
    io.write_sequence(frames, a.out, f"synthetic-{a.seed}",
                      extra={"scene": scene.to_json(), "arc_deg": a.arc})
    print(f"wrote {len(frames)} frames to {a.out}")


def cmd_mine_pairs(a) -> None:
    frames = io.load_sequence(a.seq)
    pairs = mine_pairs(frames, a.stride, a.min_overlap, a.radius, a.pixel_stride)
    io.save_pairs(a.out, pairs, stride=a.stride, min_overlap=a.min_overlap, radius=a.radius,
                  pixel_stride=a.pixel_stride)
    print(f"{len(pairs)} pairs with overlap >= {a.min_overlap}")


def cmd_mine_corrs(a) -> None:
    frames = _frame_map(io.load_sequence(a.seq))
    pairs = io.load_pairs(a.pairs)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)

    def work(p):
        c = match_frames(frames[p.i], frames[p.j], a.radius, a.pixel_stride)
        overlap = p.overlap
        if a.sample:
            c = subsample_matches(c, a.sample, (a.seed, p.i, p.j))
        io.save_correspondences(out / corr_name(p.i, p.j), c, overlap)
        return [p.i, p.j, overlap, len(c), corr_name(p.i, p.j)]

    rows = pmap(work, pairs)
    io.write_csv(out / CORR_INDEX, ["i", "j", "overlap", "count", "file"], rows)
    print(f"wrote {len(rows)} correspondence files to {out}")


def cmd_chunk(a) -> None:
    frames = io.load_sequence(a.seq)
    if a.pairs:
        keep = {k for p in io.load_pairs(a.pairs) for k in (p.i, p.j)}
        targets = [f for f in frames if f.frame_index in keep]
    else:
        targets = frames
    surface = build_surface(frames, a.surface_stride)
    chunks = frame_chunks(targets, surface, a.voxel)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)

    def work(fc):
        f, c = fc
        io.save_chunk(out / chunk_name(f.frame_index), c)
        io.save_pixel_voxel(out / pv_name(f.frame_index), pixel_voxel_correspondences(f, c, a.voxel))

    pmap(work, list(zip(targets, chunks)))
    print(f"wrote {len(chunks)} chunks to {out}")


def load_training_set(seq, corrs_dir, chunks_dir) -> list[PairSample]:
    frames = _frame_map(io.load_sequence(seq))
    cdir, kdir = Path(corrs_dir), Path(chunks_dir)
    out = []
    for row in io.read_csv(cdir / CORR_INDEX):
        i, j = int(row["i"]), int(row["j"])
        view = io.load_correspondences(cdir / row["file"]).corrs
        out.append(PairSample(
            frames[i], frames[j],
            io.load_chunk(kdir / chunk_name(i)), io.load_chunk(kdir / chunk_name(j)),
            view, io.load_pixel_voxel(kdir / pv_name(i)), io.load_pixel_voxel(kdir / pv_name(j)),
        ))
    return out


def cmd_train(a) -> None:
    dataset = load_training_set(a.seq, a.corrs, a.chunks)
    if not dataset:
        raise MissingFile(f"no training pairs listed in {Path(a.corrs) / CORR_INDEX}")
    cfg = TrainConfig(lr=a.lr, batch_size=a.batch, iterations=a.iters, tau=a.tau, k=a.k,
                      w_view=a.w_view, w_geo=a.w_geo, momentum=a.momentum, eval_every=a.eval_every)
    params = init_params(a.seed, a.dim, normalize=not a.no_normalize)
    evals = [(s.frame_i, s.frame_j, s.view) for s in dataset if len(s.view)]
    res = train(params, dataset, cfg, a.seed, eval_pairs=evals if a.eval_every else None,
                log=(lambda r: log.info("step %d loss %.5f", r.step, r.loss_mean)))
    out = Path(a.out)
    io.save_checkpoint(out, res.params)
    trace_csv = Path(a.trace) if a.trace else out.with_name(out.name + ".trace.csv")
    io.write_trace_csv(trace_csv, res.trace)
    plot_loss_trace(res.trace, trace_csv.with_suffix(".png"))
    if res.trace:
        print(f"loss_mean {res.trace[0].loss_mean:.4f} -> {res.trace[-1].loss_mean:.4f}")
    if res.invariance:
        print(f"invariance score {res.invariance[0][1]:.4f} -> {res.invariance[-1][1]:.4f}")


def cmd_eval(a) -> None:
    params = io.load_checkpoint(a.ckpt)
    frames = _frame_map(io.load_sequence(a.seq))
    if a.corrs:
        cdir = Path(a.corrs)
        sets = [io.load_correspondences(cdir / r["file"]).corrs for r in io.read_csv(cdir / CORR_INDEX)]
    else:
        pairs = mine_pairs(list(frames.values()), a.stride, a.min_overlap, a.radius)
        sets = [match_frames(frames[p.i], frames[p.j], a.radius) for p in pairs]
    sets = [c for c in sets if len(c)]
    if not sets:
        raise MissingFile("no evaluation pairs with correspondences")
    stats = [pair_invariance(params, frames[c.source_id], frames[c.target_id], c, a.n_neg, a.seed + k)
             for k, c in enumerate(sets)]
    out = Path(a.out)
    io.write_invariance_csv(out, stats)
    plot_invariance(stats, out.with_suffix(".png"))
    print(f"view invariance score {np.mean([s.score for s in stats]):.4f} over {len(stats)} pairs")


def cmd_viz(a) -> None:
    try:
        i, j = (int(x) for x in a.pair.split(","))
    except ValueError:
        raise ValueError(f"--pair must look like I,J, got {a.pair!r}") from None
    frames = _frame_map(io.load_sequence(a.seq))
    for k in (i, j):
        if k not in frames:
            raise MissingFile(f"frame {k} is not in the sequence")
    c = io.load_correspondences(a.corrs).corrs if a.corrs else match_frames(frames[i], frames[j], a.radius)
    fig = visualize_pair(frames[i], frames[j], c, a.sample, a.out, a.seed)
    csv_path = Path(a.out).with_suffix(".csv")
    io.write_csv(csv_path, ["row", "x0", "y0", "x1", "y1", "distance"],
                 ([int(r), *map(int, s), float(d)] for r, s, d in zip(fig.indices, fig.segments, fig.distances)))
    print(f"drew {len(fig.indices)} correspondences to {a.out}")


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pri3d", description="Geometric pre-training data and training tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic RGB-D sequence")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--boxes", type=int, default=8)
    s.add_argument("--frames", type=int, default=100)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--height", type=int, default=96)
    s.add_argument("--fov", type=float, default=70.0, help="horizontal field of view, degrees")
    s.add_argument("--arc", type=float, default=360.0, help="angle swept by the camera ring, degrees")
    s.add_argument("--texture", type=float, default=0.35, help="albedo pattern amplitude")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("mine-pairs", help="find overlapping frame pairs")
    s.add_argument("--seq", required=True)
    s.add_argument("--stride", type=int, default=DEFAULT_FRAME_STRIDE)
    s.add_argument("--min-overlap", type=float, default=DEFAULT_MIN_OVERLAP)
    s.add_argument("--radius", type=float, default=DEFAULT_RADIUS)
    s.add_argument("--pixel-stride", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_mine_pairs)

    s = sub.add_parser("mine-corrs", help="write pixel correspondences for each pair")
    s.add_argument("--seq", required=True)
    s.add_argument("--pairs", required=True)
    s.add_argument("--radius", type=float, default=DEFAULT_RADIUS)
    s.add_argument("--pixel-stride", type=int, default=1)
    s.add_argument("--sample", type=int, default=0, help="keep at most K matches per pair (0 = all)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_mine_corrs)

    s = sub.add_parser("chunk", help="voxelize per-frame chunks and pixel-voxel matches")
    s.add_argument("--seq", required=True)
    s.add_argument("--voxel", type=float, default=DEFAULT_VOXEL)
    s.add_argument("--pairs", help="only chunk frames that appear in this pairs file")
    s.add_argument("--surface-stride", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_chunk)

    s = sub.add_parser("train", help="train the tiny encoders")
    s.add_argument("--seq", required=True)
    s.add_argument("--corrs", required=True)
    s.add_argument("--chunks", required=True)
    s.add_argument("--iters", type=int, default=200)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--batch", type=int, default=8)
    s.add_argument("--tau", type=float, default=DEFAULT_TAU)
    s.add_argument("--k", type=int, default=1024, help="matches sampled per loss term")
    s.add_argument("--w-view", type=float, default=1.0)
    s.add_argument("--w-geo", type=float, default=1.0)
    s.add_argument("--momentum", type=float, default=0.0)
    s.add_argument("--dim", type=int, default=DEFAULT_DIM)
    s.add_argument("--no-normalize", action="store_true", help="use raw dot products")
    s.add_argument("--eval-every", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trace", help="loss trace CSV (default: <out>.trace.csv)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval-invariance", help="score a checkpoint's view invariance")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--corrs", help="correspondence directory (default: mine pairs from --seq)")
    s.add_argument("--stride", type=int, default=DEFAULT_FRAME_STRIDE)
    s.add_argument("--min-overlap", type=float, default=DEFAULT_MIN_OVERLAP)
    s.add_argument("--radius", type=float, default=DEFAULT_RADIUS)
    s.add_argument("--n-neg", type=int, default=2048)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("viz", help="draw correspondences between two frames")
    s.add_argument("--seq", required=True)
    s.add_argument("--pair", required=True, help="frame indices I,J")
    s.add_argument("--corrs", help="correspondence file (default: match the frames directly)")
    s.add_argument("--radius", type=float, default=DEFAULT_RADIUS)
    s.add_argument("--sample", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_viz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        args.fn(args)
    except (Pri3DError, ValueError, KeyError, OSError) as e:
        print(f"pri3d: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
