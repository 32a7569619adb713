"""Command line pipeline and the on-disk model / grid formats.

Subcommands:

    gen      sample an analytic shape or a mesh file into a grid file
    fit      train a model on a grid file
    extract  mesh a model's unit level set with marching cubes
    eval     extract, sample, and score a model against a reference mesh

Progress and results are printed as space-separated key=value lines.
Model files are little-endian binary with ten doubles per basis; grid
files are plain text with one sample per row.  Both round-trip exactly.
"""

from __future__ import annotations

import argparse
import os
import struct
import sys
import time

import numpy as np

from serbf.core import ErbfModel, model_eval
from serbf.metrics import MetricsReport
from serbf.optim import TrainConfig, fit
from serbf.sdf import analytic_sdf, analytic_surface_samples, mesh_sdf
from serbf.spatial import (
    GridSamples,
    _screening_radii,
    build_octree,
    build_screen_index,
    octree_from_samples,
)
from serbf.surface import load_mesh, marching_cubes, sample_surface, write_obj

MODEL_MAGIC = b"SERBF"
MODEL_VERSION = 1
GRID_HEADER = "serbf-grid 1"


def encode_model(model: ErbfModel) -> bytes:
    """Serializes a model: magic, version byte, little-endian u32 basis
    count, f64 normalization constants, then per basis ten f64 values
    (center, axes, angles, weight)."""
    rows = np.hstack(
        [
            model.centers,
            model.axes,
            model.angles,
            model.weights[:, None],
        ]
    ).astype("<f8")
    head = MODEL_MAGIC + bytes([MODEL_VERSION])
    head += struct.pack("<I", model.basis_count)
    head += struct.pack("<dd", model.norm_m, model.norm_h)
    return head + rows.tobytes()


def decode_model(data: bytes) -> ErbfModel:
    """Inverse of encode_model; rejects wrong magic, version, or size."""
    fixed = len(MODEL_MAGIC) + 1 + 4 + 16
    if len(data) < fixed or data[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ValueError("not a model file")
    version = data[len(MODEL_MAGIC)]
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    off = len(MODEL_MAGIC) + 1
    (count,) = struct.unpack_from("<I", data, off)
    norm_m, norm_h = struct.unpack_from("<dd", data, off + 4)
    if len(data) != fixed + count * 80:
        raise ValueError("model file is truncated or padded")
    rows = np.frombuffer(data, dtype="<f8", count=count * 10, offset=fixed)
    rows = rows.reshape(count, 10).astype(np.float64)
    return ErbfModel(
        centers=rows[:, 0:3],
        axes=rows[:, 3:6],
        angles=rows[:, 6:9],
        weights=rows[:, 9],
        norm_m=norm_m,
        norm_h=norm_h,
    )


def save_model(path, model: ErbfModel) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_model(model))


def load_model(path) -> ErbfModel:
    with open(path, "rb") as fh:
        return decode_model(fh.read())


def save_grid_samples(path, samples: GridSamples) -> None:
    """Writes the text grid format: header, count line, then one
    "x y z sdf layer" row per sample at full float precision."""
    with open(path, "w") as fh:
        fh.write(GRID_HEADER + "\n")
        fh.write(f"N {len(samples)}\n")
        for (x, y, z), s, lay in zip(samples.points, samples.sdf, samples.layer):
            fh.write(f"{x:.17g} {y:.17g} {z:.17g} {s:.17g} {lay}\n")


def load_grid_samples(path) -> GridSamples:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != GRID_HEADER:
            raise ValueError(f"bad grid file header {header!r}")
        count_line = fh.readline().split()
        if len(count_line) != 2 or count_line[0] != "N":
            raise ValueError("bad grid file count line")
        n = int(count_line[1])
        points = np.empty((n, 3))
        sdf = np.empty(n)
        layer = np.empty(n, dtype=np.int64)
        for i in range(n):
            parts = fh.readline().split()
            if len(parts) != 5:
                raise ValueError(f"bad grid row {i + 1}")
            points[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
            sdf[i] = float(parts[3])
            layer[i] = int(parts[4])
    return GridSamples(points=points, sdf=sdf, layer=layer)


def _log(**kv) -> None:
    print(" ".join(f"{k}={v}" for k, v in kv.items()), flush=True)


def _require(path) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _shape_params(args) -> dict:
    params = {}
    if args.radius is not None:
        params["radius"] = args.radius
    if args.half_extents is not None:
        params["half_extents"] = _floats3(args.half_extents, "--half-extents")
    if args.major_radius is not None:
        params["major_radius"] = args.major_radius
    if args.minor_radius is not None:
        params["minor_radius"] = args.minor_radius
    return params


def _floats3(text, flag):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"{flag} needs three comma-separated numbers")
    return tuple(parts)


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get("SERBF_THREADS", "1"))


def cmd_gen(args) -> int:
    """Samples a surface, builds the grid layers, and writes a grid file."""
    if args.mesh is not None:
        mesh = load_mesh(_require(args.mesh))
        surface, _ = sample_surface(mesh, args.surface_count, seed=args.seed)
        sdf_fn = lambda pts: mesh_sdf(pts, mesh)
        source = args.mesh
    else:
        params = _shape_params(args)
        surface = analytic_surface_samples(
            args.shape, args.surface_count, seed=args.seed, **params
        )
        sdf_fn = analytic_sdf(args.shape, **params)
        source = args.shape
    octree = build_octree(surface, args.depth)
    total = 0
    for lay in octree.layers:
        lay.sdf = sdf_fn(lay.points)
        total += len(lay.points)
    samples = GridSamples.from_octree(octree, surface)
    save_grid_samples(args.out, samples)
    _log(
        event="gen",
        source=source,
        depth=args.depth,
        grid_points=total,
        surface_points=len(surface),
        out=args.out,
    )
    return 0


def cmd_fit(args) -> int:
    """Trains on a grid file and writes the model file."""
    samples = load_grid_samples(_require(args.grid))
    octree, surface = octree_from_samples(samples)
    config = TrainConfig(
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        l1_cutoff_epoch=args.l1_cutoff_epoch,
        lr=args.lr,
        l_max=args.l_max,
        l_s=args.l_s,
        tau1=args.tau1,
        tau2=args.tau2,
        tau_m=args.tau_m,
        tau_d=args.tau_d,
        tau_l1=args.tau_l1,
        tau_l2=args.tau_l2,
        k_l1=args.k_l1,
        k_l2=args.k_l2,
        gamma=args.gamma,
        epsilon=args.epsilon,
        inscribed_radius_convention=args.radius_convention,
        seed=args.seed,
        threads=_threads(args),
    )
    t0 = time.perf_counter()
    every = args.log_every

    def sink(rec):
        if every > 0 and rec.epoch % every == 0:
            _log(
                event="epoch",
                epoch=rec.epoch,
                l2=f"{rec.l2:.6g}",
                l1=f"{rec.l1:.6g}",
                alpha=f"{rec.alpha:.4g}",
                bases=rec.basis_count,
                active=rec.active_size,
                layer=rec.layer,
            )

    model = fit(octree, surface, config, progress_sink=sink)
    save_model(args.out, model)
    _log(
        event="fit",
        bases=model.basis_count,
        params=10 * model.basis_count,
        seconds=f"{time.perf_counter() - t0:.3f}",
        out=args.out,
    )
    return 0


def _parse_bounds(text):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 6:
        raise ValueError("--bounds needs x0,y0,z0,x1,y1,z1")
    lo = np.array(parts[:3])
    hi = np.array(parts[3:])
    if not np.all(hi > lo):
        raise ValueError("--bounds must have positive extent")
    return lo, hi


def _default_bounds(model: ErbfModel):
    """Axis box covering every kernel's screened support, with huge
    supports clamped to the span of the centers so degenerate axes do
    not blow the box up."""
    radii = _screening_radii(model.axes, 1e-7)
    extent = float(np.max(model.centers.max(axis=0) - model.centers.min(axis=0)))
    clamp = extent if extent > 0.0 else 1.0
    r = np.minimum(radii, clamp)[:, None]
    return (model.centers - r).min(axis=0), (model.centers + r).max(axis=0)


def _extract_mesh(model: ErbfModel, bounds, resolution: int, iso: float, threads: int):
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    lo, hi = bounds
    n = resolution + 1
    axes = [np.linspace(lo[k], hi[k], n) for k in range(3)]
    spacing = (hi - lo) / resolution
    if not np.allclose(spacing, spacing[0], rtol=1e-9, atol=0.0):
        raise ValueError("extraction bounds must be cubic")
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    screen = build_screen_index(pts, model, 1e-7, workers=threads)
    values = model_eval(pts, model, screen).reshape(n, n, n)
    # The level set encloses values above iso; negating both puts the
    # enclosed side below, which makes the table winding face outward.
    return marching_cubes(-values, lo, float(spacing[0]), -iso)


def _cube_bounds(lo, hi, pad: float = 0.0):
    center = (lo + hi) / 2.0
    half = float(np.max(hi - lo)) * (1.0 + pad) / 2.0
    if half <= 0.0:
        raise ValueError("degenerate bounds")
    return center - half, center + half


def cmd_extract(args) -> int:
    """Meshes a model file and writes a Wavefront OBJ."""
    model = load_model(_require(args.model))
    if args.bounds is not None:
        bounds = _cube_bounds(*_parse_bounds(args.bounds))
    else:
        bounds = _cube_bounds(*_default_bounds(model))
    mesh = _extract_mesh(model, bounds, args.resolution, args.iso, _threads(args))
    write_obj(args.out, mesh)
    _log(
        event="extract",
        vertices=mesh.vertex_count,
        faces=mesh.face_count,
        closed=int(mesh.is_closed()),
        out=args.out,
    )
    return 0


def cmd_eval(args) -> int:
    """Scores a model against a reference mesh with HD, CD, and CS."""
    model = load_model(_require(args.model))
    ref = load_mesh(_require(args.ref))
    t0 = time.perf_counter()
    if args.bounds is not None:
        bounds = _cube_bounds(*_parse_bounds(args.bounds))
    else:
        bounds = _cube_bounds(
            ref.vertices.min(axis=0), ref.vertices.max(axis=0), pad=0.10
        )
    mesh = _extract_mesh(model, bounds, args.resolution, args.iso, _threads(args))
    if mesh.face_count == 0:
        raise ValueError("extraction produced an empty mesh")
    got_pts, got_nrm = sample_surface(mesh, args.samples, seed=args.seed)
    ref_pts, ref_nrm = sample_surface(ref, args.samples, seed=args.seed + 1)
    report = MetricsReport.measure(
        got_pts,
        got_nrm,
        ref_pts,
        ref_nrm,
        runtime=time.perf_counter() - t0,
        basis_count=model.basis_count,
    )
    _log(
        event="eval",
        hd=f"{report.hd:.6g}",
        cd=f"{report.cd:.6g}",
        cs=f"{report.cs:.6g}",
        samples=report.sample_count,
        runtime=f"{report.runtime:.3f}",
        bases=report.basis_count,
        params=report.param_count,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="serbf",
        description="Sparse ellipsoidal Gaussian networks for signed distance fields.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="sample a shape into a grid file")
    src = gen.add_mutually_exclusive_group(required=True)
    src.add_argument("--shape", choices=("sphere", "box", "torus"))
    src.add_argument("--mesh", help="OBJ or binary PLY mesh file")
    gen.add_argument("--radius", type=float, default=None)
    gen.add_argument("--half-extents", default=None, help="a,b,c")
    gen.add_argument("--major-radius", type=float, default=None)
    gen.add_argument("--minor-radius", type=float, default=None)
    gen.add_argument("--depth", type=int, default=6, help="octree depth (default 6)")
    gen.add_argument("--surface-count", type=int, default=40000)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen)

    fit_p = sub.add_parser("fit", help="train a model on a grid file")
    fit_p.add_argument("--grid", required=True)
    fit_p.add_argument("--out", required=True)
    fit_p.add_argument("--batch-size", type=int, default=10000)
    fit_p.add_argument("--max-epochs", type=int, default=2000)
    fit_p.add_argument("--l1-cutoff-epoch", type=int, default=1600)
    fit_p.add_argument("--lr", type=float, default=0.01)
    fit_p.add_argument("--l-max", type=int, default=10)
    fit_p.add_argument("--l-s", type=int, default=None)
    fit_p.add_argument("--tau1", type=float, default=0.9)
    fit_p.add_argument("--tau2", type=float, default=1.1)
    fit_p.add_argument("--tau-m", type=float, default=0.02)
    fit_p.add_argument("--tau-d", type=float, default=0.01)
    fit_p.add_argument("--tau-l1", type=float, default=5.0)
    fit_p.add_argument("--tau-l2", type=float, default=0.5)
    fit_p.add_argument("--k-l1", type=int, default=50)
    fit_p.add_argument("--k-l2", type=int, default=10)
    fit_p.add_argument("--gamma", type=float, default=1e-3)
    fit_p.add_argument("--epsilon", type=float, default=1e-7)
    fit_p.add_argument(
        "--radius-convention",
        choices=("as_printed", "squared"),
        default="as_printed",
        help="inscribed-sphere removal comparison",
    )
    fit_p.add_argument("--seed", type=int, default=0)
    fit_p.add_argument("--threads", type=int, default=None)
    fit_p.add_argument("--log-every", type=int, default=100)
    fit_p.set_defaults(func=cmd_fit)

    ext = sub.add_parser("extract", help="mesh a model file")
    ext.add_argument("--model", required=True)
    ext.add_argument("--out", required=True)
    ext.add_argument("--resolution", type=int, default=128)
    ext.add_argument("--iso", type=float, default=1.0)
    ext.add_argument("--bounds", default=None, help="x0,y0,z0,x1,y1,z1")
    ext.add_argument("--threads", type=int, default=None)
    ext.set_defaults(func=cmd_extract)

    ev = sub.add_parser("eval", help="score a model against a reference mesh")
    ev.add_argument("--model", required=True)
    ev.add_argument("--ref", required=True, help="reference OBJ or PLY mesh")
    ev.add_argument("--samples", type=int, default=100000)
    ev.add_argument("--resolution", type=int, default=128)
    ev.add_argument("--iso", type=float, default=1.0)
    ev.add_argument("--bounds", default=None, help="x0,y0,z0,x1,y1,z1")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--threads", type=int, default=None)
    ev.set_defaults(func=cmd_eval)
    return parser


def _fuse_bounds(argv):
    """Join "--bounds" with a following value that begins with a minus
    sign; argparse would otherwise read "-0.55,..." as an option name."""
    out = []
    skip = False
    for i, tok in enumerate(argv):
        if skip:
            skip = False
            continue
        nxt = argv[i + 1] if i + 1 < len(argv) else None
        if tok == "--bounds" and nxt is not None and nxt.startswith("-"):
            out.append(f"--bounds={nxt}")
            skip = True
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    args = build_parser().parse_args(_fuse_bounds(list(argv)))
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
