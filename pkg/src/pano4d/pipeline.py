"""Command line driver: synth | animate | align | lift | render | eval.

Every subcommand reads ``--input`` (default: the output directory) and writes
into ``--out``.  Configuration is a flat ``key = value`` file with dotted
section keys; see ``SCHEMA`` for every key, its type and default.  Tensor
outputs are P4DT files (PNG previews are written next to them).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import align as align_mod
from . import animator, lift as lift_mod, metrics
from .external import HandshakeTimeout
from .geom import Camera, camera_fan, icosphere_samples, plane_size_for_fov
from .image import EquirectImage, PanoVideo, read_png, write_png, write_png16
from .splat import RenderSettings, rasterize, read_ply, write_ply
from .synth import SyntheticScene
from .tensorio import TensorFormatError, read_tensor, write_tensor

log = logging.getLogger("pano4d")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("synth", "animate", "align", "lift", "render", "eval")


class InputError(Exception):
    """Bad configuration, arguments or input files (exit code 1)."""


# ---------------------------------------------------------------------------
# configuration

def _vec(s) -> tuple:
    if isinstance(s, (tuple, list)):
        return tuple(float(x) for x in s)
    return tuple(float(x) for x in str(s).split(",") if x.strip())


def _ivec(s) -> tuple:
    if isinstance(s, (tuple, list)):
        return tuple(int(x) for x in s)
    return tuple(int(x) for x in str(s).split(",") if x.strip())


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _schema() -> dict:
    s = {
        "seed": (int, 0),
        "scene.height": (int, 256),
        "scene.frames": (int, 4),
        "scene.supersample": (int, 2),
        "scene.room_radius": (float, 4.0),
        "scene.texture_freq": (float, 2.0),
        "scene.blob_radius": (float, 0.55),
        "scene.blob_velocity": (_vec, (0.07, 0.0, 0.03)),
        "scene.mask_margin": (float, 4.0),
        "fan.fov": (float, 80.0),
        "fan.res": (int, 128),
        "animate.denoiser": (str, "flow"),          # flow | identity | external
        "animate.codec": (str, "identity"),
        "animate.external_dir": (str, ""),          # empty: environment variable
        "animate.view_res": (int, 128),
        "animate.downsample": (int, 2),
        "animate.steps": (int, 25),
        "animate.stochasticity": (float, 0.5),
        "animate.target": (str, "truth"),           # truth (input frames/) | rotation
        "animate.per_face": (int, 0),               # 0: derived from the latent resolution
        "animate.workers": (int, 1),
        "animate.timeout": (float, 60.0),
        "animate.save_views": (_bool, False),
        "align.depth": (str, "synthetic"),          # synthetic | external
        "align.external_dir": (str, ""),
        "align.scale_min": (float, 0.7),
        "align.scale_max": (float, 1.4),
        "align.shift_amplitude": (float, 0.1),
        "align.timeout": (float, 60.0),
        "lift.extractor": (str, "pyramid"),
        "render.view": (int, -1),                   # fan index, -1: all fan directions
        "render.direction": (_vec, ()),             # overrides render.view when set
        "render.offset": (_vec, (0.0, 0.0, 0.0)),
        "render.random_offset": (_bool, False),     # draw offsets in [-alpha, alpha]^3 instead
        "render.alpha": (float, 0.05),
        "render.res": (int, 128),
        "render.truth": (_bool, False),             # also render the synthetic ground truth
        "eval.figure": (_bool, True),
    }
    for f in fields(align_mod.AlignConfig):
        s[f"align.{f.name}"] = (type(f.default), f.default)
    for f in fields(lift_mod.LiftConfig):
        d = f.default
        if isinstance(d, tuple):
            s[f"lift.{f.name}"] = (_ivec if all(isinstance(x, int) for x in d) else _vec, d)
        else:
            s[f"lift.{f.name}"] = (type(d), d)
    return s


SCHEMA = _schema()


@dataclass
class Config:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name: str) -> dict:
        p = name + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def canonical(self) -> str:
        return "\n".join(f"{k}={_fmt(self.values[k])}" for k in sorted(self.values))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def align_config(self) -> align_mod.AlignConfig:
        sec = self.section("align")
        return align_mod.AlignConfig(**{f.name: sec[f.name] for f in fields(align_mod.AlignConfig)})

    def lift_config(self) -> lift_mod.LiftConfig:
        sec = self.section("lift")
        return lift_mod.LiftConfig(**{f.name: sec[f.name] for f in fields(lift_mod.LiftConfig)})


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(x) for x in v)
    return repr(v)


def _coerce(key: str, raw):
    if key not in SCHEMA:
        raise InputError(f"unknown config key: {key}")
    conv, _ = SCHEMA[key]
    try:
        return conv(raw.strip()) if isinstance(raw, str) and conv is not str else conv(raw)
    except (TypeError, ValueError) as e:
        raise InputError(f"bad value for {key}: {raw!r} ({e})") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{source}:{n}: expected 'key = value'")
        key, raw = (x.strip() for x in line.split("=", 1))
        if key in out:
            raise InputError(f"{source}:{n}: duplicate key {key}")
        out[key] = _coerce(key, raw)
    return out


def load_config(path=None, overrides=(), seed=None) -> Config:
    values = {k: d for k, (_, d) in SCHEMA.items()}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(), str(p)))
    for item in overrides:
        if "=" not in item:
            raise InputError(f"override must be key=value: {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = _coerce(k.strip(), v)
    if seed is not None:
        values["seed"] = int(seed)
    cfg = Config(values)
    try:  # module-level validation
        cfg.align_config()
        cfg.lift_config()
    except ValueError as e:
        raise InputError(str(e)) from None
    for key in ("scene.height", "scene.frames", "fan.res", "animate.view_res", "animate.steps", "render.res"):
        if values[key] < 1:
            raise InputError(f"{key} must be positive")
    return cfg


def module_seeds(seed: int) -> dict:
    """Independent integer seeds per module, all derived from the one run seed."""
    names = ("scene", "animate", "align", "lift", "render")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


# ---------------------------------------------------------------------------
# file helpers

@contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".pano4d.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise InputError(f"output directory {out} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_manifest(path: Path, cfg: Config, command: str, **extra) -> None:
    doc = {"command": command, "config_hash": cfg.hash, "seed": cfg["seed"], **extra}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _frame_files(d: Path) -> list[Path]:
    if not d.is_dir():
        raise InputError(f"missing directory: {d}")
    t = sorted(d.glob("frame_*.p4dt"))
    files = t if t else sorted(d.glob("frame_*.png"))
    if not files:
        raise InputError(f"no frames in {d}")
    return files


def read_frames(d: Path) -> np.ndarray:
    out = []
    for f in _frame_files(d):
        try:
            a = read_tensor(f).astype(np.float64) if f.suffix == ".p4dt" else read_png(f)
        except (TensorFormatError, OSError) as e:
            raise InputError(f"{f}: {e}") from None
        out.append(a)
    shapes = {a.shape for a in out}
    if len(shapes) != 1:
        raise InputError(f"frames in {d} differ in size: {sorted(shapes)}")
    return np.stack(out)


def write_frames(d: Path, frames) -> list[str]:
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for k, f in enumerate(frames):
        a = np.asarray(f, dtype=np.float32)
        write_tensor(d / f"frame_{k:03d}.p4dt", a)
        write_png(d / f"frame_{k:03d}.png", a)
        names.append(f"frame_{k:03d}")
    return names


def read_mask(path: Path) -> np.ndarray:
    if not path.is_file():
        raise InputError(f"missing mask: {path}")
    return (read_png(path)[..., 0] > 0.5).astype(np.float64)


def scene_from(cfg: Config) -> SyntheticScene:
    return SyntheticScene(room_radius=cfg["scene.room_radius"], texture_freq=cfg["scene.texture_freq"],
                          blob_radius=cfg["scene.blob_radius"], blob_velocity=cfg["scene.blob_velocity"],
                          n_frames=cfg["scene.frames"], seed=module_seeds(cfg["seed"])["scene"] % (2 ** 31))


def fan(cfg: Config, res: int | None = None) -> list:
    return camera_fan(cfg["fan.fov"], cfg["fan.res"] if res is None else res)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(cfg: Config, inp: Path, out: Path) -> dict:
    sc = scene_from(cfg)
    H = cfg["scene.height"]
    video, depth = sc.video(H, 2 * H, supersample=cfg["scene.supersample"])
    mask = sc.mask(H, 2 * H, cfg["scene.mask_margin"])
    write_png(out / "pano.png", video[0].data)
    write_tensor(out / "pano.p4dt", video[0].data.astype(np.float32))
    write_png(out / "mask.png", mask)
    frames = write_frames(out / "frames", [f.data for f in video.frames])
    (out / "depth").mkdir(exist_ok=True)
    for k, d in enumerate(depth):
        write_tensor(out / "depth" / f"depth_{k:03d}.p4dt", d.astype(np.float32))
        write_png16(out / "depth" / f"depth_{k:03d}.png", d, scale=float(depth.max()))
    write_manifest(out / "manifest.json", cfg, "synth", frames=frames, height=H, width=2 * H,
                   depth_kind="ray distance")
    return {"frames": len(frames)}


def _load_pano(inp: Path) -> np.ndarray:
    if (inp / "pano.p4dt").is_file():
        return read_tensor(inp / "pano.p4dt").astype(np.float64)
    if (inp / "pano.png").is_file():
        return read_png(inp / "pano.png")
    raise InputError(f"missing panorama: {inp / 'pano.png'}")


def _codec(cfg: Config):
    if cfg["animate.codec"] != "identity":
        raise InputError(f"unknown codec {cfg['animate.codec']!r} (available: identity)")
    return animator.IdentityCodec(cfg["animate.downsample"], 3)


def _denoiser(cfg: Config, pano, mask, inp: Path, codec, frames: int):
    kind = cfg["animate.denoiser"]
    if kind == "identity":
        return animator.IdentityDenoiser(codec, frames)
    if kind == "flow":
        eta = cfg["animate.stochasticity"]
        if cfg["animate.target"] == "truth":
            target = read_frames(inp / "frames")
            if len(target) < frames:
                raise InputError(f"{inp / 'frames'} holds {len(target)} frames, {frames} needed")
            video = PanoVideo([EquirectImage(f) for f in target[:frames]])
            return animator.FlowFieldDenoiser(video, codec, eta)
        if cfg["animate.target"] == "rotation":
            return animator.FlowFieldDenoiser.from_flow(pano, mask, frames, codec, stochasticity=eta)
        raise InputError(f"unknown animate.target {cfg['animate.target']!r}")
    if kind == "external":
        return animator.ExternalProcessDenoiser(cfg["animate.external_dir"] or None, frames, codec.channels,
                                                timeout=cfg["animate.timeout"])
    raise InputError(f"unknown denoiser {kind!r} (available: flow, identity, external)")


def cmd_animate(cfg: Config, inp: Path, out: Path) -> dict:
    pano = _load_pano(inp)
    mask = read_mask(inp / "mask.png")
    if mask.shape != pano.shape[:2]:
        raise InputError("mask and panorama dimensions differ")
    frames = cfg["scene.frames"]
    codec = _codec(cfg)
    den = _denoiser(cfg, pano, mask, inp, codec, frames)
    cams = camera_fan(cfg["fan.fov"], cfg["animate.view_res"])
    pf = cfg["animate.per_face"]
    sampling = icosphere_samples(pf) if pf > 0 else None
    pd = animator.PanoramicDenoiser(EquirectImage(pano), mask, den, codec, cams, frames=frames,
                                    sampling=sampling, schedule=animator.DenoiseSchedule(cfg["animate.steps"]),
                                    workers=cfg["animate.workers"])
    res = pd.run(module_seeds(cfg["seed"])["animate"])
    names = write_frames(out / "frames", [f.data for f in res.video.frames])
    if cfg["animate.save_views"]:
        vdir = out / "views"
        vdir.mkdir(exist_ok=True)
        for k, v in enumerate(animator.decode_views(res.view_latents, codec, frames)):
            write_tensor(vdir / f"view_{k:02d}.p4dt", np.asarray(v, dtype=np.float32))
    write_manifest(out / "frames" / "manifest.json", cfg, "animate", frames=names,
                   denoiser=cfg["animate.denoiser"])
    return {"frames": len(names)}


def _video_from(inp: Path) -> PanoVideo:
    data = read_frames(inp / "frames")
    try:
        return PanoVideo([EquirectImage(f) for f in data])
    except ValueError as e:
        raise InputError(str(e)) from None


def cmd_align(cfg: Config, inp: Path, out: Path) -> dict:
    video = _video_from(inp)
    cams = fan(cfg)
    kind = cfg["align.depth"]
    if kind == "synthetic":
        model = align_mod.SyntheticDepth(scene_from(cfg), (cfg["align.scale_min"], cfg["align.scale_max"]),
                                         cfg["align.shift_amplitude"], seed=module_seeds(cfg["seed"])["align"])
    elif kind == "external":
        model = align_mod.ExternalDepth(cfg["align.external_dir"] or None, timeout=cfg["align.timeout"])
    else:
        raise InputError(f"unknown depth model {kind!r} (available: synthetic, external)")
    res = align_mod.align(video, cams, model, cfg.align_config())
    d = out / "depth"
    d.mkdir(parents=True, exist_ok=True)
    peak = max(float(x.data.max()) for x in res.depths)
    for k, img in enumerate(res.depths):
        write_tensor(d / f"depth_{k:03d}.p4dt", img.data[..., 0].astype(np.float32))
        write_png16(d / f"depth_{k:03d}.png", img.data[..., 0], scale=peak)
    write_manifest(d / "manifest.json", cfg, "align", frames=len(res.depths),
                   loss_first=float(res.full_history[0]), loss_last=float(res.full_history[-1]),
                   depth_kind="ray distance")
    return {"frames": len(res.depths)}


def read_depths(d: Path) -> list:
    files = sorted(d.glob("depth_*.p4dt")) if d.is_dir() else []
    if not files:
        raise InputError(f"no depth tensors in {d}")
    try:
        return [read_tensor(f).astype(np.float64) for f in files]
    except TensorFormatError as e:
        raise InputError(str(e)) from None


def cmd_lift(cfg: Config, inp: Path, out: Path) -> dict:
    video = _video_from(inp)
    depths = read_depths(inp / "depth")
    if len(depths) != len(video):
        raise InputError(f"{len(video)} frames but {len(depths)} depth maps")
    if cfg["lift.extractor"] != "pyramid":
        raise InputError(f"unknown extractor {cfg['lift.extractor']!r} (available: pyramid)")
    res = lift_mod.lift(video, depths, fan(cfg), cfg.lift_config(), lift_mod.PyramidFeatures(),
                        seed=module_seeds(cfg["seed"])["lift"])
    g = out / "gaussians"
    g.mkdir(parents=True, exist_ok=True)
    names = []
    for t, s in enumerate(res.sets):
        write_ply(g / f"gaussians_{t:03d}.ply", s)
        names.append(f"gaussians_{t:03d}.ply")
    write_manifest(g / "manifest.json", cfg, "lift", frame_count=len(names), files=names,
                   gaussians=len(res.sets[0]), psnr=[round(p, 6) for p in res.psnr])
    return {"frames": len(names), "psnr": res.psnr}


def render_cameras(cfg: Config) -> list[tuple[str, Camera, np.ndarray]]:
    """``(name, camera, position)`` for every configured render view."""
    res = cfg["render.res"]
    alpha = cfg["render.alpha"]
    if cfg["render.direction"]:
        d = np.asarray(cfg["render.direction"], float)
        if d.shape != (3,) or not np.any(d):
            raise InputError("render.direction needs three components, not all zero")
        s = plane_size_for_fov(cfg["fan.fov"])
        try:
            # looking straight up or down: take world y as the up direction
            hint = np.array([0.0, 1.0, 0.0]) if abs(d[2]) > 0.999 * np.linalg.norm(d) else None
            cams = [Camera(d, 0.6, (s, s), res, res, up_hint=hint)]
        except ValueError as e:
            raise InputError(str(e)) from None
    else:
        all_cams = camera_fan(cfg["fan.fov"], res)
        k = cfg["render.view"]
        if k >= len(all_cams) or k < -1:
            raise InputError(f"render.view must be -1 or a fan index below {len(all_cams)}")
        cams = all_cams if k == -1 else [all_cams[k]]
    rng = np.random.default_rng(module_seeds(cfg["seed"])["render"])
    out = []
    for i, cam in enumerate(cams):
        if cfg["render.random_offset"]:
            pos = rng.uniform(-alpha, alpha, 3)
        else:
            pos = np.asarray(cfg["render.offset"], float)
            if pos.shape != (3,):
                raise InputError("render.offset needs three components")
            if np.any(np.abs(pos) > alpha):
                raise InputError(f"render.offset must lie within [-{alpha}, {alpha}]^3")
        out.append((f"v{i:02d}", cam, pos))
    return out


def cmd_render(cfg: Config, inp: Path, out: Path) -> dict:
    gdir = inp / "gaussians"
    files = sorted(gdir.glob("gaussians_*.ply")) if gdir.is_dir() else []
    if not files:
        raise InputError(f"no Gaussian sets in {gdir}")
    try:
        sets = [read_ply(f) for f in files]
    except ValueError as e:
        raise InputError(str(e)) from None
    views = render_cameras(cfg)
    rdir = out / "renders"
    rdir.mkdir(parents=True, exist_ok=True)
    sc = scene_from(cfg) if cfg["render.truth"] else None
    names = []
    for t, g in enumerate(sets):
        for name, cam, pos in views:
            r = rasterize(g, pos, cam, RenderSettings())
            stem = f"frame_{t:03d}_{name}"
            rgb = np.clip(r.rgb, 0.0, 1.0).astype(np.float32)
            write_tensor(rdir / f"{stem}.p4dt", rgb)
            write_png(rdir / f"{stem}.png", rgb)
            write_tensor(rdir / f"depth_{t:03d}_{name}.p4dt", r.depth.astype(np.float32))
            if sc is not None:
                tdir = out / "truth"
                tdir.mkdir(exist_ok=True)
                truth = sc.perspective(cam, t, position=pos, supersample=cfg["scene.supersample"])[0]
                write_tensor(tdir / f"{stem}.p4dt", truth.astype(np.float32))
                write_png(tdir / f"{stem}.png", truth)
            names.append(stem)
    write_manifest(rdir / "manifest.json", cfg, "render", files=names,
                   views=[{"name": n, "axis": c.axis.tolist(), "position": p.tolist()} for n, c, p in views])
    return {"renders": len(names)}


def cmd_eval(cfg: Config, inp: Path, out: Path, reference: Path | None) -> dict:
    if reference is None:
        raise InputError("eval needs --reference DIR")
    a = read_frames(inp)
    b = read_frames(reference)
    if a.shape != b.shape:
        raise InputError(f"frame sets differ in shape: {a.shape} vs {b.shape}")
    rep = metrics.compare_videos(a, b)
    vdir = inp.parent / "views" if inp.name == "frames" else inp / "views"
    vfiles = sorted(vdir.glob("view_*.p4dt")) if vdir.is_dir() else []
    if vfiles:
        vids = [read_tensor(f).astype(np.float64) for f in vfiles]
        cams = camera_fan(cfg["fan.fov"], vids[0].shape[2])[: len(vids)]
        rep.overlap_rms = metrics.overlap_consistency(vids, cams)
    doc = rep.to_json()
    doc["config_hash"] = cfg.hash
    if rep.overlap_rms:
        doc["overlap_rms_mean"] = float(np.mean(list(rep.overlap_rms.values())))
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if cfg["eval.figure"]:
        save_figure(out / "metrics.png", rep, a, b)
    return {"psnr": rep.psnr}


def save_figure(path: Path, rep, frames, reference) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3))
    ax0.plot(range(len(rep.per_frame_psnr)), rep.per_frame_psnr, marker="o")
    ax0.set_xlabel("frame")
    ax0.set_ylabel("PSNR (dB)")
    diffs = [np.mean(np.abs(np.diff(v, axis=0)), axis=tuple(range(1, v.ndim))) for v in (frames, reference)]
    for lab, d in zip(("input", "reference"), diffs):
        ax1.plot(range(1, len(d) + 1), d, marker=".", label=lab)
    ax1.set_xlabel("frame")
    ax1.set_ylabel("mean |frame difference|")
    ax1.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pano4d", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="key = value configuration file")
        s.add_argument("--seed", type=int, help="run seed (overrides the config)")
        s.add_argument("--out", type=Path, required=True, help="output directory")
        s.add_argument("--input", type=Path, help="input directory (default: --out)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if name == "eval":
            s.add_argument("--reference", type=Path, help="reference frame directory")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


class _ArgError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgError(message)


def _fail(command: str | None, kind: str, message: str, code: int) -> int:
    doc = {"error": kind, "message": message, "exit_code": code, "command": command}
    sys.stderr.write(json.dumps(doc) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    parser.__class__ = _Parser
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            sp.__class__ = _Parser
    try:
        args = parser.parse_args(argv)
    except _ArgError as e:
        return _fail(None, "UsageError", str(e), EXIT_INPUT)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.command
    try:
        cfg = load_config(args.config, args.set, args.seed)
        out = args.out
        inp = args.input or out
        if command != "synth" and not inp.is_dir():
            raise InputError(f"input directory not found: {inp}")
        with output_lock(out):
            if command == "eval":
                cmd_eval(cfg, inp, out, args.reference)
            else:
                globals()[f"cmd_{command}"](cfg, inp, out)
    except (InputError, FileNotFoundError, TensorFormatError) as e:
        return _fail(command, type(e).__name__, str(e), EXIT_INPUT)
    except (align_mod.AlignmentDiverged, lift_mod.LiftDiverged, HandshakeTimeout, animator.CoverageError) as e:
        return _fail(command, type(e).__name__, str(e), EXIT_RUNTIME)
    except Exception as e:  # anything else is a runtime failure, still reported as JSON
        log.debug("unhandled error", exc_info=True)
        return _fail(command, type(e).__name__, str(e), EXIT_RUNTIME)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
