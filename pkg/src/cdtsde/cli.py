"""Command-line entry point.

Every subcommand reads a ``key=value`` run configuration, writes a resolved
copy of it next to its outputs, and writes files atomically.  Exit codes:
0 success, 1 verification failure, 2 configuration error, 3 unreadable or
missing file, 4 malformed file.
"""

from __future__ import annotations

import argparse
import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import torch

from cdtsde.energy import homogeneous_instance, reference_instance, verify_strict_domination
from cdtsde.errors import ConfigError, FormatError, ParameterError, ScheduleError
from cdtsde.forward import DomainPair
from cdtsde.io import RunConfig, atomic_open, load_config, read_params, read_tensor, write_params, write_pgm, write_tensor
from cdtsde.mixfield import ChannelPoly, ModNet, build_mixfield_linear
from cdtsde.predictors import (
    ToyNet,
    TrainConfig,
    build_field,
    toy_predictor_init,
    train_score_matching,
    trained_predictor,
    write_loss_csv,
)
from cdtsde.sampler import SamplerConfig, sample
from cdtsde.schedules import make_vp_schedule
from cdtsde.tasks import SyntheticTaskSpec, evaluate, gen_dataset

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_UNREADABLE, EXIT_FORMAT = 0, 1, 2, 3, 4


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir)


def _echo_config(cfg: RunConfig, command: str) -> None:
    with atomic_open(_out(cfg) / f"{command}.resolved.cfg", "w") as fh:
        fh.write(cfg.to_text())


def _write_csv(path: Path, header, rows) -> None:
    with atomic_open(path, "w") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _schedule(cfg: RunConfig):
    return make_vp_schedule(cfg.T, cfg.beta_min, cfg.beta_max)


# --- dataset ----------------------------------------------------------------------


def cmd_dataset(cfg: RunConfig, args) -> int:
    spec = SyntheticTaskSpec(cfg.task, cfg.n_pairs, cfg.image_size, cfg.image_size, 1, cfg.seed)
    root = _out(cfg) / "dataset"
    rows = []
    for i, pair in enumerate(gen_dataset(spec)):
        src, tgt = f"src_{i:04d}.cdt", f"tgt_{i:04d}.cdt"
        write_tensor(root / src, pair.x_src)
        write_tensor(root / tgt, pair.x_tgt)
        mask = ""
        if pair.mask is not None:
            mask = f"mask_{i:04d}.cdt"
            write_tensor(root / mask, pair.mask.astype(np.float32))
        rows.append([i, src, tgt, mask, cfg.seed])
    _write_csv(root / "manifest.csv", ["index", "src_path", "tgt_path", "mask_path", "seed"], rows)
    return EXIT_OK


def _read_manifest(root: Path) -> list[dict]:
    path = root / "manifest.csv"
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FormatError(f"{path}: empty manifest")
    return rows


def load_pairs(root) -> list[DomainPair]:
    root = Path(root)
    pairs = []
    for r in _read_manifest(root):
        try:
            src, tgt = read_tensor(root / r["src_path"]), read_tensor(root / r["tgt_path"])
        except KeyError as exc:
            raise FormatError(f"manifest lacks column {exc}") from None
        mask = read_tensor(root / r["mask_path"]) > 0.5 if r.get("mask_path") else None
        pairs.append(DomainPair(src.astype(np.float64), tgt.astype(np.float64), mask))
    return pairs


# --- train ----------------------------------------------------------------------------


def _make_mixer(variant: str, sched, shape, seed: int):
    C, H, W = shape
    if variant == "dynamic":
        return ModNet(C, seed=seed)
    if variant == "channel_poly":
        return ChannelPoly(C)
    return build_mixfield_linear(sched, C, H, W)


def cmd_train(cfg: RunConfig, args) -> int:
    torch.use_deterministic_algorithms(True)
    pairs = load_pairs(_out(cfg) / "dataset")
    sched = _schedule(cfg)
    shape = pairs[0].x_src.shape
    net = toy_predictor_init(cfg.seed, shape[0], T=cfg.T)
    mixer = _make_mixer(cfg.variant, sched, shape, cfg.seed)
    tc = TrainConfig(steps=cfg.train_steps, lr=cfg.lr, mixer_lr_mult=cfg.mixer_lr_mult, batch=cfg.batch, seed=cfg.seed)
    res = train_score_matching(pairs, net, mixer, sched, tc)
    tensors = {f"predictor.{k}": v.numpy() for k, v in net.state_dict().items()}
    if isinstance(mixer, torch.nn.Module):
        tensors.update({f"mixer.{k}": v.detach().numpy() for k, v in mixer.state_dict().items()})
    meta = {"variant": cfg.variant, "shape": list(shape), "width": net.width, "T": cfg.T,
            "degree": mixer.degree if isinstance(mixer, ChannelPoly) else None}
    write_params(_out(cfg) / "params.cdtp", tensors, meta)
    write_loss_csv(res.losses, _out(cfg) / "loss.csv")
    return EXIT_OK


def load_model(path, sched, variant: str):
    """Rebuild the predictor network and the mixing field for ``variant`` from a parameter file.

    When the file holds a mixer of a different variant, the requested
    variant is built from its default initial parameters.
    """
    meta, tensors = read_params(path)
    try:
        shape = tuple(meta["shape"])
        net = ToyNet(shape[0], width=meta["width"], T=meta["T"])
        net.load_state_dict({k[len("predictor."):]: torch.from_numpy(v) for k, v in tensors.items()
                             if k.startswith("predictor.")})
        mixer = _make_mixer(variant, sched, shape, 0)
        if variant == meta["variant"] and isinstance(mixer, torch.nn.Module):
            if variant == "channel_poly":
                mixer = ChannelPoly(shape[0], meta["degree"])
            mixer.load_state_dict({k[len("mixer."):]: torch.from_numpy(v) for k, v in tensors.items()
                                   if k.startswith("mixer.")})
    except (KeyError, RuntimeError) as exc:
        raise FormatError(f"{path}: parameter set does not match the model: {exc}") from None
    return net, build_field(mixer, sched, shape)


# --- sample -------------------------------------------------------------------------------


def cmd_sample(cfg: RunConfig, args) -> int:
    sched = _schedule(cfg)
    src_dir = Path(args.input) if args.input else _out(cfg) / "dataset"
    pairs = load_pairs(src_dir)
    net, field = load_model(Path(args.params) if args.params else _out(cfg) / "params.cdtp", sched, cfg.variant)
    pred = trained_predictor(net, field, sched)
    gen_dir = _out(cfg) / "generated"
    traj_dir = _out(cfg) / "trajectories"

    def dump(i, t, x):
        if args.dump_every and i % args.dump_every == 0:
            for j, xj in enumerate(x):
                write_tensor(traj_dir / f"pair_{j:04d}_step_{i:04d}_t{t}.cdt", xj)

    src = np.stack([p.x_src for p in pairs])
    out = sample(pred, src, SamplerConfig(N=cfg.sampler_steps, t1=cfg.t1), field, sched,
                 np.random.default_rng(cfg.seed), callback=dump)
    rows = []
    for i, x in enumerate(out):
        name = f"gen_{i:04d}.cdt"
        write_tensor(gen_dir / name, x)
        for c, plane in enumerate(x):
            write_pgm(_out(cfg) / "previews" / f"gen_{i:04d}_c{c}.pgm", plane)
        rows.append([i, name])
    _write_csv(gen_dir / "manifest.csv", ["index", "gen_path"], rows)
    return EXIT_OK


# --- evaluate ----------------------------------------------------------------------------------


def _load_images(root: Path, column: str):
    rows = _read_manifest(root)
    if column not in rows[0]:
        column = "tgt_path" if "tgt_path" in rows[0] else "gen_path"
    imgs = [read_tensor(root / r[column]).astype(np.float64) for r in rows]
    masks = None
    if rows[0].get("mask_path"):
        masks = [read_tensor(root / r["mask_path"]) > 0.5 for r in rows]
    return imgs, masks


def cmd_evaluate(cfg: RunConfig, args) -> int:
    gen_dir = Path(args.generated) if args.generated else _out(cfg) / "generated"
    ref_dir = Path(args.references) if args.references else _out(cfg) / "dataset"
    gen, _ = _load_images(gen_dir, "gen_path")
    ref, masks = _load_images(ref_dir, "tgt_path")
    rep = evaluate(gen, ref, masks)
    rep.to_csv(_out(cfg) / "metrics.csv")
    return EXIT_OK


# --- energy --------------------------------------------------------------------------------------


def cmd_energy(cfg: RunConfig, args) -> int:
    rows = []
    for name, build in (("reference", reference_instance), ("homogeneous", homogeneous_instance)):
        spec, pair = build()
        rep = verify_strict_domination(spec, pair)
        cert = rep.descent_certificate
        rows.append([name, repr(rep.E_glob), repr(rep.E_pix), repr(rep.gap),
                     cert.get("negative", ""), repr(cert["ratio"]) if cert else "", rep.note])
        write_tensor(_out(cfg) / "energy" / f"{name}_global.cdt", rep.global_path.values)
        write_tensor(_out(cfg) / "energy" / f"{name}_pixelwise.cdt", rep.pixel_path.values)
    _write_csv(_out(cfg) / "energy.csv",
               ["instance", "E_glob", "E_pix", "gap", "certificate_negative", "certificate_ratio", "note"], rows)
    return EXIT_OK


# --- verify --------------------------------------------------------------------------------------


def tests_dir() -> Path:
    return Path(__file__).resolve().parents[2] / "tests"


def cmd_verify(cfg: RunConfig, args) -> int:
    tests = tests_dir()
    if not tests.is_dir():
        raise FileNotFoundError(f"test suite not found at {tests}")
    cmd = [sys.executable, "-m", "pytest", "-q", str(tests)]
    if not args.all:
        cmd += ["-m", "not experiment"]
    if args.select:
        cmd += ["-k", args.select]
    log = _out(cfg) / "verify.log"
    proc = subprocess.run(cmd, capture_output=True, text=True)
    with atomic_open(log, "w") as fh:
        fh.write(proc.stdout + proc.stderr)
    return EXIT_OK if proc.returncode == 0 else EXIT_VERIFY


COMMANDS = {"dataset": cmd_dataset, "train": cmd_train, "sample": cmd_sample, "evaluate": cmd_evaluate,
            "energy": cmd_energy, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cdtsde", description="Spatially varying domain-mixture diffusion toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="key=value run configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        if name == "sample":
            sp.add_argument("--params", help="parameter file (default: <out_dir>/params.cdtp)")
            sp.add_argument("--input", help="dataset directory (default: <out_dir>/dataset)")
            sp.add_argument("--dump-every", type=int, default=0, help="dump the state every k steps")
        if name == "evaluate":
            sp.add_argument("--generated", help="directory with generated images")
            sp.add_argument("--references", help="directory with reference images")
        if name == "verify":
            sp.add_argument("--select", help="pytest -k expression")
            sp.add_argument("--all", action="store_true",
                            help="include the model-training acceptance experiments (slow)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        _out(cfg).mkdir(parents=True, exist_ok=True)
        _echo_config(cfg, args.command)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ParameterError, ScheduleError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"cannot read or write file: {exc}", file=sys.stderr)
        return EXIT_UNREADABLE


if __name__ == "__main__":
    sys.exit(main())
