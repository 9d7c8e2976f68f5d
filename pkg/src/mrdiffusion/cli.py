"""Command-line entry point: ``mrdiffusion {phantom,train,infer,eval,ablate}``.

Every command takes ``--config FILE`` plus any number of
``--section.key=value`` overrides. Exit codes: 0 success, 2 config error,
3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import datagen
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, MRDiffusionError
from .formats import atomic_write_text, load_manifest, load_pairs, write_slice
from .metrics import MetricReport, format_table, score
from .sampler import ensemble_rounds, sample_one
from .schedule import build_schedule
from .trainer import CKPT_NAME, fit, load_checkpoint

log = logging.getLogger("mrdiffusion")

CONFIG_ECHO = "config.yaml"
INFER_CHUNK = 64


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise DataError(f"output directory {path} is not empty (use --force to overwrite)")
        datagen.clear_dir(path)
    path.mkdir(parents=True, exist_ok=True)


def _echo(cfg: RunConfig, out_dir: Path) -> None:
    atomic_write_text(out_dir / CONFIG_ECHO, cfg.to_yaml())


def cmd_phantom(cfg: RunConfig, force: bool = False) -> dict:
    d = cfg.data
    root = Path(cfg.paths.data_dir)
    _prepare_dir(root, force)
    phantom = datagen.PhantomParams(n_ellipses=d.n_ellipses)
    kwargs = dict(
        acs_lines=d.acs_lines,
        pad_to=tuple(d.pad_to) if d.pad_to else None,
        resize_to=tuple(d.resize_to) if d.resize_to else None,
        with_phase=d.with_phase,
    )
    out = {}
    for split, n, seed in (
        ("train", d.n_train, d.seed),
        ("valid", d.n_valid, d.seed + d.valid_seed_offset),
    ):
        out[split] = datagen.build_dataset(
            n, d.accel, d.coil_mode, d.height, d.width, seed, root / split, split, phantom, **kwargs
        )
        log.info("%s: %d pairs -> %s", split, n, root / split)
    _echo(cfg, root)
    return out


def cmd_train(cfg: RunConfig, force: bool = False):
    run_dir = Path(cfg.paths.run_dir)
    manifest = load_manifest(Path(cfg.paths.data_dir) / "train")
    _prepare_dir(run_dir, force)
    _echo(cfg, run_dir)
    ckpt = fit(manifest, cfg.train_config(), cfg.denoiser_config(), run_dir)
    losses = ckpt.epoch_losses()
    if losses:
        log.info("epoch loss %.5f -> %.5f", losses[0], losses[-1])
    return ckpt


def _load_model(cfg: RunConfig):
    path = Path(cfg.paths.run_dir) / CKPT_NAME
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    return load_checkpoint(path, expected_denoiser=cfg.denoiser_config()).model()


def reconstruct(model, under: np.ndarray, T: int, R: int, seed: int, literal: bool = False) -> np.ndarray:
    """Clamped R-round ensembles for a stack of under-sampled slices, in fixed-size chunks."""
    sched = build_schedule(T)
    out = []
    for start in range(0, len(under), INFER_CHUNK):
        cond = torch.from_numpy(np.ascontiguousarray(under[start : start + INFER_CHUNK]))
        rounds = ensemble_rounds(model, cond, sched, R, seed + start, literal)
        out.append(rounds.mean(0).clamp(0.0, 1.0).numpy())
    return np.concatenate(out) if out else np.zeros_like(under)


def cmd_infer(cfg: RunConfig, force: bool = False) -> Path:
    s = cfg.sample_config()
    model = _load_model(cfg)
    manifest = load_manifest(Path(cfg.paths.data_dir) / "valid")
    under, _ = load_pairs(manifest)
    recon_dir = Path(cfg.paths.recon_dir)
    _prepare_dir(recon_dir, force)
    _echo(cfg, recon_dir)
    recon = reconstruct(model, under, s.T, s.R, s.seed, s.literal_coefficient)
    for entry, img in zip(manifest, recon):
        write_slice(recon_dir / f"{entry.id}.cmrs", img.astype(np.float32))
    if s.record_trajectory and len(manifest):
        _dump_trajectories(model, under, s, recon_dir / "trajectory", manifest.ids)
    log.info("wrote %d reconstructions to %s", len(manifest), recon_dir)
    return recon_dir


def _dump_trajectories(model, under, s, out_dir: Path, ids) -> None:
    traj: list = []
    sample_one(model, torch.from_numpy(under), build_schedule(s.T), s.seed + 1, clamp=False,
               literal_coefficient=s.literal_coefficient, trajectory=traj)
    for step, states in traj:
        for pid, x in zip(ids, states.numpy()):
            write_slice(out_dir / pid / f"x_{step:05d}.cmrs", x.astype(np.float32))


def cmd_eval(cfg: RunConfig, force: bool = False) -> MetricReport:
    from .metrics import evaluate

    manifest = load_manifest(Path(cfg.paths.data_dir) / "valid")
    eval_dir = Path(cfg.paths.eval_dir)
    eval_dir.mkdir(parents=True, exist_ok=True)
    report = evaluate(manifest, cfg.paths.recon_dir, eval_dir)
    _echo(cfg, eval_dir)
    print(report.to_text(), end="")
    return report


def _rows_csv(key: str, rows) -> str:
    lines = [f"{key},psnr,ssim,nmse\n"]
    for k, s in rows:
        lines.append(f"{k},{s['psnr'][0]!r},{s['ssim'][0]!r},{s['nmse'][0]!r}\n")
    return "".join(lines)


def cmd_ablate(cfg: RunConfig, force: bool = False) -> dict:
    a = cfg.ablate
    if not a.T_grid or not a.R_grid:
        raise ConfigError("ablation grids must be non-empty")
    model = _load_model(cfg)
    manifest = load_manifest(Path(cfg.paths.data_dir) / "valid")
    under, full = load_pairs(manifest)
    if a.n_pairs is not None:
        under, full = under[: a.n_pairs], full[: a.n_pairs]
    ids = manifest.ids[: len(full)]
    raw = MetricReport([score(i, u, f) for i, u, f in zip(ids, under, full)]).summary()

    def run(T, R):
        recon = reconstruct(model, under, T, R, cfg.sample.seed, cfg.sample.literal_coefficient)
        return MetricReport([score(i, x, f) for i, x, f in zip(ids, recon, full)]).summary()

    fixed_T = a.fixed_T or cfg.sample.T
    t_rows = [("Raw", raw)] + [(T, run(T, a.fixed_R)) for T in a.T_grid]
    r_rows = [("Raw", raw)] + [(R, run(fixed_T, R)) for R in a.R_grid]
    out_dir = Path(cfg.paths.ablate_dir)
    _prepare_dir(out_dir, force)
    _echo(cfg, out_dir)
    atomic_write_text(out_dir / "ablation_T.csv", _rows_csv("T", t_rows))
    atomic_write_text(out_dir / "ablation_R.csv", _rows_csv("R", r_rows))
    text = (
        f"(a) inference steps T, R={a.fixed_R}\n" + format_table("#Steps T", t_rows)
        + f"\n(b) ensemble rounds R, T={fixed_T}\n" + format_table("#Rounds R", r_rows)
    )
    atomic_write_text(out_dir / "ablation.txt", text)
    print(text, end="")
    return {"T": t_rows, "R": r_rows}


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mrdiffusion",
        description="Conditional diffusion reconstruction of under-sampled MRI (desk scale).",
        epilog="Any --section.key=value argument overrides the config file.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("-c", "--config", help="YAML config file")
    parser.add_argument("--force", action="store_true", help="overwrite non-empty output dirs")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    overrides = [a for a in argv if a.startswith("--") and "." in a.split("=", 1)[0]]
    rest = [a for a in argv if a not in overrides]
    args = build_parser().parse_args(rest)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg, force=args.force)
    except MRDiffusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
