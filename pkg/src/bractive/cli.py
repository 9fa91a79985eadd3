"""Command-line entry point: corpus generation, training, ROI evaluation,
attention-map export, and numeric self-checks.

Exit codes are a stable contract: 0 success, 1 user error (bad flags,
configs, paths), 2 internal invariant violation.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np

from .autodiff import NonFiniteError, Tensor
from .config import ConfigError, load_run_config
from .data import NUM_FOLDS, generate_dataset, load_dataset
from .io import CorruptFileError
from .roi import (
    LocalizeConfig,
    attention_map,
    export_map_pgm,
    export_mask_csv,
    threshold_mask,
    visual_attention_map,
    dice as dice_score,
)
from .selfcheck import run_self_checks
from .soir import retrieve
from .training import (
    CheckpointError,
    TrainState,
    evaluate,
    load_checkpoint,
    sweep_gamma,
    train,
    BractiveModel,
)

EXIT_USER_ERROR = 1
EXIT_INTERNAL_ERROR = 2


class UserError(click.ClickException):
    exit_code = EXIT_USER_ERROR


@click.group()
def cli():
    """Tri-modal alignment: generate data, train, localize brain ROIs."""


def _load_config(config_path, **section_overrides):
    try:
        return load_run_config(config_path, overrides=section_overrides or None)
    except (ConfigError, FileNotFoundError) as exc:
        raise UserError(str(exc))


def _echo_config(cfg, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.echo(out_dir / "config.json")
    click.echo(f"resolved config -> {out_dir / 'config.json'}")


@cli.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="Override the data seed.")
def cmd_gen_data(config_path, out_dir, seed):
    """Write a synthetic tri-modal corpus with planted ground truth."""
    cfg = _load_config(config_path, data={"seed": seed})
    out = Path(out_dir)
    _echo_config(cfg, out)
    manifest = generate_dataset(cfg.data, out)
    counts = [len(f) for f in manifest.folds]
    click.echo(f"wrote {cfg.data.num_samples} samples, "
               f"{cfg.data.num_classes} classes, folds {counts} -> {out}")


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--fold", type=int, default=0)
@click.option("--resume", "resume_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the training seed.")
@click.option("--epochs", type=int, default=None)
@click.option("--deterministic/--no-deterministic", default=True)
@click.option("--threads", type=int, default=None,
              help="Worker hint; serial reductions are always used in deterministic mode.")
def cmd_train(config_path, data_dir, out_dir, fold, resume_path, seed, epochs,
              deterministic, threads):
    """Train on the corpus, leaving the chosen fold out for validation."""
    if not 0 <= fold < NUM_FOLDS:
        raise UserError(f"fold must be 0..{NUM_FOLDS - 1}, got {fold}")
    cfg = _load_config(config_path,
                       train={"seed": seed, "epochs": epochs,
                              "deterministic": deterministic})
    out = Path(out_dir)
    _echo_config(cfg, out)
    dataset = load_dataset(data_dir)
    if resume_path:
        state, _ = load_checkpoint(resume_path, train_cfg=cfg.train,
                                   expected=cfg.model)
    else:
        state = BractiveModel(cfg.model)
    def log(event):
        click.echo(json.dumps(event, sort_keys=True))
    state, events = train(state, dataset, fold, cfg.train, cfg.loss,
                          out_dir=out, gammas=(cfg.localize.gamma,), log=log)
    click.echo(f"done: {state.step} steps, final checkpoint in {out / 'checkpoints'}")


@cli.command("eval-roi")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--fold", type=int, default=0)
@click.option("--gamma", type=float, default=None, help="Single threshold to score.")
@click.option("--sweep", is_flag=True, help="Sweep thresholds 0.1..0.9 on the training fold.")
@click.option("--oracle", is_flag=True,
              help="Score ground-truth-derived masks instead (pipeline sanity: dice 1).")
@click.option("--out", "report_path", type=click.Path(dir_okay=False), default=None)
def cmd_eval_roi(ckpt_path, data_dir, fold, gamma, sweep, oracle, report_path):
    """Per-threshold mean ROI dice over the validation fold; writes a CSV report."""
    if not 0 <= fold < NUM_FOLDS:
        raise UserError(f"fold must be 0..{NUM_FOLDS - 1}, got {fold}")
    dataset = load_dataset(data_dir)
    from .data import kfold_split
    train_ids, val_ids = kfold_split(dataset.manifest, fold)
    rows = []
    if oracle:
        for sid in val_ids:
            sample = dataset.load_sample(sid)
            for cid, gt in sample.gt_masks.items():
                rows.append({"gamma": "oracle", "sample": sid, "class": cid,
                             "dice": dice_score(gt, gt)})
        mean = float(np.mean([r["dice"] for r in rows]))
        click.echo(f"oracle mean dice: {mean:.4f}")
    else:
        state, saved_cfg = load_checkpoint(ckpt_path)
        from .training import TrainConfig
        tcfg = saved_cfg or TrainConfig()
        from .losses import LossConfig
        lcfg = LossConfig()
        if sweep:
            sweep_gammas = [round(0.1 * i, 1) for i in range(1, 10)]
            train_dice = sweep_gamma(state.model, dataset, train_ids, tcfg, lcfg,
                                     gammas=sweep_gammas)
            best = max(train_dice, key=train_dice.get)
            for g in sweep_gammas:
                rows.append({"gamma": g, "split": "train", "mean_dice": train_dice[g]})
            val = evaluate(state.model, dataset, val_ids, tcfg, lcfg, gammas=(best,))
            rows.append({"gamma": best, "split": "val", "mean_dice": val["dice"][best]})
            click.echo(f"best gamma on train: {best}; "
                       f"val mean dice at best gamma: {val['dice'][best]:.4f}")
        else:
            g = 0.5 if gamma is None else gamma
            report = evaluate(state.model, dataset, val_ids, tcfg, lcfg, gammas=(g,))
            rows.append({"gamma": g, "split": "val", "mean_dice": report["dice"][g]})
            click.echo(f"mean dice at gamma={g}: {report['dice'][g]:.4f} "
                       f"(soip recall {report['soip_recall']:.4f})")
    if report_path:
        path = Path(report_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=sorted({k for r in rows for k in r}))
            writer.writeheader()
            writer.writerows(rows)
        click.echo(f"report -> {path}")


@cli.command("localize")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--sample", "sample_id", required=True, type=int)
@click.option("--cls", "class_id", required=True, type=int)
@click.option("--query", "query_kind", type=click.Choice(["text", "visual"]), default="text")
@click.option("--gamma", type=float, default=0.5)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def cmd_localize(ckpt_path, data_dir, sample_id, class_id, query_kind, gamma, out_dir):
    """Export the attention map (PGM) and thresholded ROI mask (CSV) for one
    sample and subject class; visual queries also export image-space saliency."""
    dataset = load_dataset(data_dir)
    if not 0 <= sample_id < len(dataset):
        raise UserError(f"sample {sample_id} out of range (corpus has {len(dataset)})")
    token_ids = dataset.manifest.subject_token_ids
    if class_id not in token_ids:
        raise UserError(f"class {class_id} not in the corpus class table")
    state, _ = load_checkpoint(ckpt_path)
    model = state.model
    sample = dataset.load_sample(sample_id)
    caption = sample.caption.copy()
    if class_id not in sample.present_classes:
        click.echo(f"warning: class {class_id} is absent from sample {sample_id}; "
                   f"substituting its token for an exploratory map", err=True)
        caption[0] = token_ids[class_id]
    positions = np.flatnonzero(caption == token_ids[class_id])
    pos = int(positions[0])

    from .training import _materialize  # single-sample forward without training
    vis = model.visual.encode_image(sample.image)
    grid = dataset.flatten_map.flatten(sample.fmri)
    fm = model.fmri.encode_grid(grid)
    tx = model.text.encode_tokens(caption, sample.valid_mask)

    t_sk = Tensor(tx.tokens.data[0, pos])
    if query_kind == "visual":
        query = retrieve(t_sk, Tensor(vis.tokens.data[0])).feature
    else:
        query = t_sk

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lcfg = LocalizeConfig(gamma=gamma)
    att = attention_map(query, fm.tokens.data[0], dataset.flatten_map, lcfg,
                        patch=model.cfg.fmri_patch,
                        provenance=f"{query_kind}:class{class_id}")
    grid_map = dataset.flatten_map.flatten(att.values)
    export_map_pgm(grid_map, out / f"sample{sample_id}_class{class_id}_{query_kind}.pgm")
    export_mask_csv(threshold_mask(att, gamma),
                    out / f"sample{sample_id}_class{class_id}_{query_kind}_mask.csv")
    if query_kind == "visual":
        sal = visual_attention_map(t_sk, vis.tokens.data[0],
                                   (model.cfg.image_size, model.cfg.image_size),
                                   model.cfg.patch, lcfg)
        export_map_pgm(sal.values,
                       out / f"sample{sample_id}_class{class_id}_saliency.pgm")
    click.echo(f"maps -> {out}")


@cli.command("self-check")
@click.option("--seed", type=int, default=0)
def cmd_self_check(seed):
    """Gradient checks, loss-oracle comparisons and format round trips."""
    ok = run_self_checks(seed=seed, report=click.echo)
    if not ok:
        sys.exit(EXIT_INTERNAL_ERROR)
    click.echo("all self-checks passed")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code if isinstance(exc, UserError) else EXIT_USER_ERROR
    except click.Abort:
        return EXIT_USER_ERROR
    except (ConfigError, CheckpointError, CorruptFileError, FileNotFoundError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USER_ERROR
    except (NonFiniteError, AssertionError) as exc:
        click.echo(f"internal error: {exc}", err=True)
        return EXIT_INTERNAL_ERROR
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
