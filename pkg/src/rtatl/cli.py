"""Command-line entry points: ``rtatl <command> [options]``.

Exit codes: 0 success, 1 invalid config / data / checkpoint, 2 missing input file.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ConfigError, config_hash, load_config, save_config
from .data.augment import augment
from .data.batch import collate
from .data.flow import farneback_flow
from .data.manifest import DATA_ROOT_ENV, ManifestDataset, export_samples
from .data.roi import apply_roi_mask, restore_patches
from .data.synth import synth_dataset
from .data.types import DataError
from .folds import make_folds
from .metrics import FoldResult
from .models.net import CheckpointMismatch, RTATLNet, load_checkpoint, save_checkpoint
from .models.transformer import indicator_similarity
from .train import Trainer, TrainingDiverged, evaluate, fit
from . import viz

log = logging.getLogger("rtatl")

EXIT_OK, EXIT_ERROR, EXIT_MISSING = 0, 1, 2
PROVIDERS = {"none": None, "farneback": farneback_flow}


class MissingInput(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: str
    seed: int
    out: str
    config_hash: str
    args: dict = field(default_factory=dict)

    def save(self, out_dir: Path) -> Path:
        path = out_dir / "run.json"
        path.write_text(json.dumps(asdict(self), indent=2, default=str) + "\n")
        return path


def _input_path(raw: str) -> Path:
    """Existing path as given, else under ``$RTATL_DATA_ROOT``."""
    p = Path(raw)
    root = os.environ.get(DATA_ROOT_ENV)
    if not p.exists() and root and not p.is_absolute() and (Path(root) / p).exists():
        p = Path(root) / p
    if not p.exists():
        raise MissingInput(f"{raw}: no such file")
    return p


def _dataset(raw: str, spec, hp, args, with_flow: bool = True) -> ManifestDataset:
    return ManifestDataset.from_file(_input_path(raw), spec, hp,
                                     provider=PROVIDERS[args.flow_provider], with_flow=with_flow)


def _split(subjects: list[str], fold: Optional[int], seed: int) -> tuple[list[str], list[str]]:
    if fold is None:
        return subjects, []
    folds = make_folds(subjects, k=3, seed=seed)
    if not 0 <= fold < len(folds):
        raise ConfigError("fold", f"must be 0..{len(folds) - 1}")
    return folds[fold]


def _model(spec, hp, checkpoint: Optional[str]) -> tuple[RTATLNet, dict]:
    if checkpoint is None:
        log.warning("no checkpoint given: using untrained weights, outputs are noise")
        return RTATLNet(spec, hp).eval(), {}
    model, blob = load_checkpoint(_input_path(checkpoint), spec, hp)
    if not blob.get("step"):
        log.warning("checkpoint %s is untrained, outputs are noise", checkpoint)
    return model.eval(), blob


def _out_dir(args) -> Path:
    out = Path(args.out or Path("runs") / args.command)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _record(args, spec, hp, out: Path) -> None:
    RunManifest(command=args.command, config=str(args.config), seed=args.seed, out=str(out),
                config_hash=config_hash(spec, hp),
                args={k: v for k, v in vars(args).items() if k != "func"}).save(out)


def _f1_table(result: FoldResult, au_ids) -> str:
    lines = [f"{'AU':<6}{'F1':>8}"]
    lines += [f"{'AU' + str(a):<6}{100 * f:>8.1f}" for a, f in zip(au_ids, result.per_au_f1)]
    lines.append(f"{'Avg':<6}{100 * result.avg_f1:>8.1f}")
    return "\n".join(lines)


def _write_fold_csv(path: Path, result: FoldResult, au_ids) -> None:
    rows = ["fold,au,f1"]
    rows += [f"{result.fold_index},AU{a},{f:.6f}" for a, f in zip(au_ids, result.per_au_f1)]
    rows.append(f"{result.fold_index},avg,{result.avg_f1:.6f}")
    path.write_text("\n".join(rows) + "\n")


def _result_json(result: FoldResult, au_ids) -> dict:
    return {"fold": result.fold_index,
            "per_au_f1": {f"AU{a}": float(f) for a, f in zip(au_ids, result.per_au_f1)},
            "avg_f1": float(result.avg_f1),
            "train_subjects": result.train_subjects, "test_subjects": result.test_subjects}


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    spec, hp = load_config(args.config)
    out = _out_dir(args)
    lab = synth_dataset(args.seed, args.subjects, args.frames, spec, size=hp.aligned_size,
                        flow_step=hp.flow_step)
    unl = synth_dataset(args.seed + 1, args.subjects, args.frames, spec, size=hp.aligned_size,
                        labeled=False)
    for s in unl:
        s.subject_id = "U" + s.subject_id[1:]
    paths = {"labeled": str(export_samples(lab, out / "labeled")),
             "unlabeled": str(export_samples(unl, out / "unlabeled"))}
    _record(args, spec, hp, out)
    print(json.dumps(paths) if args.json else "\n".join(f"{k}: {v}" for k, v in paths.items()))
    return EXIT_OK


def _dry_run(spec, hp, args) -> dict:
    torch.manual_seed(args.seed)
    model = RTATLNet(spec, hp)
    lab = synth_dataset(args.seed, 1, 2, spec, size=hp.aligned_size, flow_step=1)
    unl = synth_dataset(args.seed + 1, 1, 2, spec, size=hp.aligned_size, labeled=False)
    rng = np.random.default_rng(args.seed)
    lab, unl = ([augment(s, rng, hp.input_size, mirror=spec.layout["mirror"]) for s in part]
                for part in (lab, unl))
    report = Trainer(model, seed=args.seed).train_step(lab, unl)
    return {"dry_run": True, "config_hash": config_hash(spec, hp),
            **{k: getattr(report, k) for k in ("l_sup", "l_d", "l_g", "l_f", "total")}}


def cmd_train(args) -> int:
    spec, hp = load_config(args.config)
    for raw in (args.labeled, args.unlabeled):
        if raw:
            _input_path(raw)
    if args.dry_run:
        summary = _dry_run(spec, hp, args)
        print(json.dumps(summary) if args.json else
              "dry run ok: " + " ".join(f"{k}={v:.4g}" for k, v in summary.items() if isinstance(v, float)))
        return EXIT_OK
    if not args.labeled:
        raise MissingInput("--labeled manifest is required for training")

    out = _out_dir(args)
    _record(args, spec, hp, out)
    save_config(out / "config.cfg", spec, hp)
    labeled = _dataset(args.labeled, spec, hp, args)
    # unlabeled sets are still images: no frame pairing, no flow targets
    unlabeled = _dataset(args.unlabeled, spec, hp, args, with_flow=False) if args.unlabeled else None
    train_subj, test_subj = _split(labeled.subjects, args.fold, args.seed)
    # early stopping watches one held-out training subject when there are enough
    rng = np.random.default_rng(args.seed)
    val_subj = [train_subj[int(rng.integers(len(train_subj)))]] if len(train_subj) >= 3 else train_subj
    fit_subj = [s for s in train_subj if s not in val_subj] or train_subj
    train_set, val_set = labeled.subset(fit_subj), labeled.subset(val_subj)
    log.info("train subjects %s, validation %s, test %s", fit_subj, val_subj, test_subj)

    torch.manual_seed(args.seed)
    model = RTATLNet(spec, hp)
    trainer = Trainer(model, seed=args.seed, aux=not args.no_aux)
    ckpt = out / "checkpoint.pt"

    def keep_best(m, step):
        save_checkpoint(ckpt, m, step=step, subjects=fit_subj)

    result = fit(trainer, train_set, unlabeled or (), steps=args.steps, val_samples=val_set,
                 eval_every=args.eval_every, patience=hp.patience,
                 metrics_path=out / "metrics.csv", checkpoint_fn=keep_best)
    model, _ = load_checkpoint(ckpt, spec, hp)
    viz.write_indicator_csv(out / "indicators.csv", model.transformer.indicators.detach().numpy(),
                            spec.au_ids)
    summary = {"steps": len(result.reports), "best_val_f1": result.best_f1,
               "checkpoint": str(ckpt), "out": str(out)}
    if test_subj:
        fold = evaluate(model, labeled.subset(test_subj), args.fold, fit_subj, test_subj)
        _write_fold_csv(out / f"fold{args.fold}_f1.csv", fold, spec.au_ids)
        summary["test"] = _result_json(fold, spec.au_ids)
        if not args.json:
            print(_f1_table(fold, spec.au_ids))
    print(json.dumps(summary) if args.json else f"best validation avg F1 {result.best_f1:.4f}; run in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    spec, hp = load_config(args.config)
    if not args.checkpoint:
        raise MissingInput("--checkpoint is required")
    data = _dataset(args.labeled, spec, hp, args, with_flow=False)
    model, _ = load_checkpoint(_input_path(args.checkpoint), spec, hp)
    train_subj, test_subj = _split(data.subjects, args.fold, args.seed)
    test_subj = test_subj or data.subjects
    fold = evaluate(model, data.subset(test_subj), -1 if args.fold is None else args.fold,
                    train_subj if args.fold is not None else [], test_subj)
    if args.out:
        out = _out_dir(args)
        _write_fold_csv(out / "eval_f1.csv", fold, spec.au_ids)
        _record(args, spec, hp, out)
    print(json.dumps(_result_json(fold, spec.au_ids)) if args.json else _f1_table(fold, spec.au_ids))
    return EXIT_OK


def _viz_samples(args, spec, hp, need_flow: bool = False):
    data = _dataset(args.labeled, spec, hp, args, with_flow=need_flow)
    picks = [i for i in range(len(data)) if not need_flow or data.partner(i) is not None]
    return [augment(data[i], None, hp.input_size, train=False) for i in picks[:args.count]]


@torch.no_grad()
def cmd_viz_flow(args) -> int:
    spec, hp = load_config(args.config)
    samples = _viz_samples(args, spec, hp, need_flow=True)
    if not samples:
        raise DataError("no frame in the manifest has a flow partner")
    model, _ = _model(spec, hp, args.checkpoint)
    batch = collate(samples, spec, flow_size=model.flow_size)
    bundle, _, _ = model.features(batch.images, batch.centers)
    pred = model.flow_head(bundle.global_maps)
    pairs = [(t.permute(1, 2, 0).numpy(), p.permute(1, 2, 0).numpy()) for t, p in zip(batch.flow, pred)]
    out = _out_dir(args)
    path = viz.save_png(out / "flow.png", viz.flow_figure(pairs))
    _record(args, spec, hp, out)
    print(path)
    return EXIT_OK


@torch.no_grad()
def cmd_viz_inpaint(args) -> int:
    spec, hp = load_config(args.config)
    samples = _viz_samples(args, spec, hp)
    model, _ = _model(spec, hp, args.checkpoint)
    rng = np.random.default_rng(args.seed)
    masked = [apply_roi_mask(s, spec, rng) for s in samples]
    batch = collate(masked, spec, flow_size=model.flow_size)
    _, att, _ = model.features(batch.images, batch.centers)
    rows = torch.arange(len(masked))
    au = batch.mask_au
    tokens = torch.stack([att.tokens[rows, 2 * au], att.tokens[rows, 2 * au + 1]], 1)
    fakes = model.roii.generator(tokens.flatten(0, 1)).reshape(len(masked), 2, 3, *batch.patches.shape[-2:])
    recovered = []
    for m, f in zip(masked, fakes):
        gen = tuple(f[k].permute(1, 2, 0).numpy() for k in range(2))
        recovered.append(restore_patches(m.image, type(m.mask)(m.mask.au_index, m.mask.boxes, gen,
                                                               m.mask.excluded_au_indices)))
    out = _out_dir(args)
    path = viz.save_png(out / "inpaint.png", viz.inpaint_figure(
        [m.image for m in masked], [s.image for s in samples], recovered))
    _record(args, spec, hp, out)
    print(path)
    return EXIT_OK


def cmd_viz_relations(args) -> int:
    spec, hp = load_config(args.config)
    out = _out_dir(args)
    if args.indicators:
        indicators, au_ids = viz.read_indicator_csv(_input_path(args.indicators))
        if tuple(au_ids) != spec.au_ids:
            raise ConfigError("au_ids", f"indicator file covers {au_ids}, config {list(spec.au_ids)}")
    else:
        model, _ = _model(spec, hp, args.checkpoint)
        indicators = model.transformer.indicators.detach().numpy()
        viz.write_indicator_csv(out / "indicators.csv", indicators, spec.au_ids)
    sim = indicator_similarity(torch.as_tensor(indicators, dtype=torch.float64)).numpy()
    path = viz.save_png(out / "relations.png", viz.similarity_heatmap(sim))
    np.savetxt(out / "relations.csv", sim, delimiter=",", fmt="%.6f")
    _record(args, spec, hp, out)
    print(path)
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="config file, or a shipped name such as bp4d.cfg")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory (default runs/<command>)")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--flow-provider", choices=sorted(PROVIDERS), default="none",
                        help="flow source when a frame pair has no .flo file")

    parser = argparse.ArgumentParser(prog="rtatl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset to disk")
    p.add_argument("--subjects", type=int, default=6)
    p.add_argument("--frames", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="joint training on manifests")
    p.add_argument("--labeled")
    p.add_argument("--unlabeled")
    p.add_argument("--fold", type=int, help="held-out fold 0..2; omit to train on every subject")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--no-aux", action="store_true", help="supervised loss only")
    p.add_argument("--dry-run", action="store_true", help="validate config and run one step on synthetic data")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="per-AU F1 of a checkpoint")
    p.add_argument("--labeled", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--fold", type=int)
    p.set_defaults(func=cmd_eval)

    for name, func, extra in (("viz-flow", cmd_viz_flow, "target vs predicted flow channels"),
                              ("viz-inpaint", cmd_viz_inpaint, "masked / original / recovered grid"),
                              ("viz-relations", cmd_viz_relations, "AU indicator similarity heatmap")):
        p = sub.add_parser(name, parents=[common], help=extra)
        p.add_argument("--checkpoint")
        if name == "viz-relations":
            p.add_argument("--indicators", help="indicator CSV instead of a checkpoint")
        else:
            p.add_argument("--labeled", required=True)
            p.add_argument("--count", type=int, default=4)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MissingInput, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, DataError, CheckpointMismatch, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
