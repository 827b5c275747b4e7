"""Command-line driver: manifest-based experiments with small overrides.

Exit codes: 0 success, 1 configuration error (bad flags, bad manifest),
2 runtime failure (diverged training, corrupt checkpoint, ...).
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from . import analysis as analysis_mod
from . import data as data_mod
from . import protocol, reports
from .attacks import TRUE_LABEL, evaluate
from .checkpoint import load_model, save_checkpoint
from .manifest import (ExperimentManifest, ManifestError, parse_analysis,
                       parse_attack, parse_train)
from .models import build_mini_resnet, build_mini_vgg
from .rng import derive_seed
from .training import train


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the CLI contract wants 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="lprobe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--manifest", required=True, help="experiment manifest (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override root seed")
        p.add_argument("--epochs", type=int, default=None, help="override training epochs")
        p.add_argument("--epsilon", type=float, default=None, help="override eval epsilon")
        p.add_argument("--out", default=None, help="override output directory")
        if checkpoint:
            p.add_argument("--checkpoint", default=None,
                           help="checkpoint path (defaults to the manifest's)")

    common(sub.add_parser("pretrain", help="train a model from scratch per the manifest"))
    p = sub.add_parser("retrain-cutoff", help="reinitialize + retrain one side of a cut-off")
    common(p, checkpoint=True)
    p.add_argument("--cutoff", required=True, help="segment name, e.g. m_1")
    p.add_argument("--direction", required=True, choices=(protocol.UPTO, protocol.AFTER))
    p = sub.add_parser("sweep-combinations", help="retrain every non-empty segment subset")
    common(p, checkpoint=True)
    p = sub.add_parser("sweep-layers", help="layer-granularity cut-off sweep")
    common(p, checkpoint=True)
    p.add_argument("--direction", default=protocol.UPTO,
                   choices=(protocol.UPTO, protocol.AFTER))
    p = sub.add_parser("reinit-sweep", help="single-layer reinitialization robustness")
    common(p, checkpoint=True)
    p = sub.add_parser("attack-eval", help="clean and robust accuracy of a checkpoint")
    common(p, checkpoint=True)
    p = sub.add_parser("harvest", help="collect activation channel vectors")
    common(p, checkpoint=True)
    p = sub.add_parser("embed", help="embed harvested samples, estimate densities")
    common(p, checkpoint=True)
    p = sub.add_parser("report", help="merge report tables into one table + document")
    p.add_argument("--out", required=True)
    p.add_argument("inputs", nargs="+", help="report tables to merge")
    return parser


def _load_dataset(manifest: ExperimentManifest):
    ds = manifest.dataset
    kind = ds["kind"]
    if kind == "synthetic":
        kwargs = {}
        for key in ("noise", "fragile_amplitude"):
            if key in ds:
                kwargs[key] = ds[key]
        train_ds = data_mod.make_synthetic(
            ds.get("classes", 10), ds.get("train_per_class", 100),
            ds.get("image_size", 32), seed=ds.get("seed_train", 100),
            split="train", **kwargs)
        test_ds = data_mod.make_synthetic(
            ds.get("classes", 10), ds.get("test_per_class", 40),
            ds.get("image_size", 32), seed=ds.get("seed_test", 200),
            split="test", **kwargs)
        return train_ds, test_ds
    if kind == "cifar10":
        train_ds = data_mod.load_cifar10(ds["path"], "train")
        test_ds = data_mod.load_cifar10(ds["path"], "test")
    else:
        train_ds = data_mod.load_mnist_idx(ds["path"], "train")
        test_ds = data_mod.load_mnist_idx(ds["path"], "test")
        pad = ds.get("pad_to")
        if pad:
            train_ds, test_ds = train_ds.pad_to(pad), test_ds.pad_to(pad)
    if ds.get("train_subset"):
        train_ds = train_ds.subset(range(ds["train_subset"]))
    if ds.get("test_subset"):
        test_ds = test_ds.subset(range(ds["test_subset"]))
    return train_ds, test_ds


def _build_model(manifest: ExperimentManifest, seed: int):
    mdl = manifest.model
    input_shape = tuple(mdl.get("input", (3, 32, 32)))
    if mdl["arch"] == "mini_vgg":
        return build_mini_vgg(input_shape, mdl["classes"],
                              mdl.get("width_multiplier", 1.0), seed=seed)
    return build_mini_resnet(input_shape, mdl["classes"],
                             mdl.get("blocks_per_stage", 2),
                             mdl.get("width_multiplier", 1.0), seed=seed)


def _eval_cfg(manifest, args):
    if manifest.attack_eval is None:
        return None
    cfg = parse_attack(manifest.attack_eval, "attack_eval", target_mode=TRUE_LABEL)
    if args.epsilon is not None:
        cfg = replace(cfg, epsilon=args.epsilon)
    return cfg


def _prepare(args, need_checkpoint=False):
    manifest = ExperimentManifest.load(args.manifest)
    if args.seed is not None:
        manifest.root_seed = args.seed
    if args.out is not None:
        manifest.output_dir = args.out
    os.makedirs(manifest.output_dir, exist_ok=True)
    ckpt_path = None
    if need_checkpoint:
        ckpt_path = getattr(args, "checkpoint", None) or manifest.checkpoint
        if ckpt_path is None:
            raise ManifestError("checkpoint: required by this subcommand "
                                "(set manifest.checkpoint or pass --checkpoint)")
    return manifest, ckpt_path


def _train_cfg(manifest, section: str, args, seed_tag: str):
    obj = getattr(manifest, section)
    if obj is None:
        raise ManifestError(f"{section}: required by this subcommand")
    cfg = parse_train(obj, section, seed=derive_seed(manifest.root_seed, seed_tag))
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    return cfg


def _emit(rows, out_dir: str, stem: str):
    table = os.path.join(out_dir, f"{stem}.tsv")
    reports.write_report_table(rows, table)
    reports.write_report_document(rows, os.path.join(out_dir, f"{stem}.txt"), title=stem)
    print(f"wrote {table}")


def _cmd_pretrain(args) -> int:
    manifest, _ = _prepare(args)
    train_ds, test_ds = _load_dataset(manifest)
    cfg = _train_cfg(manifest, "pretrain", args, "pretrain")
    model = _build_model(manifest, seed=derive_seed(manifest.root_seed, "build"))
    history = train(model, train_ds, cfg)
    ckpt_path = os.path.join(manifest.output_dir, f"pretrained_{cfg.mode}.ckpt")
    save_checkpoint(ckpt_path, model, provenance={
        "mode": cfg.mode, "epochs": str(cfg.epochs), "seed": str(cfg.seed),
        "config_digest": cfg.digest(),
    })
    reports.write_history(history, os.path.join(manifest.output_dir, "pretrain_history.tsv"))
    eval_cfg = _eval_cfg(manifest, args)
    rep = evaluate(model, test_ds, eval_cfg, seed=derive_seed(manifest.root_seed, "eval"))
    row = protocol.ExperimentReport(
        plan=f"pretrain:{cfg.mode}", pretrain_mode=cfg.mode, retrain_mode="none",
        trainable_segments={n: True for n in model.segmentation.names},
        clean_acc=rep.clean_acc, robust_acc=rep.robust_acc,
        eval_epsilon=eval_cfg.epsilon if eval_cfg else 0.0,
        eval_iterations=eval_cfg.iterations if eval_cfg else 0,
        seed=cfg.seed, wall_time=0.0,
    )
    _emit([row], manifest.output_dir, "pretrain_report")
    print(f"saved checkpoint {ckpt_path}")
    return 0


def _cmd_retrain_cutoff(args) -> int:
    manifest, ckpt_path = _prepare(args, need_checkpoint=True)
    train_ds, test_ds = _load_dataset(manifest)
    model, ckpt = load_model(ckpt_path)
    cfg = _train_cfg(manifest, "retrain", args, "retrain")
    report = protocol.run_cutoff(
        model, args.cutoff, args.direction, cfg.mode, cfg, train_ds, test_ds,
        _eval_cfg(manifest, args), pretrain_mode=ckpt.provenance.get("mode", ""),
        eval_seed=derive_seed(manifest.root_seed, "eval"),
    )
    _emit([report], manifest.output_dir, f"cutoff_{args.direction}_{args.cutoff}")
    return 0


def _cmd_sweep_combinations(args) -> int:
    manifest, ckpt_path = _prepare(args, need_checkpoint=True)
    train_ds, test_ds = _load_dataset(manifest)
    model, ckpt = load_model(ckpt_path)
    cfg = _train_cfg(manifest, "retrain", args, "retrain")
    rows = protocol.run_combination_sweep(
        model, cfg.mode, cfg, train_ds, test_ds, _eval_cfg(manifest, args),
        pretrain_mode=ckpt.provenance.get("mode", ""),
        eval_seed=derive_seed(manifest.root_seed, "eval"),
        progress=lambda i, total, r: print(f"[{i}/{total}] {r.plan} "
                                           f"robust={r.robust_acc:.3f}"),
    )
    _emit(rows, manifest.output_dir, "combination_sweep")
    medians = [protocol.aggregate_median(rows, seg) for seg in model.segmentation.names]
    reports.write_median_summary(
        medians, os.path.join(manifest.output_dir, "combination_medians.tsv"))
    return 0


def _cmd_sweep_layers(args) -> int:
    manifest, ckpt_path = _prepare(args, need_checkpoint=True)
    train_ds, test_ds = _load_dataset(manifest)
    model, ckpt = load_model(ckpt_path)
    cfg = _train_cfg(manifest, "retrain", args, "retrain")
    flat = model.flat_layers()
    rows = []
    for index, (path, layer) in enumerate(flat):
        if not layer.params():
            continue
        report = protocol.run_layer_cutoff(
            model, index, args.direction, cfg.mode, cfg, train_ds, test_ds,
            _eval_cfg(manifest, args), pretrain_mode=ckpt.provenance.get("mode", ""),
            eval_seed=derive_seed(manifest.root_seed, "eval"),
        )
        rows.append(report)
        print(f"[layer {index} {path}] robust={report.robust_acc:.3f}")
    _emit(rows, manifest.output_dir, f"layer_sweep_{args.direction}")
    return 0


def _cmd_reinit_sweep(args) -> int:
    manifest, ckpt_path = _prepare(args, need_checkpoint=True)
    _, test_ds = _load_dataset(manifest)
    model, ckpt = load_model(ckpt_path)
    entries = protocol.reinit_robustness_sweep(
        model, _eval_cfg(manifest, args), test_ds,
        seed=derive_seed(manifest.root_seed, "reinit-sweep"),
        eval_seed=derive_seed(manifest.root_seed, "eval"),
    )
    out = os.path.join(manifest.output_dir, "reinit_sweep.tsv")
    with open(out, "w") as f:
        f.write("layer\tclean_acc\trobust_acc\n")
        for e in entries:
            f.write(f"{e['layer']}\t{e['clean_acc']!r}\t{e['robust_acc']!r}\n")
    print(f"wrote {out}")
    return 0


def _cmd_attack_eval(args) -> int:
    manifest, ckpt_path = _prepare(args, need_checkpoint=True)
    _, test_ds = _load_dataset(manifest)
    model, ckpt = load_model(ckpt_path)
    eval_cfg = _eval_cfg(manifest, args)
    rep = evaluate(model, test_ds, eval_cfg, seed=derive_seed(manifest.root_seed, "eval"))
    row = protocol.ExperimentReport(
        plan="attack_eval", pretrain_mode=ckpt.provenance.get("mode", ""),
        retrain_mode="none",
        trainable_segments={n: False for n in model.segmentation.names},
        clean_acc=rep.clean_acc, robust_acc=rep.robust_acc,
        eval_epsilon=eval_cfg.epsilon if eval_cfg else 0.0,
        eval_iterations=eval_cfg.iterations if eval_cfg else 0,
        seed=manifest.root_seed, wall_time=0.0,
    )
    _emit([row], manifest.output_dir, "attack_eval")
    print(f"clean_acc={rep.clean_acc!r} robust_acc={rep.robust_acc!r}")
    return 0


def _cmd_harvest(args) -> int:
    manifest, ckpt_path = _prepare(args, need_checkpoint=True)
    _, test_ds = _load_dataset(manifest)
    model, _ = load_model(ckpt_path)
    acfg = parse_analysis(manifest.analysis or {}, "analysis",
                          seed=derive_seed(manifest.root_seed, "analysis"))
    eval_cfg = _eval_cfg(manifest, args)
    if eval_cfg is None:
        raise ManifestError("attack_eval: required to harvest adversarial activations")
    n = min(acfg.n_images, len(test_ds))
    samples = analysis_mod.harvest(
        model, test_ds.images[:n], test_ds.labels[:n], acfg.segments,
        acfg.positions_per_image, attack_cfg=eval_cfg, seed=acfg.seed)
    for seg in acfg.segments:
        seg_samples = [s for s in samples if s.segment_name == seg]
        path = os.path.join(manifest.output_dir, f"samples_{seg}.npz")
        reports.save_samples(seg_samples, path)
        print(f"wrote {path} ({len(seg_samples)} samples)")
    return 0


def _cmd_embed(args) -> int:
    manifest, _ = _prepare(args, need_checkpoint=False)
    acfg = parse_analysis(manifest.analysis or {}, "analysis",
                          seed=derive_seed(manifest.root_seed, "analysis"))
    results = {}
    for seg in acfg.segments:
        path = os.path.join(manifest.output_dir, f"samples_{seg}.npz")
        if not os.path.exists(path):
            raise ManifestError(f"analysis: samples file missing: {path} (run harvest first)")
        samples = reports.load_samples(path)
        result = analysis_mod.embed_segment(samples, seg, acfg)
        results[seg] = result
        reports.save_coords(result, os.path.join(manifest.output_dir, f"coords_{seg}.tsv"))
        reports.save_grids(result, os.path.join(manifest.output_dir, f"grids_{seg}.npz"))
        print(f"{seg}: js_divergence={result.divergence:.4f}")
    reports.write_divergence_summary(
        results, os.path.join(manifest.output_dir, "divergence_summary.tsv"))
    return 0


def _cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        rows.extend(reports.read_report_table(path))
    os.makedirs(args.out, exist_ok=True)
    reports.write_report_table(rows, os.path.join(args.out, "merged_reports.tsv"))
    reports.write_report_document(rows, os.path.join(args.out, "merged_reports.txt"),
                                  title="merged reports")
    print(f"merged {len(rows)} reports into {args.out}")
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "retrain-cutoff": _cmd_retrain_cutoff,
    "sweep-combinations": _cmd_sweep_combinations,
    "sweep-layers": _cmd_sweep_layers,
    "reinit-sweep": _cmd_reinit_sweep,
    "attack-eval": _cmd_attack_eval,
    "harvest": _cmd_harvest,
    "embed": _cmd_embed,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (ManifestError, FileNotFoundError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())
