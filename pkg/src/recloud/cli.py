"""Command-line entry point for the full pipeline.

Subcommands: synth, corrupt, pretrain, probe, fewshot, reconstruct. Every
run echoes its fully resolved configuration (as reusable ``key = value``
lines) before executing, writes only under ``--out``, and derives all
randomness from ``--seed``. Exit codes: 0 success, 2 usage, 3 missing
file, 4 invalid configuration, 5 degenerate masking.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .corruption import (DegenerateMaskError, mask_fixed_clusters, mask_patches,
                         mask_random_clusters, mask_view_occlusion, sample_affine)
from .data import (DatasetManifest, SynthSpec, normalize_unit_sphere, read_cloud,
                   resample, synth_generate, write_cloud)
from .evaluation import (EpisodeSpec, extract_features, fewshot_eval, fewshot_report,
                         linear_probe, probe_with_sweep, reconstruct_export)
from .geometry import affine_apply, normalize_patches, patchify
from .trainer import (Checkpoint, DivergenceError, TrainConfig, load_checkpoint,
                      parse_config_text, pretrain, save_checkpoint)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_FILE = 3
EXIT_BAD_CONFIG = 4
EXIT_DEGENERATE_MASK = 5

AFFINE_CHOICES = ("full", "rotate", "translate", "reflect", "shear", "scale", "none")


def _echo_config(pairs: dict) -> None:
    for key in sorted(pairs):
        print(f"{key} = {pairs[key]}")


def _affine_families(choice: str) -> str:
    if choice == "full":
        return "scale,shear,reflect,rotate,translate"
    if choice == "none":
        return "none"
    return choice


def _build_train_config(args) -> TrainConfig:
    kwargs: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"no such config file: {path}")
        kwargs.update(parse_config_text(path.read_text(), source=str(path)))
    overrides = {
        "epochs": args.epochs,
        "learning_rate": args.lr,
        "batch_size": args.batch_size,
        "num_points": args.num_points,
        "seed": args.seed,
        "encoder": args.encoder,
        "affine_role": args.affine_role,
        "objective": args.objective,
        "mask_strategy": args.mask,
        "mask_ratio": args.alpha,
        "global_weight": args.global_weight,
        "decoder": args.decoder,
        "local_decoder": args.local_decoder,
        "global_decoder": args.global_decoder,
        "precision": args.precision,
    }
    if args.affine is not None:
        overrides["affine_families"] = _affine_families(args.affine)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**kwargs).resolved()


def _cmd_synth(args) -> int:
    spec = SynthSpec(families=tuple(args.families.split(",")),
                     samples_per_family=args.samples_per_family,
                     points_per_cloud=args.points,
                     jitter_sigma=args.jitter,
                     seed=args.seed)
    _echo_config({"families": args.families, "samples_per_family": spec.samples_per_family,
                  "points_per_cloud": spec.points_per_cloud, "jitter_sigma": spec.jitter_sigma,
                  "seed": spec.seed, "out": args.out})
    manifest = synth_generate(spec, args.out)
    print(f"wrote {len(manifest)} samples and manifest.tsv under {args.out}")
    return EXIT_OK


def _load_affine_spec_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such affine spec file: {p}")
    kwargs = parse_config_text(p.read_text(), source=str(p))
    allowed = {k for k in kwargs if k.startswith("affine_")}
    unknown = set(kwargs) - allowed
    if unknown:
        raise ValueError(f"{p}: non-affine keys in affine spec: {sorted(unknown)}")
    return kwargs


def _cmd_corrupt(args) -> int:
    kwargs: dict = {"seed": args.seed, "mask_ratio": args.alpha}
    if args.affine_spec:
        kwargs.update(_load_affine_spec_file(args.affine_spec))
    if args.affine is not None:
        kwargs["affine_families"] = _affine_families(args.affine)
    if args.mask == "patch":
        kwargs.update(encoder="transformer", mask_strategy="patch",
                      num_patches=args.patches, patch_size=args.patch_size)
    else:
        kwargs.update(encoder="pointnet", mask_strategy=args.mask,
                      cluster_size=args.cluster_size, max_clusters=args.max_clusters)
    cfg = TrainConfig(**kwargs).resolved()

    pts = read_cloud(args.input)
    if args.num_points:
        pts = resample(pts, args.num_points,
                       np.random.default_rng(np.random.SeedSequence([args.seed, 9])))
    _echo_config({"input": args.input, "out": args.out, "mask": args.mask,
                  "alpha": args.alpha, "seed": args.seed,
                  "affine_families": cfg.affine_families,
                  "input_points": len(pts)})

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 2, 0, 0]))
    transform = sample_affine(cfg.affine_spec(), rng)
    corrupted = affine_apply(pts, transform)

    meta: dict = {"transform": transform.matrix.tolist(),
                  "provenance": list(transform.provenance)}
    if args.mask == "none":
        visible = corrupted
    elif args.mask == "random":
        plan, visible = mask_random_clusters(corrupted, cfg.mask_ratio, rng, cfg.max_clusters)
    elif args.mask == "fixed":
        plan, visible = mask_fixed_clusters(corrupted, cfg.mask_ratio, cfg.cluster_size, rng)
    elif args.mask == "view":
        plan, visible = mask_view_occlusion(corrupted, cfg.mask_ratio, rng)
    else:  # patch
        patches = normalize_patches(patchify(corrupted, cfg.num_patches, cfg.patch_size, rng))
        plan = mask_patches(cfg.num_patches, cfg.mask_ratio, rng)
        vis_abs = (patches.patches[plan.visible]
                   + patches.centers[plan.visible][:, None, :])
        visible = vis_abs.reshape(-1, 3)
    if args.mask != "none":
        meta["masked"] = plan.masked.tolist()
        meta["cluster_sizes"] = list(plan.cluster_sizes)

    write_cloud(out / "corrupted.xyz", visible)
    (out / "plan.json").write_text(json.dumps(meta) + "\n")
    print(f"wrote {len(visible)} visible points to {out / 'corrupted.xyz'}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    cfg = _build_train_config(args)
    print(cfg.to_text(), end="")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(args.resume) if args.resume else None
    try:
        ckpt = pretrain(args.manifest, cfg, metrics_path=out / "metrics.csv", resume=resume)
    except DivergenceError as exc:
        save_checkpoint(exc.checkpoint, out / "checkpoint.ckpt")
        print(f"error: divergence: {exc}", file=sys.stderr)
        return EXIT_ERROR
    save_checkpoint(ckpt, out / "checkpoint.ckpt")
    print(f"finished epoch {ckpt.epoch}; checkpoint and metrics.csv under {out}")
    return EXIT_OK


def _cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    _echo_config({"checkpoint": args.checkpoint, "manifest": args.manifest,
                  "out": args.out, "random_init": args.random_init,
                  "regularization": args.regularization, "sweep": args.sweep,
                  "seed": args.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = extract_features(ckpt, args.manifest, split="train", random_init=args.random_init)
    test = extract_features(ckpt, args.manifest, split="test", random_init=args.random_init)
    train.to_csv(out / "features_train.csv")
    test.to_csv(out / "features_test.csv")
    if args.sweep:
        accuracy, chosen_c = probe_with_sweep(train, test, seed=args.seed)
    else:
        accuracy, chosen_c = linear_probe(train, test, regularization=args.regularization), args.regularization
    report = {"accuracy": accuracy, "regularization": chosen_c,
              "random_init": args.random_init, "train_rows": len(train.ids),
              "test_rows": len(test.ids)}
    (out / "probe_report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"probe accuracy {accuracy:.4f} (C={chosen_c}) -> {out / 'probe_report.json'}")
    return EXIT_OK


def _cmd_fewshot(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    spec = EpisodeSpec(ways=args.ways, shots=args.shots, queries=args.queries,
                       repetitions=args.repetitions, seed=args.seed)
    _echo_config({"checkpoint": args.checkpoint, "manifest": args.manifest,
                  "out": args.out, "ways": spec.ways, "shots": spec.shots,
                  "queries": spec.queries, "repetitions": spec.repetitions,
                  "split": args.split, "seed": spec.seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    features = extract_features(ckpt, args.manifest, split=args.split)
    mean, std, accs = fewshot_eval(features, spec)
    (out / "fewshot_report.json").write_text(fewshot_report(mean, std, accs))
    print(f"few-shot accuracy {mean:.4f} +/- {std:.4f} over {spec.repetitions} episodes")
    return EXIT_OK


def _cmd_reconstruct(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    _echo_config({"checkpoint": args.checkpoint, "input": args.input,
                  "out": args.out, "seed": args.seed})
    pts = read_cloud(args.input)
    files = reconstruct_export(ckpt, pts, args.out, seed=args.seed)
    for name, path in files.items():
        print(f"{name}: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recloud",
                                     description="Point-cloud pretraining by corruption "
                                                 "and reconstruction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic shape dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--families", default="sphere,cube,cylinder,torus")
    p.add_argument("--samples-per-family", type=int, default=20)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--jitter", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("corrupt", help="apply affine + masking corruption to one cloud")
    p.add_argument("--input", required=True, help="input cloud (xyz or ply)")
    p.add_argument("--out", required=True)
    p.add_argument("--mask", required=True, choices=("random", "fixed", "view", "patch", "none"))
    p.add_argument("--alpha", type=float, default=0.6, help="masking ratio")
    p.add_argument("--affine", choices=AFFINE_CHOICES, default=None)
    p.add_argument("--affine-spec", default=None, help="key-value file of affine_* keys")
    p.add_argument("--cluster-size", type=int, default=16)
    p.add_argument("--max-clusters", type=int, default=8)
    p.add_argument("--patches", type=int, default=16)
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--num-points", type=int, default=None, help="resample before corrupting")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_corrupt)

    p = sub.add_parser("pretrain", help="run the pretraining loop")
    p.add_argument("--config", default=None, help="key-value config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--num-points", type=int, default=None)
    p.add_argument("--encoder", choices=("pointnet", "transformer"), default=None)
    p.add_argument("--affine-role", choices=("corruption", "augmentation"), default=None)
    p.add_argument("--objective", choices=("decomposed", "whole", "local-only", "global-only"),
                   default=None)
    p.add_argument("--mask", choices=("random", "fixed", "view", "patch", "none"), default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--affine", choices=AFFINE_CHOICES, default=None)
    p.add_argument("--global-weight", type=float, default=None)
    p.add_argument("--decoder", choices=("fc", "fold"), default=None,
                   help="whole-cloud decoder head (global encoder)")
    p.add_argument("--local-decoder", choices=("fc", "fold"), default=None)
    p.add_argument("--global-decoder", choices=("fc", "fold"), default=None)
    p.add_argument("--precision", choices=("single", "double"), default=None)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("probe", help="linear SVM probe on frozen features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--random-init", action="store_true",
                   help="probe a freshly initialized encoder instead of the trained one")
    p.add_argument("--regularization", type=float, default=1.0)
    p.add_argument("--sweep", action="store_true", help="sweep C over {0.1, 1, 10}")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("fewshot", help="few-shot episode evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ways", type=int, default=4)
    p.add_argument("--shots", type=int, default=10)
    p.add_argument("--queries", type=int, default=15)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_fewshot)

    p = sub.add_parser("reconstruct", help="export corruption + reconstruction stages")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_reconstruct)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing-file: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except DegenerateMaskError as exc:
        print(f"error: degenerate-mask: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE_MASK
    except (ValueError, TypeError) as exc:
        print(f"error: invalid-config: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except Exception as exc:  # pragma: no cover - defensive catch-all
        print(f"error: internal: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
