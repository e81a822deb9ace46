"""Command-line front end for the full pipeline.

Thin dispatcher: every subcommand resolves one RunConfig (defaults, then
--config file, then --set overrides, then --seed), runs the matching module
operation, and echoes the resolved config into the output directory so any
run can be reproduced from its artifacts alone.

Heavy imports happen inside the handlers: --threads must pin the BLAS
thread-count environment variables before numpy loads.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import (RunConfig, emb_config, load_config, measure_config,
                     parse_int_list, pretrain_config, render_config,
                     train_config)
from .errors import ConfigurationError, DN4Error, IngestionError

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

GRADCHECK_TOLERANCE = 1e-4


def _pin_threads(n: int) -> None:
    for var in _THREAD_VARS:
        os.environ[var] = str(max(1, n))


def _need(value: str, key: str) -> str:
    if not value:
        raise ConfigurationError(f"config key '{key}' is required for this command")
    return value


def _checkpoint_path(value: str, key: str = "checkpoint") -> Path:
    path = Path(_need(value, key))
    if not path.is_file():
        raise IngestionError(f"checkpoint not found: {path}")
    return path


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigurationError("--out DIR is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out: Path, cfg: RunConfig) -> None:
    (out / "resolved.cfg").write_text(render_config(cfg), encoding="utf-8")


def _load_inputs(cfg: RunConfig):
    from .data import load_manifest, load_split

    manifest = load_manifest(_need(cfg.manifest, "manifest"))
    split = load_split(_need(cfg.split, "split"), manifest)
    return manifest, split


def _print_report(name: str, report) -> None:
    print(f"{name}: accuracy {report.mean_accuracy:.4f} +/- {report.ci95:.4f} "
          f"({report.repeats}x{report.episodes_per_repeat} episodes)")


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    out = _out_dir(args)
    from .data import make_synthetic_dataset

    manifest_path = make_synthetic_dataset(
        out, cfg.num_classes, cfg.images_per_class, cfg.image_size,
        cfg.seed, channels=cfg.in_channels)
    _echo_config(out, cfg)
    print(f"wrote {manifest_path} "
          f"({cfg.num_classes} classes x {cfg.images_per_class} images)")
    return 0


def cmd_convert(args) -> int:
    from .data import convert_ppm

    resize = (args.resize, args.resize) if args.resize else None
    arr = convert_ppm(args.input, args.output, resize)
    print(f"wrote {args.output} shape {tuple(arr.shape)}")
    return 0


def cmd_split(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    out = _out_dir(args)
    from .data import load_manifest, make_split, save_split
    from .rng import substream

    manifest = load_manifest(_need(cfg.manifest, "manifest"))
    split = make_split(manifest.classes,
                       (cfg.train_classes, cfg.val_classes, cfg.test_classes),
                       substream(cfg.seed, "split"))
    save_split(out / "split.txt", split)
    _echo_config(out, cfg)
    print(f"wrote {out / 'split.txt'} "
          f"(train {len(split.train)} / val {len(split.val)} / test {len(split.test)})")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    out = _out_dir(args)
    from .embedding import save_model
    from .trainer import pretrain_classifier

    manifest, split = _load_inputs(cfg)
    with open(out / "train.log", "w", encoding="utf-8") as fh:
        result = pretrain_classifier(pretrain_config(cfg), emb_config(cfg),
                                     manifest, split, log_fh=fh)
    save_model(out / "model.dn4c", result.params, head=result.head)
    _echo_config(out, cfg)
    print(f"wrote {out / 'model.dn4c'} "
          f"(final train accuracy {result.final_train_accuracy:.4f})")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    out = _out_dir(args)
    from .embedding import save_model
    from .trainer import train

    manifest, split = _load_inputs(cfg)
    with open(out / "train.log", "w", encoding="utf-8") as fh:
        result = train(train_config(cfg), emb_config(cfg), manifest, split,
                       log_fh=fh)
    save_model(out / "model.dn4c", result.params)
    _echo_config(out, cfg)
    if result.diverged:
        print(f"warning: training diverged ({result.divergence_reason}); "
              f"best weights so far were kept", file=sys.stderr)
    print(f"wrote {out / 'model.dn4c'} "
          f"(best val accuracy {result.best_val_accuracy:.4f} "
          f"after {result.episodes_run} episodes)")
    return 0


def _eval_common(args, predictor_name: str):
    """Shared tail of eval/nbnn/knn-baseline: one predictor, one report."""
    cfg = load_config(args.config, args.overrides, args.seed)
    out = _out_dir(args)
    from . import evaluation
    from .embedding import load_model

    manifest, split = _load_inputs(cfg)
    classes = split.section(cfg.eval_section)
    checkpoint = _checkpoint_path(cfg.checkpoint)
    mcfg = measure_config(cfg)
    if predictor_name == "eval":
        params = load_model(checkpoint, emb_config(cfg))
        predict = evaluation.dn4_predictor(params, mcfg,
                                           variant=cfg.measure_variant,
                                           mode=cfg.batchnorm_mode)
        extra = {"method": "dn4", "variant": cfg.measure_variant,
                 "k_neighbors": cfg.k_neighbors}
    elif predictor_name == "nbnn":
        params = load_model(checkpoint, emb_config(cfg))
        predict = evaluation.nbnn_predictor(params, mcfg)
        extra = {"method": "nbnn", "k_neighbors": cfg.k_neighbors}
    else:
        params, head = load_model(checkpoint, emb_config(cfg), with_head=True)
        predict = evaluation.knn_predictor(params, head, cfg.knn_k)
        extra = {"method": "global-knn", "k": cfg.knn_k}
    report = evaluation.evaluate(predict, manifest, classes, cfg.way, cfg.shot,
                                 cfg.queries_per_class,
                                 episodes=cfg.eval_episodes,
                                 repeats=cfg.eval_repeats, seed=cfg.seed,
                                 extra=extra)
    evaluation.write_report(out / "report.json", report)
    _echo_config(out, cfg)
    _print_report(extra["method"], report)
    return 0


def cmd_eval(args) -> int:
    return _eval_common(args, "eval")


def cmd_nbnn(args) -> int:
    return _eval_common(args, "nbnn")


def cmd_knn_baseline(args) -> int:
    return _eval_common(args, "knn")


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    out = _out_dir(args)
    from . import evaluation
    from .embedding import load_model

    manifest, split = _load_inputs(cfg)
    classes = split.section(cfg.eval_section)
    mcfg = measure_config(cfg)
    arms = {}
    for variant, value in (("dn4", cfg.checkpoint_dn4),
                           ("ioi1", cfg.checkpoint_ioi1),
                           ("ioi2", cfg.checkpoint_ioi2)):
        path = _checkpoint_path(value, f"checkpoint_{variant}")
        params = load_model(path, emb_config(cfg))
        arms[variant] = evaluation.dn4_predictor(params, mcfg, variant=variant,
                                                 mode=cfg.batchnorm_mode)
    rows = evaluation.run_ablation(arms, manifest, classes, cfg.way, cfg.shot,
                                   cfg.queries_per_class, cfg.eval_episodes,
                                   cfg.eval_repeats, cfg.seed)
    evaluation.write_table_csv(
        out / "ablation.csv", ["variant", "mean_accuracy", "ci95"],
        [[name, f"{r.mean_accuracy:.6f}", f"{r.ci95:.6f}"] for name, r in rows])
    payload = {name: json.loads(r.to_json()) for name, r in rows}
    (out / "ablation.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _echo_config(out, cfg)
    for name, report in rows:
        _print_report(name, report)
    return 0


def _pattern_path(pattern: str, key: str, placeholder: str, **subs) -> Path:
    if "{" + placeholder + "}" not in pattern:
        raise ConfigurationError(
            f"{key} must contain {{{placeholder}}}, got {pattern!r}")
    return _checkpoint_path(pattern.format(**subs), key)


def cmd_k_study(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    out = _out_dir(args)
    from . import evaluation
    from .embedding import load_model
    from .measure import MeasureConfig

    manifest, split = _load_inputs(cfg)
    classes = split.section(cfg.eval_section)
    pattern = _need(cfg.checkpoint_pattern, "checkpoint_pattern")
    arms = {}
    for k in parse_int_list(cfg.k_values, "k_values"):
        path = _pattern_path(pattern, "checkpoint_pattern", "k", k=k)
        params = load_model(path, emb_config(cfg))
        mcfg = MeasureConfig(k_neighbors=k, zero_norm_eps=cfg.zero_norm_eps)
        arms[k] = evaluation.dn4_predictor(params, mcfg,
                                           variant=cfg.measure_variant,
                                           mode=cfg.batchnorm_mode)
    rows = evaluation.run_k_study(arms, manifest, classes, cfg.way, cfg.shot,
                                  cfg.queries_per_class, cfg.eval_episodes,
                                  cfg.eval_repeats, cfg.seed)
    evaluation.write_table_csv(
        out / "k_study.csv", ["k", "mean_accuracy", "ci95"],
        [[k, f"{r.mean_accuracy:.6f}", f"{r.ci95:.6f}"] for k, r in rows])
    _echo_config(out, cfg)
    for k, report in rows:
        _print_report(f"k={k}", report)
    return 0


def cmd_shot_study(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    out = _out_dir(args)
    from . import evaluation
    from .embedding import load_model

    manifest, split = _load_inputs(cfg)
    classes = split.section(cfg.eval_section)
    pattern = _need(cfg.checkpoint_pattern, "checkpoint_pattern")
    mcfg = measure_config(cfg)
    models = {}
    for shot in parse_int_list(cfg.train_shots, "train_shots"):
        path = _pattern_path(pattern, "checkpoint_pattern", "shot", shot=shot)
        params = load_model(path, emb_config(cfg))
        models[shot] = evaluation.dn4_predictor(params, mcfg,
                                                variant=cfg.measure_variant,
                                                mode=cfg.batchnorm_mode)
    test_shots = parse_int_list(cfg.test_shots, "test_shots")
    mat, means = evaluation.run_shot_study(models, manifest, classes, cfg.way,
                                           cfg.queries_per_class,
                                           cfg.eval_episodes, cfg.eval_repeats,
                                           cfg.seed,
                                           test_shots=tuple(test_shots))
    header = ["test_shot"] + [f"train_shot_{s}" for s in sorted(models)]
    body = [[t] + [f"{v:.6f}" for v in row]
            for t, row in zip(test_shots, mat)]
    evaluation.write_table_csv(out / "shot_study.csv", header, body)
    (out / "shot_study_means.json").write_text(
        json.dumps(means, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _echo_config(out, cfg)
    print(f"triangle means: lower {means['lower']:.4f} "
          f"diagonal {means['diagonal']:.4f} upper {means['upper']:.4f}")
    return 0


def cmd_export_sim(args) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    out = _out_dir(args)
    from .data import sample_episode
    from .embedding import load_model
    from .evaluation import export_similarity_matrix
    from .rng import substream

    manifest, split = _load_inputs(cfg)
    classes = split.section(cfg.eval_section)
    checkpoint = _checkpoint_path(cfg.checkpoint)
    params = load_model(checkpoint, emb_config(cfg))
    episode = sample_episode(manifest, classes, cfg.way, cfg.shot,
                             cfg.queries_per_class,
                             substream(cfg.seed, "export-episode"))
    mat = export_similarity_matrix(params, episode, measure_config(cfg),
                                   out / "similarity.csv",
                                   out / "similarity.json",
                                   mode=cfg.batchnorm_mode, seed=cfg.seed)
    _echo_config(out, cfg)
    print(f"wrote {out / 'similarity.csv'} shape {tuple(mat.shape)}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import standard_checks

    rows = standard_checks()
    for name, err in rows:
        print(f"{name:24s} {err:.3e}")
    worst = max(err for _, err in rows)
    if worst > GRADCHECK_TOLERANCE:
        print(f"gradient check failed: worst error {worst:.3e} "
              f"exceeds {GRADCHECK_TOLERANCE:.0e}", file=sys.stderr)
        return 1
    return 0


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="key = value config file")
    common.add_argument("--set", dest="overrides", action="append",
                        default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, metavar="N",
                        help="override the seed after all other sources")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--threads", type=int, default=1, metavar="N",
                        help="BLAS thread count; 1 is bit-reproducible (default)")

    parser = argparse.ArgumentParser(
        prog="dn4",
        description="Few-shot image classification with local-descriptor "
                    "nearest-neighbor measures.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, **kwargs):
        p = sub.add_parser(name, parents=[common], help=help_text, **kwargs)
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "generate the synthetic texture dataset")
    convert = add("convert", cmd_convert, "convert a P6 image to a tensor file")
    convert.add_argument("input", help="binary P6 file")
    convert.add_argument("output", help="tensor file to write")
    convert.add_argument("--resize", type=int, metavar="N",
                         help="bilinear-resize to N x N")
    add("split", cmd_split, "partition manifest classes into train/val/test")
    add("pretrain", cmd_pretrain, "train a plain classifier over all training classes")
    add("train", cmd_train, "episodic training of the embedding")
    add("eval", cmd_eval, "evaluate a trained embedding on sampled episodes")
    add("nbnn", cmd_nbnn, "frozen-embedding local-descriptor baseline")
    add("knn-baseline", cmd_knn_baseline, "frozen global-feature nearest-neighbor baseline")
    add("ablate", cmd_ablate, "compare measure variants on shared episode streams")
    add("k-study", cmd_k_study, "sweep the neighbor count k")
    add("shot-study", cmd_shot_study, "cross-evaluate models over test shots")
    add("export-sim", cmd_export_sim, "dump one episode's class-by-query score matrix")
    add("gradcheck", cmd_gradcheck, "finite-difference check of every op's gradient")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _pin_threads(args.threads)
    try:
        return args.func(args)
    except DN4Error as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{exc.strerror or exc}: {getattr(exc, 'filename', '') or ''}".strip(),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
